//! Known-parameter optimal threshold: the jump search over `lambda(a_n)`,
//! the finite/infinite switch point `r_l`, and brute-force and
//! value-iteration oracles.

use crate::error::{Error, Result};
use crate::model::{AgeTable, Regime, SourceParams};
use crate::steady::{
    avg_cost, lambda_2n, lambda_2n_envelope, lambda_limit, lambda_limit_oscillating, lambda_n,
    ThresholdPolicy,
};

/// Relative tolerance under which two average costs count as a tie.
pub const COST_TIE_RTOL: f64 = 1e-12;

/// Largest index the smooth search walks to before giving up.
const SEARCH_CAP: u64 = 1 << 24;

fn strictly_cheaper(candidate: f64, best: f64) -> bool {
    candidate < best - COST_TIE_RTOL * best.abs().max(1.0)
}

/// Transition probability `r_l` at which `lambda_limit` equals `lambda`:
/// the positive root of `lambda N^2 r^2 + (N-1) N rho r - (N-1)(N+1) rho = 0`,
/// clamped to `1/(N-1)`.
pub fn r_limit(n_states: usize, rho: f64, lambda: f64) -> Result<f64> {
    if n_states < 2 {
        return Err(Error::OutOfRange {
            field: "N",
            value: n_states as f64,
            expected: "N >= 2",
        });
    }
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(Error::OutOfRange {
            field: "rho",
            value: rho,
            expected: "0 < rho <= 1",
        });
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NoRoot("lambda must be positive"));
    }
    let n = n_states as f64;
    let b = (n - 1.0) * n * rho;
    let c = (n - 1.0) * (n + 1.0) * rho;
    let a = lambda * n * n;
    // 2c / (b + sqrt(b^2 + 4ac)) avoids cancellation for small lambda.
    let root = 2.0 * c / (b + (b * b + 4.0 * a * c).sqrt());
    Ok(root.min(1.0 / (n - 1.0)))
}

/// Optimal threshold for known parameters.
///
/// Smooth regime: `0` when `lambda <= lambda(a_0)`, infinite when
/// `lambda >= lambda_l`, otherwise the `n + 1` with
/// `lambda(a_n) < lambda <= lambda(a_{n+1})`, located by jumps of
/// `floor(alpha (lambda - lambda(n)))` with `alpha = 0.9 / ((1-r)^2 - (p-r)^2)`.
/// A jump that overshoots the interval is bisected back.
///
/// Oscillating regime (volatile source only): every even local minimum of
/// the cost is certified by a sign change of `lambda - lambda(a_{2k})`; the
/// cheapest of those and the infinite threshold wins.
pub fn optimal_threshold(params: &SourceParams) -> Result<ThresholdPolicy> {
    match params.regime() {
        Regime::Smooth => smooth_threshold(params),
        Regime::Oscillating => oscillating_threshold(params),
    }
}

fn smooth_threshold(params: &SourceParams) -> Result<ThresholdPolicy> {
    let lambda = params.lambda();
    let lam0 = lambda_n(params, 0)?;
    if lambda <= lam0 {
        return Ok(ThresholdPolicy::Finite(0));
    }
    if lambda >= lambda_limit(params) {
        return Ok(ThresholdPolicy::Infinite);
    }
    let r = params.r();
    let x = params.p() - r;
    let alpha = 0.9 / ((1.0 - r).powi(2) - x * x);

    // Invariant: lambda(lo) < lambda.
    let mut lo = 0u64;
    let mut lam_lo = lam0;
    loop {
        if lo >= SEARCH_CAP {
            return Err(Error::NonConvergence {
                what: "threshold search",
                iterations: lo as usize,
            });
        }
        if lambda <= lambda_n(params, lo + 1)? {
            return Ok(ThresholdPolicy::Finite(lo + 1));
        }
        let raw = (alpha * (lambda - lam_lo)).floor();
        let cap = lo.max(64);
        let step = if raw.is_finite() && raw >= 1.0 {
            (raw as u64).min(cap)
        } else if raw.is_finite() {
            1
        } else {
            cap
        }
        .max(2);
        let cand = lo + step;
        let lam_cand = lambda_n(params, cand)?;
        if lam_cand < lambda {
            lo = cand;
            lam_lo = lam_cand;
            continue;
        }
        // lambda(lo + 1) < lambda <= lambda(cand): smallest m with lambda <= lambda(m).
        let (mut a, mut b) = (lo + 1, cand);
        while b - a > 1 {
            let mid = a + (b - a) / 2;
            if lambda <= lambda_n(params, mid)? {
                b = mid;
            } else {
                a = mid;
            }
        }
        return Ok(ThresholdPolicy::Finite(b));
    }
}

fn oscillating_threshold(params: &SourceParams) -> Result<ThresholdPolicy> {
    if !params.is_volatile() {
        return Err(Error::VolatilityRequired);
    }
    let lambda = params.lambda();
    let lam_lim = lambda_limit_oscillating(params)?;
    // Below this the sign of lambda - lambda(a_{2k}) is not resolvable in f64.
    let resolution = 8.0 * f64::EPSILON * lambda.abs().max(lam_lim.abs());
    let gap = (lambda - lam_lim).abs().max(resolution);

    let mut candidates = Vec::new();
    let mut prev = lambda_2n(params, 0)?;
    if lambda <= prev {
        candidates.push(0u64);
    }
    let mut m = 0u64;
    loop {
        let next = lambda_2n(params, m + 1)?;
        if prev < lambda && lambda <= next {
            candidates.push(2 * (m + 1));
        }
        // Past this point lambda - lambda(a_{2k}) keeps the sign of lambda - lim.
        if lambda_2n_envelope(params, m + 1) < gap {
            break;
        }
        m += 1;
        if m >= SEARCH_CAP {
            break;
        }
        prev = next;
    }

    // Candidates are increasing, so a tie keeps the earlier one.
    let mut best: Option<(u64, f64)> = None;
    for n in candidates {
        let c = avg_cost(params, ThresholdPolicy::Finite(n))?;
        if best.map_or(true, |(_, bc)| strictly_cheaper(c, bc)) {
            best = Some((n, c));
        }
    }
    Ok(match best {
        Some((n, c)) if !strictly_cheaper(params.age_limit(), c) => ThresholdPolicy::Finite(n),
        _ => ThresholdPolicy::Infinite,
    })
}

/// Argmin of the average cost over admissible thresholds in
/// `[0, n_max] ∪ {inf}`; ties (within `COST_TIE_RTOL`) go to the smaller threshold.
pub fn brute_force_threshold(params: &SourceParams, n_max: u64) -> Result<ThresholdPolicy> {
    let step = match params.regime() {
        Regime::Smooth => 1,
        Regime::Oscillating => 2,
    };
    let mut best = ThresholdPolicy::Finite(0);
    let mut best_cost = avg_cost(params, best)?;
    let mut n = step;
    while n <= n_max {
        let c = avg_cost(params, ThresholdPolicy::Finite(n))?;
        if strictly_cheaper(c, best_cost) {
            best = ThresholdPolicy::Finite(n);
            best_cost = c;
        }
        n += step;
    }
    if strictly_cheaper(params.age_limit(), best_cost) {
        best = ThresholdPolicy::Infinite;
    }
    Ok(best)
}

/// Result of discounted value iteration on the truncated ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyVector {
    /// `true` where transmitting is strictly better than idling.
    pub actions: Vec<bool>,
    pub values: Vec<f64>,
    /// Ladder values the states stand for, used to read off the threshold.
    pub ages: Vec<f64>,
    pub iterations: usize,
}

/// Value iteration for the discounted problem
/// `V(a_j) = min{a_j + b V(a_{j+1}), a_j + lambda + b(rho V(a_0) + (1-rho) V(a_{j+1}))}`
/// on states `0..=j_max`, with `j_max` absorbing and costed at the limit `a_l`.
/// Stops once the sup-norm distance to the fixed point is certified below
/// `tol`, or once a sweep changes no value by more than a few ulps of
/// `max |V|` (for large `lambda / (1 - beta)` that floor sits above `tol`).
pub fn value_iteration(params: &SourceParams, beta: f64, j_max: u64, tol: f64) -> Result<PolicyVector> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::OutOfRange {
            field: "beta",
            value: beta,
            expected: "0 < beta < 1",
        });
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::OutOfRange {
            field: "tol",
            value: tol,
            expected: "tol > 0",
        });
    }
    let table = AgeTable::build(params, tol)?;
    let size = j_max as usize + 1;
    let mut ages: Vec<f64> = (0..j_max).map(|j| table.age(j)).collect();
    ages.push(params.age_limit());
    let lambda = params.lambda();
    let rho = params.rho();

    let scale = ages.iter().fold(0.0f64, |m, &a| m.max(a)) + lambda;
    let needed = ((tol * (1.0 - beta) / (beta * scale.max(1.0))).ln() / beta.ln()).ceil();
    let cap = needed.max(0.0) as usize + 1000;

    let mut v = vec![0.0; size];
    let mut next = vec![0.0; size];
    let stay = beta * (1.0 - rho);
    for it in 1..=cap {
        // Transmitting adds lambda and moves mass rho from a_{j+1} to a_0.
        let reset = lambda + beta * rho * v[0];
        let step = |a: f64, succ: f64| a + (beta * succ).min(reset + stay * succ);
        let mut diff = 0.0f64;
        for ((out, a), w) in next.iter_mut().zip(&ages).zip(v.windows(2)) {
            *out = step(*a, w[1]);
            let d = (*out - w[0]).abs();
            diff = if d > diff { d } else { diff };
        }
        // The last state succeeds itself.
        let last = v[size - 1];
        next[size - 1] = step(ages[size - 1], last);
        diff = diff.max((next[size - 1] - last).abs());
        std::mem::swap(&mut v, &mut next);
        let floor = 8.0 * f64::EPSILON * v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if beta / (1.0 - beta) * diff < tol || diff <= floor {
            let reset = lambda + beta * rho * v[0];
            let actions = (0..size)
                .map(|j| {
                    let succ = v[(j + 1).min(size - 1)];
                    reset + stay * succ < beta * succ
                })
                .collect();
            return Ok(PolicyVector {
                actions,
                values: v,
                ages,
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "value iteration",
        iterations: cap,
    })
}

/// States ordered by ladder value, ties broken by index. In the smooth
/// regime this is plain index order.
fn value_order(pv: &PolicyVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pv.actions.len()).collect();
    order.sort_by(|&i, &j| pv.ages[i].total_cmp(&pv.ages[j]).then(i.cmp(&j)));
    order
}

/// Reads an increasing threshold off an action vector: idle on the states
/// ranked below some state `n`, transmit on `n` and every state ranked above
/// it, in the order of [`value_order`]. `None` when the actions are not of
/// that form.
pub fn extract_threshold(pv: &PolicyVector) -> Option<ThresholdPolicy> {
    match policy_shape(pv) {
        PolicyShape::Increasing(p) => Some(p),
        _ => None,
    }
}

/// Shape of an action vector over states ranked by ladder value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyShape {
    /// Idle below the threshold state, transmit from it upwards. All-idle is
    /// `Increasing(Infinite)`, all-transmit `Increasing(Finite(0))`.
    Increasing(ThresholdPolicy),
    /// Transmit below the given state, idle from it upwards.
    Decreasing(u64),
    Unstructured,
}

/// Classifies an action vector as a one-switch policy in either direction.
pub fn policy_shape(pv: &PolicyVector) -> PolicyShape {
    let order = value_order(pv);
    let acts: Vec<bool> = order.iter().map(|&j| pv.actions[j]).collect();
    let switches = acts.windows(2).filter(|w| w[0] != w[1]).count();
    match (switches, acts.first()) {
        (0, Some(true)) => PolicyShape::Increasing(ThresholdPolicy::Finite(order[0] as u64)),
        (0, _) => PolicyShape::Increasing(ThresholdPolicy::Infinite),
        (1, Some(&first)) => {
            let k = acts.iter().position(|&a| a != first).expect("one switch");
            if first {
                PolicyShape::Decreasing(order[k] as u64)
            } else {
                PolicyShape::Increasing(ThresholdPolicy::Finite(order[k] as u64))
            }
        }
        _ => PolicyShape::Unstructured,
    }
}
