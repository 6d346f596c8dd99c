//! Steady-state behaviour of a fixed threshold policy: stationary
//! distribution of the ladder index, average age, average active time and
//! the cost values `lambda(a_n)` at which consecutive thresholds tie.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{powu, NeumaierSum, Regime, SourceParams};

/// Transmit at ladder values at or above `a_n`, or never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThresholdPolicy {
    Finite(u64),
    Infinite,
}

impl ThresholdPolicy {
    pub fn finite(&self) -> Option<u64> {
        match *self {
            ThresholdPolicy::Finite(n) => Some(n),
            ThresholdPolicy::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, ThresholdPolicy::Infinite)
    }

    /// Whether the policy schedules a transmission at ladder index `j`.
    ///
    /// The threshold compares ladder values (`a_j >= a_n`). In the smooth
    /// regime that is `j >= n`. In the oscillating regime with a volatile
    /// source every odd value sits above every even one, odd values decrease
    /// and even values increase, which gives the index rules below.
    pub fn transmits(&self, regime: Regime, j: u64) -> bool {
        let n = match *self {
            ThresholdPolicy::Finite(n) => n,
            ThresholdPolicy::Infinite => return false,
        };
        match regime {
            Regime::Smooth => j >= n,
            Regime::Oscillating if n % 2 == 0 => j % 2 == 1 || j >= n,
            Regime::Oscillating => j % 2 == 1 && j <= n,
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Finite(n) => write!(f, "{n}"),
            ThresholdPolicy::Infinite => f.write_str("inf"),
        }
    }
}

/// Stationary distribution of the ladder index under a finite threshold:
/// explicit head probabilities followed by a geometric tail.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    pub threshold: ThresholdPolicy,
    /// `u(a_0), ..., u(a_{tail_start - 1})`.
    pub head: Vec<f64>,
    pub tail_start: u64,
    /// `u(a_{tail_start})`.
    pub tail_first: f64,
    /// `1 - rho`.
    pub tail_ratio: f64,
}

impl StationaryDist {
    pub fn prob(&self, i: u64) -> f64 {
        if i < self.tail_start {
            self.head[i as usize]
        } else {
            self.tail_first * powu(self.tail_ratio, i - self.tail_start)
        }
    }

    /// Mass of all states at or after `i`, with `i >= tail_start`.
    pub fn tail_mass_from(&self, i: u64) -> f64 {
        assert!(i >= self.tail_start);
        self.prob(i) / (1.0 - self.tail_ratio)
    }

    pub fn total_mass(&self) -> f64 {
        let mut s = NeumaierSum::default();
        for &h in &self.head {
            s.add(h);
        }
        s.add(self.tail_mass_from(self.tail_start));
        s.total()
    }
}

/// Long-run averages of a threshold policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyAverages {
    pub avg_age: f64,
    pub avg_active: f64,
    pub avg_cost: f64,
}

fn admissible(params: &SourceParams, policy: ThresholdPolicy) -> Result<()> {
    if let ThresholdPolicy::Finite(n) = policy {
        if params.regime() == Regime::Oscillating && n % 2 == 1 {
            return Err(Error::NoStationary(n));
        }
    }
    Ok(())
}

pub fn stationary(params: &SourceParams, policy: ThresholdPolicy) -> Result<StationaryDist> {
    admissible(params, policy)?;
    let n = policy
        .finite()
        .ok_or(Error::Invalid("the infinite threshold has no stationary distribution".into()))?;
    let rho = params.rho();
    let s = 1.0 - rho;
    match params.regime() {
        Regime::Smooth => {
            let u0 = rho / (n as f64 * rho + 1.0);
            Ok(StationaryDist {
                threshold: policy,
                head: vec![u0; n as usize + 1],
                tail_start: n + 1,
                tail_first: s * u0,
                tail_ratio: s,
            })
        }
        Regime::Oscillating => {
            let m = n / 2;
            let u0 = rho / (2.0 - powu(s, m));
            let head = (0..n).map(|i| u0 * powu(s, i / 2)).collect();
            Ok(StationaryDist {
                threshold: policy,
                head,
                tail_start: n,
                tail_first: u0 * powu(s, m),
                tail_ratio: s,
            })
        }
    }
}

pub fn avg_age(params: &SourceParams, policy: ThresholdPolicy) -> Result<f64> {
    admissible(params, policy)?;
    let n = match policy {
        ThresholdPolicy::Finite(n) => n,
        ThresholdPolicy::Infinite => return Ok(params.age_limit()),
    };
    let nn = params.nf();
    let r = params.r();
    let rho = params.rho();
    let s = 1.0 - rho;
    let x = params.p() - r;
    let y = 1.0 - r;
    let nr = nn * r;
    match params.regime() {
        Regime::Smooth => {
            let xn = powu(x, n + 2);
            let yn = powu(y, n + 2);
            let c = x * x / (nr * nr) - y * y / (r * r) + (nn - 1.0) * s / (nr * rho);
            let bracket = n as f64 * (nn - 1.0) / nr - xn / (nr * nr)
                + yn / (r * r)
                + s * xn / (nr * (1.0 - s * x))
                - s * yn / (r * (1.0 - s * y))
                + c;
            Ok(rho / (n as f64 * rho + 1.0) * bracket)
        }
        Regime::Oscillating => {
            let sm = powu(s, n / 2);
            let d = 2.0 - sm;
            let t1 = rho * x / (d * nr) * ((2.0 - nr) * (1.0 - s * x) - rho * powu(x, n + 1) * sm)
                / ((1.0 - s * x * x) * (1.0 - s * x));
            let t2 = rho * y / (d * r) * ((2.0 - r) * (1.0 - s * y) - rho * powu(y, n + 1) * sm)
                / ((1.0 - s * y * y) * (1.0 - s * y));
            Ok(params.age_limit() + t1 - t2)
        }
    }
}

pub fn avg_active(params: &SourceParams, policy: ThresholdPolicy) -> Result<f64> {
    admissible(params, policy)?;
    let n = match policy {
        ThresholdPolicy::Finite(n) => n,
        ThresholdPolicy::Infinite => return Ok(0.0),
    };
    let rho = params.rho();
    Ok(match params.regime() {
        Regime::Smooth => 1.0 / (n as f64 * rho + 1.0),
        Regime::Oscillating => 1.0 / (2.0 - powu(1.0 - rho, n / 2)),
    })
}

pub fn avg_cost(params: &SourceParams, policy: ThresholdPolicy) -> Result<f64> {
    Ok(steady_averages(params, policy)?.avg_cost)
}

pub fn steady_averages(params: &SourceParams, policy: ThresholdPolicy) -> Result<SteadyAverages> {
    let avg_age = avg_age(params, policy)?;
    let avg_active = avg_active(params, policy)?;
    Ok(SteadyAverages {
        avg_age,
        avg_active,
        avg_cost: avg_age + params.lambda() * avg_active,
    })
}

fn require(params: &SourceParams, regime: Regime) -> Result<()> {
    if params.regime() == regime {
        Ok(())
    } else {
        Err(Error::WrongRegime(regime))
    }
}

/// `(1-r)^l - (p-r)^l` without cancellation when both powers are close to 1.
fn ladder_step(params: &SourceParams, l: u64) -> f64 {
    let r = params.r();
    let x = params.p() - r;
    let y = 1.0 - r;
    let yl = powu(y, l);
    if x > 0.0 {
        let c = (-params.nf() * r).ln_1p() - (-r).ln_1p();
        -yl * (l as f64 * c).exp_m1()
    } else {
        yl - powu(x, l)
    }
}

/// `lambda(a_n)`: the cost at which thresholds `n` and `n+1` have equal
/// average cost (smooth regime).
///
/// Evaluated through the renewal identity
/// `lambda(a_n) = rho * [(n+1) G + sum_{l=1}^{n+1} l * delta_l]` where
/// `delta_l = a_l - a_{l-1}` and `G = sum_{l > n+1} (1-rho)^(l-n-1) delta_l`.
/// Every term is nonnegative, so the value stays accurate for tiny `r`
/// where the quotient of closed-form averages cancels catastrophically.
pub fn lambda_n(params: &SourceParams, n: u64) -> Result<f64> {
    require(params, Regime::Smooth)?;
    let r = params.r();
    let rho = params.rho();
    let s = 1.0 - rho;
    let x = params.p() - r;
    let y = 1.0 - r;
    let mut sum = NeumaierSum::default();
    for l in 1..=n + 1 {
        sum.add(l as f64 * ladder_step(params, l));
    }
    let d1 = ladder_step(params, n + 1);
    let d2 = ladder_step(params, n + 2);
    let g = s * (d2 - s * x * y * d1) / ((1.0 - s * y) * (1.0 - s * x));
    sum.add((n + 1) as f64 * g);
    Ok(rho * sum.total())
}

/// `lambda(a_n)` as the quotient `(abar_{n+1} - abar_n) / (dbar_n - dbar_{n+1})`.
pub fn lambda_n_quotient(params: &SourceParams, n: u64) -> Result<f64> {
    require(params, Regime::Smooth)?;
    let a0 = avg_age(params, ThresholdPolicy::Finite(n))?;
    let a1 = avg_age(params, ThresholdPolicy::Finite(n + 1))?;
    let d0 = avg_active(params, ThresholdPolicy::Finite(n))?;
    let d1 = avg_active(params, ThresholdPolicy::Finite(n + 1))?;
    Ok((a1 - a0) / (d0 - d1))
}

/// `lambda(a_n)` expanded around its limit.
pub fn lambda_n_expanded(params: &SourceParams, n: u64) -> Result<f64> {
    require(params, Regime::Smooth)?;
    let r = params.r();
    let nr = params.nf() * r;
    let rho = params.rho();
    let s = 1.0 - rho;
    let x = params.p() - r;
    let y = 1.0 - r;
    let nrho = n as f64 * rho + 1.0;
    Ok(lambda_limit(params)
        + powu(x, n + 2) * (nrho + rho / nr) * rho / (nr * (1.0 - s * x))
        - powu(y, n + 2) * (nrho + rho / r) * rho / (r * (1.0 - s * y)))
}

/// `lim lambda(a_n) = (N-1)(N+1-Nr) rho / (N^2 r^2)`.
pub fn lambda_limit(params: &SourceParams) -> f64 {
    let nn = params.nf();
    let r = params.r();
    (nn - 1.0) * (nn + 1.0 - nn * r) * params.rho() / (nn * nn * r * r)
}

struct OscTerms {
    s: f64,
    ex: f64,
    ey: f64,
    x2: f64,
    y2: f64,
    nr: f64,
    r: f64,
    h_inf: f64,
}

impl OscTerms {
    fn new(params: &SourceParams) -> Self {
        let r = params.r();
        let nr = params.nf() * r;
        let s = 1.0 - params.rho();
        let x = params.p() - r;
        let y = 1.0 - r;
        let e = |z: f64| z * (1.0 + z) / (1.0 - s * z * z) - z / (1.0 - s * z);
        Self {
            s,
            ex: e(x),
            ey: e(y),
            x2: x * x,
            y2: y * y,
            nr,
            r,
            h_inf: x * (1.0 + x) / (nr * (1.0 - s * x * x)) - y * (1.0 + y) / (r * (1.0 - s * y * y)),
        }
    }

    fn e(&self, m: u64) -> f64 {
        powu(self.x2, m) * self.ex / self.nr - powu(self.y2, m) * self.ey / self.r
    }

    /// Bound on `|E(m)|`, decreasing in `m`.
    fn e_bound(&self, m: u64) -> f64 {
        powu(self.x2, m) * self.ex.abs() / self.nr + powu(self.y2, m) * self.ey.abs() / self.r
    }
}

/// `lambda(a_{2m})`: the cost at which even thresholds `2m` and `2m+2` tie
/// (oscillating regime). Finite at `rho = 1`, where all thresholds `>= 2`
/// have the same averages and the value is the continuous extension.
pub fn lambda_2n(params: &SourceParams, m: u64) -> Result<f64> {
    require(params, Regime::Oscillating)?;
    let t = OscTerms::new(params);
    let (e0, e1) = (t.e(m), t.e(m + 1));
    Ok(-params.rho() * t.h_inf - 2.0 * t.s * e1 + 2.0 * e0 + powu(t.s, m + 1) * (e1 - e0))
}

/// `lambda(a_{2m})` as the quotient of closed-form averages; `NaN` at `rho = 1`.
pub fn lambda_2n_quotient(params: &SourceParams, m: u64) -> Result<f64> {
    require(params, Regime::Oscillating)?;
    let (lo, hi) = (ThresholdPolicy::Finite(2 * m), ThresholdPolicy::Finite(2 * m + 2));
    let da = avg_age(params, hi)? - avg_age(params, lo)?;
    let dd = avg_active(params, lo)? - avg_active(params, hi)?;
    Ok(da / dd)
}

/// `lim lambda(a_{2m})` in the oscillating regime.
pub fn lambda_limit_oscillating(params: &SourceParams) -> Result<f64> {
    require(params, Regime::Oscillating)?;
    Ok(-params.rho() * OscTerms::new(params).h_inf)
}

/// Upper bound on `|lambda(a_{2m}) - lim lambda(a_{2m})|`, decreasing in `m`.
pub(crate) fn lambda_2n_envelope(params: &SourceParams, m: u64) -> f64 {
    let t = OscTerms::new(params);
    4.0 * (t.e_bound(m) + t.e_bound(m + 1))
}

/// Iteration matrix of the head probabilities `(u_0, ..., u_{n*-1})`:
/// first row `-rho`, ones on the subdiagonal.
pub fn build_q(n_star: usize, rho: f64) -> Result<DMatrix<f64>> {
    if n_star == 0 {
        return Err(Error::OutOfRange {
            field: "n_star",
            value: 0.0,
            expected: "n_star >= 1",
        });
    }
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(Error::OutOfRange {
            field: "rho",
            value: rho,
            expected: "0 < rho <= 1",
        });
    }
    let mut q = DMatrix::zeros(n_star, n_star);
    for c in 0..n_star {
        q[(0, c)] = -rho;
    }
    for i in 1..n_star {
        q[(i, i - 1)] = 1.0;
    }
    Ok(q)
}

/// Largest eigenvalue modulus, via a real Schur decomposition.
pub fn spectral_radius(q: &DMatrix<f64>) -> Result<f64> {
    let (rows, cols) = q.shape();
    if rows != cols || rows == 0 {
        return Err(Error::NotSquare { rows, cols });
    }
    let max_iter = 1000 * rows;
    let schur = nalgebra::linalg::Schur::try_new(q.clone(), f64::EPSILON, max_iter).ok_or(
        Error::NonConvergence {
            what: "Schur decomposition",
            iterations: max_iter,
        },
    )?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(n: usize, r: f64, rho: f64) -> SourceParams {
        SourceParams::new(n, r, rho, 1.0).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let s = sp(5, 0.1, 0.5);
        let u = stationary(&s, ThresholdPolicy::Finite(0)).unwrap();
        assert_eq!(u.prob(0), 0.5);
        assert_eq!(u.prob(1), 0.25);
        assert_eq!(u.prob(2), 0.125);
        let u = stationary(&s, ThresholdPolicy::Finite(2)).unwrap();
        for i in 0..3 {
            assert_eq!(u.prob(i), 0.25);
        }
        assert_eq!(u.prob(3), 0.125);
        assert!((u.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oscillating_odd_rejected() {
        let o = sp(2, 0.9, 0.5);
        assert_eq!(stationary(&o, ThresholdPolicy::Finite(3)), Err(Error::NoStationary(3)));
        assert_eq!(avg_age(&o, ThresholdPolicy::Finite(1)), Err(Error::NoStationary(1)));
        assert_eq!(avg_active(&o, ThresholdPolicy::Finite(5)), Err(Error::NoStationary(5)));
    }

    #[test]
    fn active_time_examples() {
        let s = sp(5, 0.1, 0.5);
        assert_eq!(avg_active(&s, ThresholdPolicy::Finite(0)).unwrap(), 1.0);
        assert_eq!(avg_active(&s, ThresholdPolicy::Finite(2)).unwrap(), 0.5);
        assert_eq!(avg_active(&s, ThresholdPolicy::Infinite).unwrap(), 0.0);
        let o = sp(2, 0.9, 0.5);
        assert!((avg_active(&o, ThresholdPolicy::Finite(2)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn infinite_threshold_averages() {
        let s = SourceParams::new(5, 0.25, 0.5, 8.0).unwrap();
        let avg = steady_averages(&s, ThresholdPolicy::Infinite).unwrap();
        assert!((avg.avg_age - 3.2).abs() < 1e-12);
        assert_eq!(avg.avg_active, 0.0);
        assert_eq!(avg.avg_cost, avg.avg_age);
    }

    #[test]
    fn lambda_limit_examples() {
        assert!((lambda_limit(&sp(5, 0.1, 0.5)) - 44.0).abs() < 1e-12);
        assert!((lambda_limit(&sp(5, 0.25, 0.5)) - 6.08).abs() < 1e-12);
        assert!((lambda_limit(&sp(5, 0.2212, 0.5)) - 8.0).abs() < 0.05);
    }

    #[test]
    fn lambda_forms_agree_at_a_point() {
        let s = sp(5, 0.1, 0.5);
        for n in [0, 1, 5, 20] {
            let a = lambda_n(&s, n).unwrap();
            assert!((a - lambda_n_quotient(&s, n).unwrap()).abs() < 1e-8);
            assert!((a - lambda_n_expanded(&s, n).unwrap()).abs() < 1e-8);
        }
        assert!(lambda_n(&sp(2, 0.9, 0.5), 0).is_err());
    }

    #[test]
    fn q_examples() {
        let q = build_q(1, 0.5).unwrap();
        assert_eq!(q[(0, 0)], -0.5);
        assert!((spectral_radius(&q).unwrap() - 0.5).abs() < 1e-12);
        let q = build_q(2, 0.5).unwrap();
        assert_eq!(q.row(0).iter().copied().collect::<Vec<_>>(), vec![-0.5, -0.5]);
        assert_eq!(q.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert!((spectral_radius(&q).unwrap() - 0.5f64.sqrt()).abs() < 1e-10);
        assert!(build_q(0, 0.5).is_err());
        assert!(matches!(
            spectral_radius(&DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
    }
}
