//! Source parameters, the belief sequence and the MAoII age ladder.
//!
//! The source is a symmetric N-state Markov chain: it stays put with
//! probability `p` and moves to each of the other `N - 1` states with
//! probability `r`, so `p = 1 - (N-1) r`. After a delivery the monitor's
//! estimate is correct; `a_j` is the expected age of incorrect information
//! `j` slots after the last delivery.

use crate::error::{Error, Result};

/// Shape of the age ladder `a_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// `1 - r >= |p - r|`: `a_j` is nondecreasing.
    Smooth,
    /// `1 - r < |p - r|`: `a_j` alternates around its limit. Only possible for N = 2.
    Oscillating,
}

/// Validated model parameters. `p` is always derived from `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    n_states: usize,
    r: f64,
    p: f64,
    rho: f64,
    lambda: f64,
    regime: Regime,
    volatile: bool,
}

impl SourceParams {
    pub fn new(n_states: usize, r: f64, rho: f64, lambda: f64) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::OutOfRange {
                field: "N",
                value: n_states as f64,
                expected: "N >= 2",
            });
        }
        let r_max = 1.0 / (n_states - 1) as f64;
        if !(r.is_finite() && r > 0.0 && r <= r_max) {
            return Err(Error::OutOfRange {
                field: "r",
                value: r,
                expected: "0 < r <= 1/(N-1)",
            });
        }
        if n_states == 2 && r >= 1.0 {
            // p - r = -1: the ladder alternates 0, 1, 0, ... and has no limit.
            return Err(Error::OutOfRange {
                field: "r",
                value: r,
                expected: "r < 1 when N = 2",
            });
        }
        if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
            return Err(Error::OutOfRange {
                field: "rho",
                value: rho,
                expected: "0 < rho <= 1",
            });
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::OutOfRange {
                field: "lambda",
                value: lambda,
                expected: "finite lambda >= 0",
            });
        }
        let moved = (n_states - 1) as f64 * r;
        let p = (1.0 - moved).max(0.0);
        let regime = if 1.0 - r >= (p - r).abs() {
            Regime::Smooth
        } else {
            Regime::Oscillating
        };
        Ok(Self {
            n_states,
            r,
            p,
            rho,
            lambda,
            regime,
            volatile: moved >= 4.0 * p,
        })
    }

    /// Same source and channel with a different scheduling cost.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.n_states, self.r, self.rho, lambda)
    }

    /// Same channel and cost with a different transition probability.
    pub fn with_r(&self, r: f64) -> Result<Self> {
        Self::new(self.n_states, r, self.rho, self.lambda)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// `(N-1) r >= 4 p`: the source changes state with high probability.
    pub fn is_volatile(&self) -> bool {
        self.volatile
    }

    pub(crate) fn nf(&self) -> f64 {
        self.n_states as f64
    }

    /// Probability that the estimate is still correct `k` slots after a delivery.
    pub fn belief(&self, k: u64) -> f64 {
        let n = self.nf();
        1.0 / n + (n - 1.0) / n * powu(self.p - self.r, k)
    }

    /// `a_j` straight from its definition, `sum_k k (1-p)(1-r)^(k-1) pi_(j-k)`,
    /// with the belief sequence generated by its recursion.
    pub fn age_by_sum(&self, j: u64) -> f64 {
        let j = j as usize;
        let mut pi = Vec::with_capacity(j + 1);
        let mut b = 1.0;
        for _ in 0..=j {
            pi.push(b);
            b = self.p * b + self.r * (1.0 - b);
        }
        let mut acc = NeumaierSum::default();
        let mut decay = 1.0;
        for k in 1..=j {
            acc.add(k as f64 * (1.0 - self.p) * decay * pi[j - k]);
            decay *= 1.0 - self.r;
        }
        acc.total()
    }

    /// Closed form of `a_j`.
    pub fn age_closed(&self, j: u64) -> f64 {
        if j == 0 {
            return 0.0;
        }
        let n = self.nf();
        let r = self.r;
        (n - 1.0) / (n * r) + powu(self.p - r, j + 1) / (n * r) - powu(1.0 - r, j + 1) / r
    }

    /// `a_l = lim a_j = (N-1)/(N r)`.
    pub fn age_limit(&self) -> f64 {
        let n = self.nf();
        (n - 1.0) / (n * self.r)
    }

    /// Upper bound on `|a_j - a_l|`.
    pub fn tail_envelope(&self, j: u64) -> f64 {
        let r = self.r;
        powu(1.0 - r, j + 1) / r + powu((self.p - r).abs(), j + 1) / (self.nf() * r)
    }
}

/// `b^k` for any 64-bit exponent.
pub(crate) fn powu(b: f64, k: u64) -> f64 {
    if k <= i32::MAX as u64 {
        b.powi(k as i32)
    } else {
        let m = b.abs().powf(k as f64);
        if b < 0.0 && k % 2 == 1 {
            -m
        } else {
            m
        }
    }
}

/// Compensated summation (Neumaier variant of Kahan).
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Precomputed ladder `a_0..a_{j_max}`; beyond `j_max` every value is within
/// `tail_tol` of the limit.
#[derive(Debug, Clone)]
pub struct AgeTable {
    params: SourceParams,
    values: Vec<f64>,
    limit: f64,
    j_max: u64,
    tail_tol: f64,
}

impl AgeTable {
    pub fn build(params: &SourceParams, tail_tol: f64) -> Result<Self> {
        if !(tail_tol.is_finite() && tail_tol > 0.0) {
            return Err(Error::OutOfRange {
                field: "tail_tol",
                value: tail_tol,
                expected: "tail_tol > 0",
            });
        }
        let j_max = envelope_index(params, tail_tol);
        let values = (0..=j_max).map(|j| params.age_closed(j)).collect();
        Ok(Self {
            params: *params,
            values,
            limit: params.age_limit(),
            j_max,
            tail_tol,
        })
    }

    pub fn params(&self) -> &SourceParams {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn j_max(&self) -> u64 {
        self.j_max
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// `a_j` for any `j`, falling back to the closed form past the table.
    pub fn age(&self, j: u64) -> f64 {
        match self.values.get(j as usize) {
            Some(&v) => v,
            None => self.params.age_closed(j),
        }
    }
}

/// Smallest `j` with `tail_envelope(j) < tol`. The envelope is strictly
/// decreasing, so a doubling search followed by bisection finds it.
fn envelope_index(params: &SourceParams, tol: f64) -> u64 {
    if params.tail_envelope(0) < tol {
        return 0;
    }
    let mut hi = 1u64;
    while params.tail_envelope(hi) >= tol {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if params.tail_envelope(mid) < tol {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn make_params_examples() {
        let a = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
        assert!(close(a.p(), 0.6, 1e-15));
        assert_eq!(a.regime(), Regime::Smooth);
        assert!(!a.is_volatile());

        let b = SourceParams::new(2, 0.9, 0.5, 1.0).unwrap();
        assert!(close(b.p(), 0.1, 1e-15));
        assert_eq!(b.regime(), Regime::Oscillating);
        assert!(b.is_volatile());

        match SourceParams::new(5, 0.3, 0.5, 1.0) {
            Err(Error::OutOfRange { field, .. }) => assert_eq!(field, "r"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_each_field() {
        let field = |e: Result<SourceParams>| match e {
            Err(Error::OutOfRange { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field(SourceParams::new(1, 0.1, 0.5, 1.0)), "N");
        assert_eq!(field(SourceParams::new(3, 0.0, 0.5, 1.0)), "r");
        assert_eq!(field(SourceParams::new(2, 1.0, 0.5, 1.0)), "r");
        assert_eq!(field(SourceParams::new(3, 0.2, 0.0, 1.0)), "rho");
        assert_eq!(field(SourceParams::new(3, 0.2, 1.5, 1.0)), "rho");
        assert_eq!(field(SourceParams::new(3, 0.2, 0.5, -1.0)), "lambda");
        assert_eq!(field(SourceParams::new(3, 0.2, 0.5, f64::NAN)), "lambda");
    }

    #[test]
    fn belief_examples() {
        let s = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
        assert_eq!(s.belief(0), 1.0);
        assert!(close(s.belief(1), s.p(), 1e-15));
        assert!(close(s.belief(2), 0.4, 1e-15));
    }

    #[test]
    fn ages_small_indices() {
        let s = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
        assert_eq!(s.age_by_sum(0), 0.0);
        assert_eq!(s.age_closed(0), 0.0);
        assert!(close(s.age_by_sum(1), 0.4, 1e-15));
        assert!(close(s.age_closed(1), 0.4, 1e-14));

        let o = SourceParams::new(2, 0.9, 0.5, 1.0).unwrap();
        let expected = 1.0 / 1.8 + 0.64 / 1.8 - 0.01 / 0.9;
        assert!(close(o.age_closed(1), expected, 1e-14));
        assert!(close(o.age_by_sum(1), expected, 1e-14));
    }

    #[test]
    fn age_limits() {
        for (n, r, lim) in [(5, 0.25, 3.2), (2, 0.5, 1.0), (5, 0.1, 8.0)] {
            let s = SourceParams::new(n, r, 0.5, 1.0).unwrap();
            assert!(close(s.age_limit(), lim, 1e-12));
        }
        let s = SourceParams::new(5, 0.25, 0.5, 1.0).unwrap();
        assert!(close(s.age_by_sum(10_000), 3.2, 1e-6));
    }

    #[test]
    fn table_respects_envelope() {
        let s = SourceParams::new(5, 0.25, 0.5, 8.0).unwrap();
        let t = AgeTable::build(&s, 1e-9).unwrap();
        assert_eq!(t.values()[0], 0.0);
        assert!((t.age(t.j_max()) - 3.2).abs() < 1e-9);
        assert!(s.tail_envelope(t.j_max()) < 1e-9);
        assert!(s.tail_envelope(t.j_max() - 1) >= 1e-9);
        assert!(t.values().windows(2).all(|w| w[1] >= w[0]));
        assert!(AgeTable::build(&s, 0.0).is_err());
    }

    #[test]
    fn powu_matches_powi() {
        assert_eq!(powu(-0.5, 3), -0.125);
        assert_eq!(powu(0.5, 0), 1.0);
        assert_eq!(powu(-1.0, 1u64 << 40), 1.0);
        assert_eq!(powu(-1.0, (1u64 << 40) + 1), -1.0);
    }
}
