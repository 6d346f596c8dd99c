//! Monte Carlo regret curves `R(T) = E[sum_{t<T} C(t)] - T C*` and the
//! log-versus-linear growth diagnostic.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::learning::{run_learner, Algo, LearnerRun};
use crate::model::{NeumaierSum, SourceParams};
use crate::sim::{run_seed, simulate, FixedThreshold, SimOptions};
use crate::solver::optimal_threshold;
use crate::steady::{avg_cost, ThresholdPolicy};

/// Default checkpoint grid.
pub const DEFAULT_CHECKPOINTS: [u64; 7] = [100, 300, 1_000, 3_000, 10_000, 30_000, 100_000];
pub const DEFAULT_RUNS: usize = 200;
pub const MIN_RUNS: usize = 30;

/// `C*`: average cost of the optimal threshold.
pub fn optimal_cost(params: &SourceParams) -> Result<f64> {
    avg_cost(params, optimal_threshold(params)?)
}

/// What a regret curve measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contender {
    Learner(Algo),
    Fixed(ThresholdPolicy),
}

impl std::fmt::Display for Contender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Contender::Learner(a) => write!(f, "{a}"),
            Contender::Fixed(p) => write!(f, "fixed_{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub contender: Contender,
    pub params: SourceParams,
    pub optimal_cost: f64,
    pub checkpoints: Vec<u64>,
    pub mean_regret: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_runs: usize,
}

impl RegretCurve {
    /// CSV with header `algo,T,mean_regret,stderr,n_runs`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["algo", "T", "mean_regret", "stderr", "n_runs"])?;
        self.write_rows(&mut w)?;
        w.flush()
    }

    /// Rows without a header, for stacking several curves in one file.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> std::io::Result<()> {
        let tag = self.contender.to_string();
        for k in 0..self.checkpoints.len() {
            w.write_record([
                tag.clone(),
                self.checkpoints[k].to_string(),
                self.mean_regret[k].to_string(),
                self.stderr[k].to_string(),
                self.n_runs.to_string(),
            ])?;
        }
        Ok(())
    }
}

fn validate(checkpoints: &[u64], n_runs: usize) -> Result<()> {
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("checkpoints must be nonempty and strictly increasing".into()));
    }
    if n_runs < MIN_RUNS {
        return Err(Error::OutOfRange {
            field: "n_runs",
            value: n_runs as f64,
            expected: "n_runs >= 30",
        });
    }
    Ok(())
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut s = NeumaierSum::default();
    for &x in xs {
        s.add(x);
    }
    let mean = s.total() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let mut v = NeumaierSum::default();
    for &x in xs {
        v.add((x - mean) * (x - mean));
    }
    (mean, (v.total() / (n - 1.0)).sqrt() / n.sqrt())
}

/// Regret of a learner. The learner knows its horizon, so every checkpoint
/// gets its own runs; run `k` uses seed `run_seed(base_seed, k)` at every
/// checkpoint. Results do not depend on the thread count.
pub fn regret_curve(
    params: &SourceParams,
    algo: Algo,
    checkpoints: &[u64],
    n_runs: usize,
    base_seed: u64,
) -> Result<RegretCurve> {
    validate(checkpoints, n_runs)?;
    let c_star = optimal_cost(params)?;
    let jobs: Vec<(usize, u64)> = checkpoints
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0)
        .flat_map(|(k, _)| (0..n_runs as u64).map(move |i| (k, i)))
        .collect();
    let run = LearnerRun {
        full_trace: false,
        checkpoints: Vec::new(),
    };
    let costs = jobs
        .par_iter()
        .map(|&(k, i)| {
            let horizon = checkpoints[k];
            if horizon < 3 {
                return Err(Error::OutOfRange {
                    field: "checkpoint",
                    value: horizon as f64,
                    expected: "0 or >= 3 for learners",
                });
            }
            let trace = run_learner(algo, params, horizon, run_seed(base_seed, i), &run)?;
            Ok(trace.trajectory.summary.total_cost - horizon as f64 * c_star)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut mean_regret = Vec::with_capacity(checkpoints.len());
    let mut stderr = Vec::with_capacity(checkpoints.len());
    let mut chunks = costs.chunks(n_runs);
    for &t in checkpoints {
        if t == 0 {
            mean_regret.push(0.0);
            stderr.push(0.0);
            continue;
        }
        let (m, s) = mean_and_stderr(chunks.next().expect("one chunk per positive checkpoint"));
        mean_regret.push(m);
        stderr.push(s);
    }
    Ok(RegretCurve {
        contender: Contender::Learner(algo),
        params: *params,
        optimal_cost: c_star,
        checkpoints: checkpoints.to_vec(),
        mean_regret,
        stderr,
        n_runs,
    })
}

/// Regret of a fixed threshold. All checkpoints share each run's trajectory.
pub fn fixed_regret_curve(
    params: &SourceParams,
    policy: ThresholdPolicy,
    checkpoints: &[u64],
    n_runs: usize,
    base_seed: u64,
) -> Result<RegretCurve> {
    validate(checkpoints, n_runs)?;
    let c_star = optimal_cost(params)?;
    let horizon = *checkpoints.last().expect("validated nonempty");
    let per_run = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            if horizon == 0 {
                return Ok(vec![0.0; checkpoints.len()]);
            }
            let mut s = FixedThreshold::new(params, policy);
            let opts = SimOptions::summary_only(checkpoints.to_vec());
            let tr = simulate(params, &mut s, horizon, run_seed(base_seed, i), &opts)?;
            Ok(tr
                .summary
                .checkpoint_costs
                .iter()
                .map(|&(t, c)| c - t as f64 * c_star)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mean_regret = Vec::with_capacity(checkpoints.len());
    let mut stderr = Vec::with_capacity(checkpoints.len());
    for k in 0..checkpoints.len() {
        let column: Vec<f64> = per_run.iter().map(|r| r[k]).collect();
        let (m, s) = mean_and_stderr(&column);
        mean_regret.push(m);
        stderr.push(s);
    }
    Ok(RegretCurve {
        contender: Contender::Fixed(policy),
        params: *params,
        optimal_cost: c_star,
        checkpoints: checkpoints.to_vec(),
        mean_regret,
        stderr,
        n_runs,
    })
}

/// Exact `E[sum_{t<T} C(t)]` at each checkpoint for a fixed threshold
/// started at `a_0`, by propagating the ladder-index distribution.
/// Indices past an internal cap are pooled; the pooled mass is below 1e-15
/// in every configuration where the ladder has converged by the cap.
pub fn expected_fixed_cost(params: &SourceParams, policy: ThresholdPolicy, checkpoints: &[u64]) -> Result<Vec<f64>> {
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("checkpoints must be strictly increasing".into()));
    }
    let horizon = checkpoints.last().copied().unwrap_or(0);
    let rho = params.rho();
    let lambda = params.lambda();
    let regime = params.regime();
    let mut cap = 64u64;
    while params.tail_envelope(cap) > 1e-15 && cap < 1 << 16 {
        cap *= 2;
    }
    if let ThresholdPolicy::Finite(n) = policy {
        let settle = (1e-18f64.ln() / (1.0 - rho).max(1e-300).ln()).ceil().max(0.0) as u64;
        cap = cap.max(n + settle + 2);
    }
    let size = cap as usize + 1;
    let ages: Vec<f64> = (0..=cap).map(|j| params.age_closed(j)).collect();
    let sends: Vec<bool> = (0..=cap).map(|j| policy.transmits(regime, j)).collect();

    let mut dist = vec![0.0; size];
    let mut next = vec![0.0; size];
    dist[0] = 1.0;
    let mut total = NeumaierSum::default();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut k = 0;
    while k < checkpoints.len() && checkpoints[k] == 0 {
        out.push(0.0);
        k += 1;
    }
    for t in 0..horizon {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut active = 0.0;
        for i in 0..size {
            let m = dist[i];
            if m == 0.0 {
                continue;
            }
            let up = (i + 1).min(size - 1);
            if sends[i] {
                active += m;
                next[0] += rho * m;
                next[up] += (1.0 - rho) * m;
            } else {
                next[up] += m;
            }
        }
        let mut slot = lambda * active;
        for i in 0..size {
            slot += next[i] * ages[i];
        }
        total.add(slot);
        std::mem::swap(&mut dist, &mut next);
        while k < checkpoints.len() && checkpoints[k] == t + 1 {
            out.push(total.total());
            k += 1;
        }
    }
    Ok(out)
}

/// Least-squares fits of a regret curve against `ln T` and against `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub log_slope: f64,
    pub log_intercept: f64,
    pub log_r2: f64,
    pub lin_slope: f64,
    pub lin_intercept: f64,
    pub lin_r2: f64,
    /// 95% confidence interval of the linear slope.
    pub lin_slope_ci: (f64, f64),
    pub reference_slope: Option<f64>,
    pub log_like: bool,
}

impl FitReport {
    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "log_slope={}", self.log_slope);
        let _ = writeln!(s, "log_intercept={}", self.log_intercept);
        let _ = writeln!(s, "log_r2={}", self.log_r2);
        let _ = writeln!(s, "lin_slope={}", self.lin_slope);
        let _ = writeln!(s, "lin_intercept={}", self.lin_intercept);
        let _ = writeln!(s, "lin_r2={}", self.lin_r2);
        let _ = writeln!(s, "lin_slope_ci_low={}", self.lin_slope_ci.0);
        let _ = writeln!(s, "lin_slope_ci_high={}", self.lin_slope_ci.1);
        match self.reference_slope {
            Some(v) => {
                let _ = writeln!(s, "reference_slope={v}");
            }
            None => s.push_str("reference_slope=none\n"),
        }
        let _ = writeln!(s, "log_like={}", self.log_like);
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct Ols {
    slope: f64,
    intercept: f64,
    r2: f64,
    slope_se: f64,
}

fn ols(xs: &[f64], ys: &[f64]) -> Ols {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let slope_se = (ss_res / (n - 2.0) / sxx).sqrt();
    Ols {
        slope,
        intercept,
        r2,
        slope_se,
    }
}

/// Fits `R = a + b ln T` and `R = a + b T` over the positive checkpoints.
///
/// The curve is log-like when the `ln T` fit explains more variance than the
/// linear fit and, if a reference slope is given (a policy with linear
/// regret on the same configuration), the lower end of the 95% interval of
/// the linear slope is at most 10% of it.
pub fn log_linearity_check(curve: &RegretCurve, reference_slope: Option<f64>) -> Result<FitReport> {
    let pts: Vec<(f64, f64)> = curve
        .checkpoints
        .iter()
        .zip(&curve.mean_regret)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &r)| (t as f64, r))
        .collect();
    let span = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) => b.0 / a.0,
        _ => 0.0,
    };
    if pts.len() < 4 || span < 100.0 {
        return Err(Error::InsufficientCheckpoints {
            got: pts.len(),
            need: 4,
        });
    }
    let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ln_ts: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let rs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let log_fit = ols(&ln_ts, &rs);
    let lin_fit = ols(&ts, &rs);
    let dof = pts.len() as f64 - 2.0;
    let tq = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Invalid(e.to_string()))?
        .inverse_cdf(0.975);
    let ci = (
        lin_fit.slope - tq * lin_fit.slope_se,
        lin_fit.slope + tq * lin_fit.slope_se,
    );
    let log_like = log_fit.r2 > lin_fit.r2 && reference_slope.map_or(true, |g| ci.0 <= 0.1 * g);
    Ok(FitReport {
        log_slope: log_fit.slope,
        log_intercept: log_fit.intercept,
        log_r2: log_fit.r2,
        lin_slope: lin_fit.slope,
        lin_intercept: lin_fit.intercept,
        lin_r2: lin_fit.r2,
        lin_slope_ci: ci,
        reference_slope,
        log_like,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(f: impl Fn(f64) -> f64) -> RegretCurve {
        let checkpoints = DEFAULT_CHECKPOINTS.to_vec();
        RegretCurve {
            contender: Contender::Learner(Algo::Proposed),
            params: SourceParams::new(5, 0.1, 0.5, 8.0).unwrap(),
            optimal_cost: 0.0,
            mean_regret: checkpoints.iter().map(|&t| f(t as f64)).collect(),
            stderr: vec![0.0; checkpoints.len()],
            checkpoints,
            n_runs: 1,
        }
    }

    #[test]
    fn synthetic_log_curve() {
        let rep = log_linearity_check(&synthetic(|t| 5.0 * t.ln()), None).unwrap();
        assert!(rep.log_like);
        assert!((rep.log_slope - 5.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_linear_curve() {
        let rep = log_linearity_check(&synthetic(|t| 0.01 * t), None).unwrap();
        assert!(!rep.log_like);
        assert!((rep.lin_slope - 0.01).abs() < 1e-12);
    }

    #[test]
    fn too_few_checkpoints() {
        let mut c = synthetic(|t| t.ln());
        c.checkpoints.truncate(3);
        c.mean_regret.truncate(3);
        assert!(matches!(
            log_linearity_check(&c, None),
            Err(Error::InsufficientCheckpoints { .. })
        ));
    }

    #[test]
    fn optimal_cost_examples() {
        let a = SourceParams::new(5, 0.25, 0.5, 8.0).unwrap();
        assert!((optimal_cost(&a).unwrap() - 3.2).abs() < 1e-12);
        let b = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
        let bf = crate::solver::brute_force_threshold(&b, 200).unwrap();
        assert!((optimal_cost(&b).unwrap() - avg_cost(&b, bf).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_zero_has_zero_regret() {
        let b = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
        let c = regret_curve(&b, Algo::Proposed, &[0, 50], 30, 1).unwrap();
        assert_eq!(c.mean_regret[0], 0.0);
        let f = fixed_regret_curve(&b, ThresholdPolicy::Finite(6), &[0, 50], 30, 1).unwrap();
        assert_eq!(f.mean_regret[0], 0.0);
    }
}
