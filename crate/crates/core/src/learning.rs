//! Scheduling with an unknown transition probability.
//!
//! The sensor piggybacks one transition outcome per delivery, so the
//! monitor's estimate of `r` is a running mean of Bernoulli((N-1) r) samples
//! scaled by `1/(N-1)`. The phased learner keeps transmitting at threshold 0
//! until a confidence interval around the estimate clears the switch point
//! `r_l`; the greedy baseline plugs the raw estimate into the known-parameter
//! solver at every delivery.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Regime, SourceParams};
use crate::sim::{simulate, RecordMode, Scheduler, SimOptions, Trajectory, TransitionObservation};
use crate::solver::{optimal_threshold, r_limit};
use crate::steady::ThresholdPolicy;

/// Floor applied to the estimate before it is handed to the solver.
pub const R_HAT_FLOOR: f64 = 1e-9;

/// `sqrt(ln T / i)`.
pub fn confidence_radius(i: u64, horizon: u64) -> Result<f64> {
    if i == 0 {
        return Err(Error::DivisionByZero);
    }
    if horizon < 3 {
        return Err(Error::OutOfRange {
            field: "T",
            value: horizon as f64,
            expected: "T >= 3",
        });
    }
    Ok(((horizon as f64).ln() / i as f64).sqrt())
}

/// Running estimate of `r` from piggybacked transition outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    n_states: usize,
    count: u64,
    transitions: u64,
    r_hat: f64,
}

impl EstimatorState {
    pub fn new(n_states: usize) -> Self {
        Self {
            n_states,
            count: 0,
            transitions: 0,
            r_hat: 0.0,
        }
    }

    /// `r_i = (i-1)/i * r_{i-1} + p / ((N-1) i)`.
    pub fn incorporate(&mut self, changed: bool) {
        self.count += 1;
        if changed {
            self.transitions += 1;
        }
        let i = self.count as f64;
        let p = if changed { 1.0 } else { 0.0 };
        self.r_hat = (i - 1.0) / i * self.r_hat + p / ((self.n_states - 1) as f64 * i);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn r_hat(&self) -> f64 {
        self.r_hat
    }

    /// Estimate clamped into `[R_HAT_FLOOR, 1/(N-1)]`.
    pub fn clamped(&self) -> f64 {
        self.r_hat
            .clamp(R_HAT_FLOOR, 1.0 / (self.n_states - 1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LearnerPhase {
    Explore,
    Refine,
    CommitFinite,
    CommitInfinite,
}

impl fmt::Display for LearnerPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerPhase::Explore => "explore",
            LearnerPhase::Refine => "refine",
            LearnerPhase::CommitFinite => "commit_finite",
            LearnerPhase::CommitInfinite => "commit_infinite",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    /// The phased explore / refine / commit learner.
    Proposed,
    /// Optimal threshold of the current estimate at every delivery.
    Greedy,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Proposed => "proposed",
            Algo::Greedy => "greedy",
        })
    }
}

/// Learner state at a delivery, after the estimate was updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryLog {
    pub t: u64,
    pub i: u64,
    pub r_hat: f64,
    pub phase: LearnerPhase,
    pub threshold: ThresholdPolicy,
}

/// Learner state in effect when a slot's decision was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotState {
    pub phase: LearnerPhase,
    pub i: u64,
    pub r_hat: f64,
    pub threshold: ThresholdPolicy,
}

/// A learner driven by the simulator through [`Scheduler`].
#[derive(Debug, Clone)]
pub struct Learner {
    algo: Algo,
    n_states: usize,
    rho: f64,
    lambda: f64,
    horizon: u64,
    r_l: f64,
    estimator: EstimatorState,
    phase: LearnerPhase,
    threshold: ThresholdPolicy,
    t0: Option<u64>,
    t1: Option<u64>,
    deliveries: Vec<DeliveryLog>,
    slots: Option<Vec<SlotState>>,
    failure: Option<Error>,
}

impl Learner {
    /// `n_states`, `rho` and `lambda` are known to the scheduler; `r` is not.
    pub fn new(algo: Algo, n_states: usize, rho: f64, lambda: f64, horizon: u64) -> Result<Self> {
        if n_states <= 2 {
            return Err(Error::OutOfRange {
                field: "N",
                value: n_states as f64,
                expected: "N > 2",
            });
        }
        if horizon < 3 {
            return Err(Error::OutOfRange {
                field: "T",
                value: horizon as f64,
                expected: "T >= 3",
            });
        }
        let r_l = r_limit(n_states, rho, lambda)?;
        Ok(Self {
            algo,
            n_states,
            rho,
            lambda,
            horizon,
            r_l,
            estimator: EstimatorState::new(n_states),
            phase: LearnerPhase::Explore,
            threshold: ThresholdPolicy::Finite(0),
            t0: None,
            t1: None,
            deliveries: Vec::new(),
            slots: None,
            failure: None,
        })
    }

    /// Keep the per-slot learner state (memory grows with the horizon).
    pub fn with_slot_log(mut self) -> Self {
        self.slots = Some(Vec::new());
        self
    }

    pub fn r_l(&self) -> f64 {
        self.r_l
    }

    pub fn phase(&self) -> LearnerPhase {
        self.phase
    }

    pub fn threshold(&self) -> ThresholdPolicy {
        self.threshold
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    fn solve(&mut self, r: f64) -> ThresholdPolicy {
        let solved = SourceParams::new(self.n_states, r, self.rho, self.lambda)
            .and_then(|p| optimal_threshold(&p));
        match solved {
            Ok(th) => th,
            Err(e) => {
                self.failure.get_or_insert(e);
                ThresholdPolicy::Finite(0)
            }
        }
    }

    fn step_proposed(&mut self, t: u64) {
        let r = self.estimator.r_hat();
        let rad = confidence_radius(self.estimator.count(), self.horizon)
            .expect("called after an observation");
        match self.phase {
            LearnerPhase::Explore => {
                if r >= self.r_l && r - rad >= self.r_l {
                    self.phase = LearnerPhase::CommitInfinite;
                    self.threshold = ThresholdPolicy::Infinite;
                    self.t0 = Some(t);
                } else if r < self.r_l && r + rad < self.r_l {
                    self.phase = LearnerPhase::Refine;
                    self.t0 = Some(t);
                    self.check_refine(r, rad, t);
                }
            }
            LearnerPhase::Refine => self.check_refine(r, rad, t),
            LearnerPhase::CommitFinite => {
                self.threshold = if r < self.r_l {
                    self.solve(self.estimator.clamped())
                } else {
                    ThresholdPolicy::Finite(0)
                };
            }
            LearnerPhase::CommitInfinite => {}
        }
    }

    /// Threshold 0 stays in force until the next delivery, where the first
    /// committed threshold is computed from the refreshed estimate.
    fn check_refine(&mut self, r: f64, rad: f64, t: u64) {
        if r + 2.0 * rad < self.r_l {
            self.phase = LearnerPhase::CommitFinite;
            self.t1 = Some(t);
        }
    }

    fn step_greedy(&mut self) {
        self.threshold = self.solve(self.estimator.clamped());
        self.phase = if self.threshold.is_infinite() {
            LearnerPhase::CommitInfinite
        } else {
            LearnerPhase::CommitFinite
        };
    }
}

impl Scheduler for Learner {
    fn decide(&mut self, j: u64, _t: u64) -> bool {
        if let Some(slots) = self.slots.as_mut() {
            slots.push(SlotState {
                phase: self.phase,
                i: self.estimator.count(),
                r_hat: self.estimator.r_hat(),
                threshold: self.threshold,
            });
        }
        self.threshold.transmits(Regime::Smooth, j)
    }

    fn on_delivery(&mut self, t: u64, obs: Option<TransitionObservation>) {
        let Some(o) = obs else {
            return;
        };
        self.estimator.incorporate(o.changed);
        match self.algo {
            Algo::Proposed => self.step_proposed(t),
            Algo::Greedy => self.step_greedy(),
        }
        self.deliveries.push(DeliveryLog {
            t,
            i: self.estimator.count(),
            r_hat: self.estimator.r_hat(),
            phase: self.phase,
            threshold: self.threshold,
        });
    }

    fn is_absorbed(&self) -> bool {
        self.threshold.is_infinite()
    }
}

/// Everything a learner run produced.
#[derive(Debug, Clone)]
pub struct LearnerTrace {
    pub algo: Algo,
    pub horizon: u64,
    pub r_l: f64,
    pub trajectory: Trajectory,
    pub deliveries: Vec<DeliveryLog>,
    /// Per-slot learner state, when requested.
    pub slots: Option<Vec<SlotState>>,
    /// Delivery slot at which the explore phase ended.
    pub t0: Option<u64>,
    /// Delivery slot at which the refine phase ended.
    pub t1: Option<u64>,
    pub final_phase: LearnerPhase,
    pub final_policy: ThresholdPolicy,
    pub final_r_hat: f64,
}

impl LearnerTrace {
    /// CSV with header `t,cost,phase,i,r_hat,threshold`; needs a full
    /// per-slot record.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let slots = self.slots.as_ref().filter(|_| self.trajectory.record_mode == RecordMode::All);
        let Some(slots) = slots else {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "trace was run without per-slot records",
            ));
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "cost", "phase", "i", "r_hat", "threshold"])?;
        for (rec, s) in self.trajectory.records.iter().zip(slots) {
            w.write_record([
                rec.t.to_string(),
                rec.cost.to_string(),
                s.phase.to_string(),
                s.i.to_string(),
                s.r_hat.to_string(),
                s.threshold.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Options for a learner run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerRun {
    /// Record every slot and the learner state in it.
    pub full_trace: bool,
    pub checkpoints: Vec<u64>,
}

/// Simulates a learner against a source whose transition probability is
/// `params.r()`; the learner itself only sees N, rho and lambda.
pub fn run_learner(
    algo: Algo,
    params: &SourceParams,
    horizon: u64,
    seed: u64,
    run: &LearnerRun,
) -> Result<LearnerTrace> {
    let mut learner = Learner::new(algo, params.n_states(), params.rho(), params.lambda(), horizon)?;
    let opts = if run.full_trace {
        learner = learner.with_slot_log();
        SimOptions {
            record: RecordMode::All,
            checkpoints: run.checkpoints.clone(),
            ..SimOptions::default()
        }
    } else {
        SimOptions::summary_only(run.checkpoints.clone())
    };
    let trajectory = simulate(params, &mut learner, horizon, seed, &opts)?;
    if let Some(e) = learner.failure {
        return Err(e);
    }
    Ok(LearnerTrace {
        algo,
        horizon,
        r_l: learner.r_l,
        trajectory,
        deliveries: learner.deliveries,
        slots: learner.slots,
        t0: learner.t0,
        t1: learner.t1,
        final_phase: learner.phase,
        final_policy: learner.threshold,
        final_r_hat: learner.estimator.r_hat(),
    })
}

fn true_params(true_r: f64, n_states: usize, rho: f64, lambda: f64) -> Result<SourceParams> {
    SourceParams::new(n_states, true_r, rho, lambda)
}

/// The phased learner with a full per-slot trace.
pub fn run_proposed(true_r: f64, n_states: usize, rho: f64, lambda: f64, horizon: u64, seed: u64) -> Result<LearnerTrace> {
    let params = true_params(true_r, n_states, rho, lambda)?;
    let run = LearnerRun {
        full_trace: true,
        checkpoints: Vec::new(),
    };
    run_learner(Algo::Proposed, &params, horizon, seed, &run)
}

/// The greedy baseline with a full per-slot trace.
pub fn run_greedy(true_r: f64, n_states: usize, rho: f64, lambda: f64, horizon: u64, seed: u64) -> Result<LearnerTrace> {
    let params = true_params(true_r, n_states, rho, lambda)?;
    let run = LearnerRun {
        full_trace: true,
        checkpoints: Vec::new(),
    };
    run_learner(Algo::Greedy, &params, horizon, seed, &run)
}
