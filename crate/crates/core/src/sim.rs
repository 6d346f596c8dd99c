//! Slot-level simulation of the source, the unreliable channel and the
//! monitor's estimate under any scheduler.
//!
//! Within slot `t` the scheduler sees the ladder index carried over from
//! slot `t-1`, decides, the channel is drawn, a success resets the index and
//! refreshes the estimate, the slot cost `a_j + lambda * action` is charged,
//! and finally the source moves to `X(t+1)`. The slot before the horizon
//! (`t = -1`) is treated as a delivery, so the run starts at `a_0`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{NeumaierSum, Regime, SourceParams};
use crate::steady::{StationaryDist, SteadyAverages, ThresholdPolicy};

const SOURCE_STREAM: u64 = 0;
const CHANNEL_STREAM: u64 = 1;
const AGE_CACHE: u64 = 1 << 16;

/// Decision rule driven by the ladder index.
pub trait Scheduler {
    /// Whether to transmit in slot `t`, given the ladder index `j` carried
    /// into that slot.
    fn decide(&mut self, j: u64, t: u64) -> bool;

    /// A transmission in slot `t` got through. `obs` is the transition the
    /// sensor stored at its previous delivery, if any.
    fn on_delivery(&mut self, _t: u64, _obs: Option<TransitionObservation>) {}

    /// `true` once the scheduler will never transmit again.
    fn is_absorbed(&self) -> bool {
        false
    }
}

/// A fixed threshold policy.
#[derive(Debug, Clone, Copy)]
pub struct FixedThreshold {
    pub policy: ThresholdPolicy,
    pub regime: Regime,
}

impl FixedThreshold {
    pub fn new(params: &SourceParams, policy: ThresholdPolicy) -> Self {
        Self {
            policy,
            regime: params.regime(),
        }
    }
}

impl Scheduler for FixedThreshold {
    fn decide(&mut self, j: u64, _t: u64) -> bool {
        self.policy.transmits(self.regime, j)
    }

    fn is_absorbed(&self) -> bool {
        self.policy.is_infinite()
    }
}

/// Adapts a closure `(j, t) -> transmit` into a scheduler.
pub struct FnScheduler<F>(pub F);

impl<F: FnMut(u64, u64) -> bool> Scheduler for FnScheduler<F> {
    fn decide(&mut self, j: u64, t: u64) -> bool {
        (self.0)(j, t)
    }
}

/// One-step transition outcome recorded by the sensor at the end of a
/// delivery slot `t`: `changed` is `X(t+1) != X(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionObservation {
    pub t: u64,
    pub changed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    pub t: u64,
    pub x: usize,
    pub x_hat: usize,
    pub j: u64,
    pub action: bool,
    pub success: bool,
    pub cost: f64,
}

/// Which per-slot records to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    All,
    /// Slots with `t % k == 0`.
    Every(u64),
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub record: RecordMode,
    /// Ladder indices at or past this are pooled in `occupancy_overflow`.
    pub occupancy_cap: usize,
    /// Horizons at which to report the running cost; each must be `<= T`.
    pub checkpoints: Vec<u64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record: RecordMode::All,
            occupancy_cap: 1024,
            checkpoints: Vec::new(),
        }
    }
}

impl SimOptions {
    pub fn summary_only(checkpoints: Vec<u64>) -> Self {
        Self {
            record: RecordMode::Off,
            occupancy_cap: 1024,
            checkpoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySummary {
    pub horizon: u64,
    pub total_cost: f64,
    pub total_age: f64,
    pub schedule_count: u64,
    pub success_count: u64,
    pub occupancy: Vec<u64>,
    pub occupancy_overflow: u64,
    /// `(T_k, sum of slot costs over t < T_k)`.
    pub checkpoint_costs: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub lambda: f64,
    pub records: Vec<SlotRecord>,
    pub observations: Vec<TransitionObservation>,
    pub summary: TrajectorySummary,
    pub record_mode: RecordMode,
}

/// Seed of run `run_index` derived from a base seed (SplitMix64 finaliser).
pub fn run_seed(base_seed: u64, run_index: u64) -> u64 {
    let mut z = base_seed
        .wrapping_add(run_index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Source {
    rng: ChaCha8Rng,
    n: usize,
    p: f64,
    r: f64,
}

impl Source {
    fn step(&mut self, x: usize) -> usize {
        let u: f64 = self.rng.gen();
        if u < self.p {
            return x;
        }
        let k = (((u - self.p) / self.r) as usize).min(self.n - 2);
        if k < x {
            k
        } else {
            k + 1
        }
    }
}

struct Ages {
    params: SourceParams,
    cache: Vec<f64>,
}

impl Ages {
    fn new(params: &SourceParams) -> Self {
        let len = AGE_CACHE.min(params_table_len(params));
        Self {
            params: *params,
            cache: (0..len).map(|j| params.age_closed(j)).collect(),
        }
    }

    fn get(&self, j: u64) -> f64 {
        match self.cache.get(j as usize) {
            Some(&a) => a,
            None => self.params.age_closed(j),
        }
    }

    /// `sum_{k=lo}^{hi} a_k` from the closed form of `a_k`, for `lo >= 1`.
    fn range_sum(&self, lo: u64, hi: u64) -> f64 {
        debug_assert!(lo >= 1);
        if hi < lo {
            return 0.0;
        }
        let p = &self.params;
        let n = p.nf();
        let r = p.r();
        let count = (hi - lo + 1) as f64;
        let geo = |z: f64| {
            // sum_{k=lo}^{hi} z^(k+1)
            crate::model::powu(z, lo + 1) * (1.0 - crate::model::powu(z, hi - lo + 1)) / (1.0 - z)
        };
        count * p.age_limit() + geo(p.p() - r) / (n * r) - geo(1.0 - r) / r
    }
}

fn params_table_len(params: &SourceParams) -> u64 {
    // Past the point where the envelope drops below 1e-15 the ladder is flat.
    let mut j = 64u64;
    while j < AGE_CACHE && params.tail_envelope(j) >= 1e-15 {
        j *= 2;
    }
    j
}

/// Runs `scheduler` for `horizon` slots.
pub fn simulate<S: Scheduler + ?Sized>(
    params: &SourceParams,
    scheduler: &mut S,
    horizon: u64,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::OutOfRange {
            field: "T",
            value: 0.0,
            expected: "T >= 1",
        });
    }
    let mut checkpoints = opts.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.last().is_some_and(|&c| c > horizon) {
        return Err(Error::Invalid("checkpoint beyond the horizon".into()));
    }

    let ages = Ages::new(params);
    let lambda = params.lambda();
    let rho = params.rho();
    let mut source = Source {
        rng: stream(seed, SOURCE_STREAM),
        n: params.n_states(),
        p: params.p(),
        r: params.r(),
    };
    let mut channel = stream(seed, CHANNEL_STREAM);

    let record_all = opts.record == RecordMode::All;
    let mut records = Vec::new();
    if record_all {
        records.reserve(horizon.min(1 << 24) as usize);
    }
    let mut observations = Vec::new();
    let mut occupancy = vec![0u64; opts.occupancy_cap];
    let mut overflow = 0u64;
    let mut total_cost = NeumaierSum::default();
    let mut total_age = NeumaierSum::default();
    let mut schedule_count = 0u64;
    let mut success_count = 0u64;
    let mut checkpoint_costs = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0usize;
    while next_cp < checkpoints.len() && checkpoints[next_cp] == 0 {
        checkpoint_costs.push((0, 0.0));
        next_cp += 1;
    }

    let mut x = source.rng.gen_range(0..params.n_states());
    let mut x_hat = x;
    x = source.step(x);
    let mut j_prev = 0u64;
    let mut pending: Option<TransitionObservation> = None;

    let mut t = 0u64;
    while t < horizon {
        if opts.record == RecordMode::Off && scheduler.is_absorbed() {
            // Nothing but the ladder moves from here on: close the sums analytically.
            let first = j_prev + 1;
            let remaining = horizon - t;
            let base_cost = total_cost.total();
            while next_cp < checkpoints.len() {
                let c = checkpoints[next_cp];
                let part = ages.range_sum(first, first + (c - t) - 1);
                checkpoint_costs.push((c, base_cost + part));
                next_cp += 1;
            }
            let tail = ages.range_sum(first, first + remaining - 1);
            total_cost.add(tail);
            total_age.add(tail);
            let last = first + remaining - 1;
            let cap = opts.occupancy_cap as u64;
            if first < cap {
                for j in first..=last.min(cap - 1) {
                    occupancy[j as usize] += 1;
                }
            }
            overflow += remaining - cap.saturating_sub(first).min(remaining);
            break;
        }

        let action = scheduler.decide(j_prev, t);
        let success = action && channel.gen::<f64>() < rho;
        let j = if success { 0 } else { j_prev + 1 };
        if action {
            schedule_count += 1;
        }
        if success {
            success_count += 1;
            x_hat = x;
            let obs = pending.take();
            if let Some(o) = obs {
                observations.push(o);
            }
            scheduler.on_delivery(t, obs);
        }
        let age = ages.get(j);
        let cost = age + if action { lambda } else { 0.0 };
        total_cost.add(cost);
        total_age.add(age);
        match occupancy.get_mut(j as usize) {
            Some(c) => *c += 1,
            None => overflow += 1,
        }
        let keep = match opts.record {
            RecordMode::All => true,
            RecordMode::Every(k) => k > 0 && t % k == 0,
            RecordMode::Off => false,
        };
        if keep {
            records.push(SlotRecord {
                t,
                x,
                x_hat,
                j,
                action,
                success,
                cost,
            });
        }

        let next = source.step(x);
        if success {
            pending = Some(TransitionObservation {
                t,
                changed: next != x,
            });
        }
        x = next;
        j_prev = j;
        t += 1;
        while next_cp < checkpoints.len() && checkpoints[next_cp] == t {
            checkpoint_costs.push((t, total_cost.total()));
            next_cp += 1;
        }
    }

    Ok(Trajectory {
        seed,
        lambda,
        records,
        observations,
        summary: TrajectorySummary {
            horizon,
            total_cost: total_cost.total(),
            total_age: total_age.total(),
            schedule_count,
            success_count,
            occupancy,
            occupancy_overflow: overflow,
            checkpoint_costs,
        },
        record_mode: opts.record,
    })
}

/// Time averages of `a_{j(t)}` and `d(t)`.
pub fn empirical_cost(traj: &Trajectory) -> SteadyAverages {
    let s = &traj.summary;
    let t = s.horizon as f64;
    let avg_age = s.total_age / t;
    let avg_active = s.schedule_count as f64 / t;
    SteadyAverages {
        avg_age,
        avg_active,
        avg_cost: s.total_cost / t,
    }
}

/// Visit frequencies of the ladder index.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub freq: Vec<f64>,
    /// Frequency of all indices at or past `freq.len()`.
    pub overflow: f64,
}

impl Occupancy {
    /// Total-variation distance to a stationary distribution, with the
    /// indices past the cap pooled on both sides.
    pub fn tv_distance(&self, dist: &StationaryDist) -> f64 {
        let mut s = NeumaierSum::default();
        let mut inside = NeumaierSum::default();
        for (i, &f) in self.freq.iter().enumerate() {
            let u = dist.prob(i as u64);
            inside.add(u);
            s.add((f - u).abs());
        }
        let rest = (1.0 - inside.total()).max(0.0);
        s.add((self.overflow - rest).abs());
        0.5 * s.total()
    }
}

pub fn empirical_occupancy(traj: &Trajectory) -> Occupancy {
    let s = &traj.summary;
    let t = s.horizon as f64;
    Occupancy {
        freq: s.occupancy.iter().map(|&c| c as f64 / t).collect(),
        overflow: s.occupancy_overflow as f64 / t,
    }
}

/// Mean realised age of incorrect information `t - V(t)` per ladder index,
/// where `V(t)` is the last slot whose true state equals the estimate.
/// Entry `j` is `None` when index `j` was never visited.
pub fn conditional_realized_age(traj: &Trajectory, j_max: u64) -> Result<Vec<Option<f64>>> {
    if traj.record_mode != RecordMode::All {
        return Err(Error::Invalid("realised age needs every slot recorded".into()));
    }
    let size = j_max as usize + 1;
    let mut sums = vec![0.0f64; size];
    let mut counts = vec![0u64; size];
    // The run starts right after a delivery at t = -1, so V(-1) = -1.
    let mut last_match: i64 = -1;
    for rec in &traj.records {
        let t = rec.t as i64;
        if rec.x == rec.x_hat {
            last_match = t;
        }
        if let Some(slot) = sums.get_mut(rec.j as usize) {
            *slot += (t - last_match) as f64;
            counts[rec.j as usize] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

impl Trajectory {
    /// CSV with header `t,x,x_hat,j,action,success,cost`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "x_hat", "j", "action", "success", "cost"])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.x.to_string(),
                r.x_hat.to_string(),
                r.j.to_string(),
                u8::from(r.action).to_string(),
                u8::from(r.success).to_string(),
                r.cost.to_string(),
            ])?;
        }
        w.flush()
    }
}
