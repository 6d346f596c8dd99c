//! Cross-checks of the closed forms against independent computations:
//! a truncated ladder chain, brute-force linear algebra and Monte Carlo.

use nalgebra::DMatrix;

use maoii::learning::{confidence_radius, run_greedy, run_proposed, LearnerPhase};
use maoii::regret::{expected_fixed_cost, fixed_regret_curve, optimal_cost};
use maoii::sim::{
    conditional_realized_age, empirical_cost, empirical_occupancy, run_seed, simulate, FixedThreshold, SimOptions,
};
use maoii::solver::r_limit;
use maoii::steady::{avg_active, avg_age, build_q, lambda_2n, lambda_n, spectral_radius, stationary};
use maoii::{Regime, SourceParams, ThresholdPolicy};

const CHAIN_LEN: usize = 4000;

/// Stationary law of the ladder index by power iteration on the lazy
/// truncated chain `j -> 0` w.p. `rho d(j)`, else `j -> j+1`.
fn chain_stationary(p: &SourceParams, policy: ThresholdPolicy) -> Vec<f64> {
    let go: Vec<f64> = (0..CHAIN_LEN)
        .map(|j| if policy.transmits(p.regime(), j as u64) { p.rho() } else { 0.0 })
        .collect();
    let mut pi = vec![1.0 / CHAIN_LEN as f64; CHAIN_LEN];
    for _ in 0..200_000 {
        let mut next = vec![0.0; CHAIN_LEN];
        for j in 0..CHAIN_LEN {
            let m = pi[j];
            next[j] += 0.5 * m;
            next[0] += 0.5 * m * go[j];
            next[(j + 1).min(CHAIN_LEN - 1)] += 0.5 * m * (1.0 - go[j]);
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn chain_averages(p: &SourceParams, policy: ThresholdPolicy) -> (f64, f64) {
    let pi = chain_stationary(p, policy);
    let age = pi.iter().enumerate().map(|(j, m)| m * p.age_by_sum(j as u64)).sum();
    let active = pi
        .iter()
        .enumerate()
        .filter(|(j, _)| policy.transmits(p.regime(), *j as u64))
        .map(|(_, m)| m)
        .sum();
    (age, active)
}

fn cases() -> Vec<(SourceParams, ThresholdPolicy)> {
    let f = ThresholdPolicy::Finite;
    vec![
        (SourceParams::new(5, 0.1, 0.5, 8.0).unwrap(), f(0)),
        (SourceParams::new(5, 0.1, 0.5, 8.0).unwrap(), f(4)),
        (SourceParams::new(4, 0.02, 0.3, 1.0).unwrap(), f(17)),
        (SourceParams::new(10, 0.1, 1.0, 1.0).unwrap(), f(3)),
        (SourceParams::new(3, 0.45, 0.7, 1.0).unwrap(), f(2)),
        (SourceParams::new(2, 0.3, 0.5, 1.0).unwrap(), f(6)),
        (SourceParams::new(2, 0.9, 0.5, 1.0).unwrap(), f(0)),
        (SourceParams::new(2, 0.9, 0.4, 1.0).unwrap(), f(4)),
        (SourceParams::new(2, 0.95, 1.0, 1.0).unwrap(), f(2)),
        (SourceParams::new(2, 0.7, 0.2, 1.0).unwrap(), f(8)),
    ]
}

#[test]
fn stationary_matches_truncated_chain() {
    for (p, policy) in cases() {
        let dist = stationary(&p, policy).unwrap();
        let pi = chain_stationary(&p, policy);
        for (j, &m) in pi.iter().enumerate().take(300) {
            assert!((dist.prob(j as u64) - m).abs() < 1e-10, "{p:?} {policy} j={j}");
        }
    }
}

#[test]
fn averages_match_truncated_chain() {
    for (p, policy) in cases() {
        let (age, active) = chain_averages(&p, policy);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(avg_age(&p, policy).unwrap(), age) < 1e-9, "{p:?} {policy}");
        assert!(rel(avg_active(&p, policy).unwrap(), active) < 1e-9, "{p:?} {policy}");
    }
}

#[test]
fn lambda_balances_chain_costs() {
    let smooth = [
        SourceParams::new(5, 0.1, 0.5, 0.0).unwrap(),
        SourceParams::new(3, 0.2, 0.9, 0.0).unwrap(),
    ];
    for p in smooth {
        for n in [0u64, 1, 5, 12] {
            let l = lambda_n(&p, n).unwrap();
            let (a0, d0) = chain_averages(&p, ThresholdPolicy::Finite(n));
            let (a1, d1) = chain_averages(&p, ThresholdPolicy::Finite(n + 1));
            assert!(((a0 + l * d0) - (a1 + l * d1)).abs() < 1e-9 * (a0 + l * d0), "{p:?} n={n}");
        }
    }
    let osc = SourceParams::new(2, 0.9, 0.4, 0.0).unwrap();
    for m in [0u64, 1, 3] {
        let l = lambda_2n(&osc, m).unwrap();
        let (a0, d0) = chain_averages(&osc, ThresholdPolicy::Finite(2 * m));
        let (a1, d1) = chain_averages(&osc, ThresholdPolicy::Finite(2 * m + 2));
        assert!(((a0 + l * d0) - (a1 + l * d1)).abs() < 1e-9 * (a0 + l * d0), "m={m}");
    }
}

#[test]
fn head_matrix_characteristic_polynomial() {
    for (n, rho) in [(1usize, 0.5), (3, 0.2), (7, 0.9), (12, 1.0)] {
        let q = build_q(n, rho).unwrap();
        for z in [-1.3, -0.4, 0.0, 0.55, 2.0] {
            let det = (DMatrix::identity(n, n) * z - &q).determinant();
            let poly = z.powi(n as i32) + rho * (0..n).map(|k| z.powi(k as i32)).sum::<f64>();
            assert!((det - poly).abs() < 1e-10 * poly.abs().max(1.0), "n={n} z={z}");
        }
    }
}

#[test]
fn spectral_radius_matches_power_growth() {
    for (n, rho) in [(2usize, 0.3), (5, 0.6), (9, 0.9)] {
        let q = build_q(n, rho).unwrap();
        let radius = spectral_radius(&q).unwrap();
        // Gelfand: ||Q^k||^(1/k) tends to the radius.
        let k = 4000;
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut log_scale = 0.0;
        for _ in 0..k {
            m = &q * m;
            let s = m.norm();
            m /= s;
            log_scale += s.ln();
        }
        let growth = (log_scale / k as f64).exp();
        assert!((growth - radius).abs() < 5e-3, "n={n} rho={rho}: {growth} vs {radius}");
    }
}

#[test]
fn occupancy_converges_to_stationary() {
    for (p, policy) in cases() {
        let traj = simulate(
            &p,
            &mut FixedThreshold::new(&p, policy),
            1_000_000,
            run_seed(11, 0),
            &SimOptions::summary_only(vec![]),
        )
        .unwrap();
        let tv = empirical_occupancy(&traj).tv_distance(&stationary(&p, policy).unwrap());
        assert!(tv < 1e-2, "{p:?} {policy}: tv {tv}");
        let emp = empirical_cost(&traj);
        let age = avg_age(&p, policy).unwrap();
        assert!((emp.avg_age - age).abs() < 0.02 * age, "{p:?} {policy}");
    }
}

#[test]
fn realized_age_matches_ladder() {
    // Without transmissions the index at slot t is t + 1, so each run gives
    // one sample of the realised age per index.
    for p in [
        SourceParams::new(5, 0.1, 0.5, 0.0).unwrap(),
        SourceParams::new(2, 0.85, 0.5, 0.0).unwrap(),
    ] {
        let runs = 20_000u64;
        let j_max = 12u64;
        let mut sum = vec![0.0; j_max as usize + 1];
        let mut sq = vec![0.0; j_max as usize + 1];
        for k in 0..runs {
            let traj = simulate(
                &p,
                &mut FixedThreshold::new(&p, ThresholdPolicy::Infinite),
                j_max,
                run_seed(5, k),
                &SimOptions::default(),
            )
            .unwrap();
            let ages = conditional_realized_age(&traj, j_max).unwrap();
            for j in 1..=j_max as usize {
                let v = ages[j].expect("every index is visited once");
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 1..=j_max as usize {
            let mean = sum[j] / runs as f64;
            let var = sq[j] / runs as f64 - mean * mean;
            let se = (var / runs as f64).sqrt().max(1e-12);
            let a = p.age_by_sum(j as u64);
            assert!((mean - a).abs() < 4.0 * se, "{p:?} j={j}: {mean} vs {a} (se {se})");
        }
    }
}

#[test]
fn piggybacked_transitions_are_independent() {
    let p = SourceParams::new(4, 0.08, 0.6, 1.0).unwrap();
    let traj = simulate(
        &p,
        &mut FixedThreshold::new(&p, ThresholdPolicy::Finite(1)),
        400_000,
        run_seed(3, 0),
        &SimOptions::summary_only(vec![]),
    )
    .unwrap();
    let x: Vec<f64> = traj
        .observations
        .iter()
        .map(|o| if o.changed { 1.0 } else { 0.0 })
        .collect();
    let n = x.len() as f64;
    assert!(n > 50_000.0);
    let q = 3.0 * 0.08;
    let mean = x.iter().sum::<f64>() / n;
    assert!((mean - q).abs() < 4.0 * (q * (1.0 - q) / n).sqrt(), "fraction {mean}");
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let lag1 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / ((n - 1.0) * var);
    assert!(lag1.abs() < 4.0 / n.sqrt(), "lag-1 correlation {lag1}");
}

#[test]
fn expected_fixed_cost_matches_monte_carlo() {
    let p = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
    let checkpoints = [10u64, 100, 1000];
    let c_star = optimal_cost(&p).unwrap();
    for policy in [ThresholdPolicy::Finite(0), ThresholdPolicy::Finite(6), ThresholdPolicy::Infinite] {
        let exact = expected_fixed_cost(&p, policy, &checkpoints).unwrap();
        let curve = fixed_regret_curve(&p, policy, &checkpoints, 400, 21).unwrap();
        for (k, &t) in checkpoints.iter().enumerate() {
            let want = exact[k] - t as f64 * c_star;
            let got = curve.mean_regret[k];
            let se = curve.stderr[k].max(1e-9);
            assert!((got - want).abs() < 4.0 * se, "{policy} T={t}: {got} vs {want} (se {se})");
        }
    }
    let inf = expected_fixed_cost(&p, ThresholdPolicy::Infinite, &checkpoints).unwrap();
    for (k, &t) in checkpoints.iter().enumerate() {
        let direct: f64 = (1..=t).map(|j| p.age_by_sum(j)).sum();
        assert!((inf[k] - direct).abs() < 1e-9 * direct, "T={t}");
    }
}

#[test]
fn split_half_stderr_is_consistent() {
    let p = SourceParams::new(5, 0.1, 0.5, 8.0).unwrap();
    let checkpoints = [100u64, 1000, 5000];
    let a = fixed_regret_curve(&p, ThresholdPolicy::Finite(2), &checkpoints, 200, 1).unwrap();
    let b = fixed_regret_curve(&p, ThresholdPolicy::Finite(2), &checkpoints, 200, 2).unwrap();
    for k in 0..checkpoints.len() {
        let gap = (a.mean_regret[k] - b.mean_regret[k]).abs();
        let se = a.stderr[k].hypot(b.stderr[k]);
        assert!(gap < 4.0 * se, "T={}: gap {gap} se {se}", checkpoints[k]);
        let ratio = a.stderr[k] / b.stderr[k];
        assert!((0.7..1.43).contains(&ratio), "stderr ratio {ratio}");
    }
}

#[test]
fn learner_phases_follow_the_confidence_rule() {
    let (n, rho, lambda, horizon) = (5usize, 0.5, 20.0, 20_000u64);
    let r_l = r_limit(n, rho, lambda).unwrap();
    let mut seen_infinite = 0;
    let mut seen_finite = 0;
    for true_r in [0.3 * r_l, 0.8 * r_l, 1.2 * r_l, 0.25] {
        for seed in 0..10u64 {
            let trace = run_proposed(true_r, n, rho, lambda, horizon, run_seed(77, seed)).unwrap();
            assert_eq!(trace.r_l, r_l);
            let mut changed = 0u64;
            let mut prev = LearnerPhase::Explore;
            for (k, (d, o)) in trace.deliveries.iter().zip(&trace.trajectory.observations).enumerate() {
                let i = k as u64 + 1;
                assert_eq!(d.i, i);
                changed += o.changed as u64;
                let direct = changed as f64 / ((n - 1) as f64 * i as f64);
                assert!((d.r_hat - direct).abs() < 1e-12);
                let rad = confidence_radius(i, horizon).unwrap();
                assert!(d.phase >= prev, "phase went back at delivery {i}");
                if d.phase != prev {
                    match d.phase {
                        LearnerPhase::CommitInfinite => {
                            assert_eq!(prev, LearnerPhase::Explore);
                            assert!(d.r_hat - rad >= r_l);
                            assert!(d.threshold.is_infinite());
                        }
                        LearnerPhase::Refine => assert!(d.r_hat + rad < r_l),
                        LearnerPhase::CommitFinite => assert!(d.r_hat + 2.0 * rad < r_l),
                        LearnerPhase::Explore => unreachable!(),
                    }
                } else if d.phase == LearnerPhase::Explore {
                    assert!(d.r_hat - rad < r_l && d.r_hat + rad >= r_l);
                }
                if d.phase < LearnerPhase::CommitFinite {
                    assert_eq!(d.threshold, ThresholdPolicy::Finite(0));
                }
                prev = d.phase;
            }
            assert_eq!(trace.deliveries.len(), trace.trajectory.observations.len());
            match trace.final_phase {
                LearnerPhase::CommitInfinite => seen_infinite += 1,
                LearnerPhase::CommitFinite => seen_finite += 1,
                _ => {}
            }
        }
    }
    assert!(r_l < 0.2, "r_l {r_l}");
    assert!(seen_infinite > 0 && seen_finite > 0);
}

#[test]
fn greedy_follows_its_estimate() {
    let trace = run_greedy(0.05, 5, 0.5, 8.0, 5000, 9).unwrap();
    for d in &trace.deliveries {
        let r = d.r_hat.clamp(1e-9, 0.25);
        let p = SourceParams::new(5, r, 0.5, 8.0).unwrap();
        assert_eq!(d.threshold, maoii::solver::optimal_threshold(&p).unwrap());
    }
    assert_eq!(trace.final_policy, trace.deliveries.last().unwrap().threshold);
    assert_eq!(Regime::Smooth, SourceParams::new(5, 0.05, 0.5, 8.0).unwrap().regime());
}
