//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The test fails if any criterion fails.

mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::Rng;

use ltc_core::config::{EnvKind, RunConfig};
use ltc_core::control::{exhaustive_step, ControllerKind, LearnMode};
use ltc_core::feeder::TapChanger;
use ltc_core::harness::{run_episode, tap_agreement, EpisodeOutcome};
use ltc_core::learner::{
    generate_virtual_transitions, greedy_action, lstdq_encoded, sequential_learn, EncodedSample,
    FeatureMap, LstdqParams, SequentialConfig, WeightVector,
};
use ltc_core::loads::{synthesize_loads, LoadConfig};
use ltc_core::mdp::{reward, SystemState, TapAction, Transition};
use ltc_core::powerflow::{
    estimate_voltage_under_taps, lindistflow_solve, sweep_ac_solve, SweepOptions,
};
use ltc_core::scenario;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    // written past the test harness capture so the lines always show
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "[{}] criterion {} ({}): {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.id,
        v.name,
        v.detail
    );
}

fn max_mag_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.sqrt() - y.sqrt()).abs())
        .fold(0.0, f64::max)
}

/// Estimates from a sweep solution at neutral taps against sweep re-solves
/// at every other position, for every step of a synthetic day.
fn estimator_accuracy() -> Verdict {
    let started = Instant::now();
    let topo = scenario::ieee13();
    let profile = synthesize_loads(
        &LoadConfig {
            days: 1,
            ..scenario::ieee13_loads()
        },
        topo.n(),
        7,
    )
    .unwrap();
    let opts = SweepOptions::default();
    let neutral = topo.ratios(&[0]).unwrap();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for inj in &profile.steps {
        let base = sweep_ac_solve(&topo, &neutral, inj, opts).unwrap();
        for pos in -16..=16 {
            if pos == 0 {
                continue;
            }
            let taps = topo.ratios(&[pos]).unwrap();
            let est = estimate_voltage_under_taps(&topo, &base, &neutral, &taps).unwrap();
            let truth = sweep_ac_solve(&topo, &taps, inj, opts).unwrap();
            worst = worst.max(max_mag_error(&est.v, &truth.v));
            cases += 1;
        }
    }
    let elapsed = started.elapsed();
    // informational: bases at the window edges, outside the anchored scenario
    let mut edge_worst = 0.0f64;
    for inj in profile.steps.iter().step_by(12) {
        for from in [-16, 16] {
            let t_from = topo.ratios(&[from]).unwrap();
            let base = sweep_ac_solve(&topo, &t_from, inj, opts).unwrap();
            for pos in -16..=16 {
                let taps = topo.ratios(&[pos]).unwrap();
                let est = estimate_voltage_under_taps(&topo, &base, &t_from, &taps).unwrap();
                let truth = sweep_ac_solve(&topo, &taps, inj, opts).unwrap();
                edge_worst = edge_worst.max(max_mag_error(&est.v, &truth.v));
            }
        }
    }
    Verdict {
        id: 1,
        name: "estimator accuracy",
        pass: worst < 0.002 && elapsed < Duration::from_secs(5),
        detail: format!(
            "max error {worst:.2e} p.u. over {cases} tap changes (< 2e-3), {:.2} s (< 5 s); \
             from edge positions {edge_worst:.2e} p.u. (not scored)",
            elapsed.as_secs_f64()
        ),
    }
}

fn commutation_oracle() -> Verdict {
    let mut rng = common::rng(2024);
    let mut worst = 0.0f64;
    let cases = 1500;
    for _ in 0..cases {
        let n = rng.random_range(1..60);
        let n_ltc = rng.random_range(1..=n.min(4));
        let topo = common::random_feeder(&mut rng, n, n_ltc);
        let inj = common::random_injections(&mut rng, n, 0.03);
        let t1 = topo.ratios(&common::random_positions(&mut rng, &topo)).unwrap();
        let t2 = topo.ratios(&common::random_positions(&mut rng, &topo)).unwrap();
        let v1 = lindistflow_solve(&topo, &t1, &inj).unwrap();
        let est = estimate_voltage_under_taps(&topo, &v1, &t1, &t2).unwrap();
        let truth = lindistflow_solve(&topo, &t2, &inj).unwrap();
        let err = est
            .v
            .iter()
            .zip(&truth.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Verdict {
        id: 2,
        name: "exact commutation",
        pass: worst <= 1e-10,
        detail: format!("max deviation {worst:.2e} over {cases} random cases (<= 1e-10)"),
    }
}

/// Q-value iteration on an empirical tabular MDP.
fn value_iteration(p: &[[[f64; 3]; 2]; 3], r: &[[f64; 2]; 3], gamma: f64) -> [[f64; 2]; 3] {
    let mut q = [[0.0f64; 2]; 3];
    for _ in 0..5000 {
        let v: Vec<f64> = q.iter().map(|row| row[0].max(row[1])).collect();
        let mut next = [[0.0; 2]; 3];
        for s in 0..3 {
            for a in 0..2 {
                next[s][a] = r[s][a] + gamma * (0..3).map(|t| p[s][a][t] * v[t]).sum::<f64>();
            }
        }
        q = next;
    }
    q
}

fn lstdq_correctness() -> Verdict {
    let gamma = 0.9;
    let params = LstdqParams {
        gamma,
        epsilon: 1e-10,
        c: 1e-12,
        max_iterations: 100,
    };
    let one_hot = |s: usize| {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        v
    };
    let mut worst_tabular = 0.0f64;
    for seed in 0..5 {
        let mut rng = common::rng(seed);
        let mean_r: Vec<[f64; 2]> = (0..3)
            .map(|_| [rng.random_range(-1.0..0.0), rng.random_range(-1.0..0.0)])
            .collect();
        // sampled batch; its empirical kernel defines the reference MDP
        let mut samples = Vec::new();
        let mut counts = [[[0.0; 3]; 2]; 3];
        let mut reward_sum = [[0.0; 2]; 3];
        for _ in 0..600 {
            let s = rng.random_range(0..3);
            let a = rng.random_range(0..2);
            let t = rng.random_range(0..3);
            let r = mean_r[s][a] + rng.random_range(-0.1..0.1);
            counts[s][a][t] += 1.0;
            reward_sum[s][a] += r;
            samples.push(EncodedSample {
                block: one_hot(s),
                segment: a,
                reward: r,
                next_block: one_hot(t),
                next_segments: vec![0, 1],
            });
        }
        let mut p = [[[0.0; 3]; 2]; 3];
        let mut r = [[0.0; 2]; 3];
        for s in 0..3 {
            for a in 0..2 {
                let n: f64 = counts[s][a].iter().sum();
                for t in 0..3 {
                    p[s][a][t] = counts[s][a][t] / n;
                }
                r[s][a] = reward_sum[s][a] / n;
            }
        }
        let q = value_iteration(&p, &r, gamma);
        let out = lstdq_encoded(2, &samples, &params, &WeightVector::zeros(6)).unwrap();
        // weights are laid out segment-major: w[a * 3 + s]
        for (s, q_s) in q.iter().enumerate() {
            for (a, q_sa) in q_s.iter().enumerate() {
                worst_tabular = worst_tabular.max((out.w.0[a * 3 + s] - q_sa).abs());
            }
        }
    }
    let single: Vec<EncodedSample> = (0..100)
        .map(|_| EncodedSample {
            block: vec![1.0],
            segment: 0,
            reward: 1.0,
            next_block: vec![1.0],
            next_segments: vec![0],
        })
        .collect();
    let fixed = lstdq_encoded(1, &single, &params, &WeightVector::zeros(1)).unwrap();
    let single_err = (fixed.w.0[0] - 1.0 / (1.0 - gamma)).abs();
    Verdict {
        id: 3,
        name: "LSTDQ correctness",
        pass: worst_tabular <= 1e-6 && single_err <= 1e-9,
        detail: format!(
            "tabular max |w - Q_vi| {worst_tabular:.2e} (<= 1e-6); single-state error {single_err:.2e} (<= 1e-9)"
        ),
    }
}

struct ReferenceRuns {
    rl: EpisodeOutcome,
    exhaustive: EpisodeOutcome,
    conventional: EpisodeOutcome,
    elapsed: Duration,
}

fn reference_runs(seed: u64) -> ReferenceRuns {
    let started = Instant::now();
    let cfg: RunConfig = scenario::base_run_config("ieee13");
    let topo = Arc::new(scenario::ieee13());
    let profile = synthesize_loads(&cfg.load_config(), topo.n(), seed).unwrap();
    let episode = cfg.episode_config(topo.n(), EnvKind::Sweep);
    let run = |kind| {
        let mut c = cfg
            .build_controller(kind, Arc::clone(&topo), EnvKind::Sweep, seed, LearnMode::Sync)
            .unwrap();
        run_episode(&topo, &profile, c.as_mut(), &episode).unwrap()
    };
    let rl = run(ControllerKind::Rl);
    let exhaustive = run(ControllerKind::Exhaustive);
    let conventional = run(ControllerKind::Conventional);
    ReferenceRuns {
        rl,
        exhaustive,
        conventional,
        elapsed: started.elapsed(),
    }
}

fn convergence(runs: &ReferenceRuns) -> Verdict {
    let cfg = scenario::ieee13_controller();
    let stats = &runs.rl.metrics;
    let worst_iters = stats.lstdq_iterations.iter().copied().max().unwrap_or(usize::MAX);
    // one LTC and one sweep: each learning report is a single LSTDQ call
    let converged = stats.lstdq_iterations.iter().all(|&i| i < cfg.max_lstdq_iterations);
    let slowest = stats.relearn_seconds.iter().cloned().fold(0.0, f64::max);
    Verdict {
        id: 4,
        name: "convergence",
        pass: cfg.batch_size == 6000
            && cfg.kappa == 21
            && cfg.epsilon_converge == 1e-5
            && stats.lstdq_calls > 0
            && converged
            && worst_iters <= 10
            && slowest <= 20.0,
        detail: format!(
            "D = {}, kappa = {}: {} calls, iterations {:?} (<= 10), slowest call {:.2} s (<= 20 s)",
            cfg.batch_size,
            cfg.kappa,
            stats.lstdq_calls,
            stats.lstdq_iterations,
            slowest
        ),
    }
}

fn ordering(runs: &ReferenceRuns) -> Verdict {
    let (rl, exh, conv) = (
        runs.rl.metrics.rho,
        runs.exhaustive.metrics.rho,
        runs.conventional.metrics.rho,
    );
    let rel = (rl - exh).abs() / exh.abs();
    let ratio = conv.abs() / rl.abs();
    let agreement = tap_agreement(&runs.rl.log, &runs.exhaustive.log);
    let secs = runs.elapsed.as_secs_f64();
    Verdict {
        id: 5,
        name: "controller ordering",
        pass: exh >= rl && rel <= 0.15 && ratio >= 2.0 && agreement >= 0.7 && secs <= 300.0,
        detail: format!(
            "rho exhaustive {exh:.4e} >= rl {rl:.4e} (gap {:.1}% <= 15%), |conventional| {:.4e} = {ratio:.2}x |rl| (>= 2), \
             tap agreement {:.1}% (>= 70%), {secs:.1} s (<= 300 s)",
            100.0 * rel,
            conv.abs(),
            100.0 * agreement
        ),
    }
}

fn check(failures: &mut Vec<String>, name: &str, result: Result<(), String>) {
    if let Err(e) = result {
        failures.push(format!("{name}: {e}"));
    }
}

fn invariant_suites(runs: &ReferenceRuns) -> Verdict {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 256,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let mut failures = Vec::new();

    let r = runner
        .run(
            &(1usize..40).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.5f64..1.5, n),
                    proptest::collection::vec(0.5f64..1.5, n),
                )
            }),
            |(v, v_star)| {
                let r = reward(&v, &v_star).unwrap();
                prop_assert!(r <= 0.0);
                prop_assert_eq!(r == 0.0, v == v_star);
                prop_assert_eq!(reward(&v_star, &v_star).unwrap(), 0.0);
                Ok(())
            },
        )
        .map_err(|e| e.to_string());
    check(&mut failures, "reward sign", r);

    let r = runner
        .run(&(any::<u64>(), 1usize..20, 1usize..25), |(seed, n, kappa)| {
            let mut rng = common::rng(seed);
            let topo = common::random_feeder(&mut rng, n, 1);
            let fm = FeatureMap::uniform(&topo, 0, kappa, 0.9, 0.01, 1.0).unwrap();
            let pos = common::random_positions(&mut rng, &topo);
            let inj = common::random_injections(&mut rng, n, 0.02);
            let v = lindistflow_solve(&topo, &topo.ratios(&pos).unwrap(), &inj).unwrap().v;
            let s = SystemState::new(pos.clone(), v).unwrap();
            for delta in fm.actions_from(pos[0]) {
                let phi = fm.feature_vector(&topo, &s, delta).unwrap();
                prop_assert!(phi.iter().all(|x| (0.0..=1.0).contains(x)));
                let nonzero = phi.iter().filter(|x| **x != 0.0).count();
                prop_assert!(nonzero <= fm.block_len());
                let seg = fm.segment(pos[0], delta).unwrap() * fm.block_len();
                prop_assert!(phi[..seg].iter().chain(&phi[seg + fm.block_len()..]).all(|x| *x == 0.0));
            }
            Ok(())
        })
        .map_err(|e| e.to_string());
    check(&mut failures, "feature sparsity", r);

    let r = runner
        .run(&(any::<u64>(), 1usize..15, 1e-3f64..1e3), |(seed, n, alpha)| {
            let mut rng = common::rng(seed);
            let topo = common::random_feeder(&mut rng, n, 1);
            let fm = FeatureMap::uniform(&topo, 0, 5, 0.9, 0.01, 1.0).unwrap();
            let w = WeightVector((0..fm.dim()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let pos = common::random_positions(&mut rng, &topo);
            let inj = common::random_injections(&mut rng, n, 0.02);
            let v = lindistflow_solve(&topo, &topo.ratios(&pos).unwrap(), &inj).unwrap().v;
            let s = SystemState::new(pos, v).unwrap();
            prop_assert_eq!(
                greedy_action(&fm, &w, &topo, &s).unwrap().0,
                greedy_action(&fm, &w.scaled(alpha), &topo, &s).unwrap().0
            );
            Ok(())
        })
        .map_err(|e| e.to_string());
    check(&mut failures, "argmax scaling", r);

    // chain conservation: constructor guard and every logged episode
    let s = SystemState::new(vec![0], vec![1.0]).unwrap();
    let broken = Transition::new(
        s.clone(),
        TapAction { steps: vec![1] },
        0.0,
        SystemState::new(vec![2], vec![1.0]).unwrap(),
        &[1.0],
    );
    if broken.is_ok() {
        failures.push("transition chain: broken tuple accepted".into());
    }
    for out in [&runs.rl, &runs.exhaustive, &runs.conventional] {
        let chained = out.log.records.windows(2).all(|w| {
            let moved: Vec<i32> = w[0].positions.iter().zip(&w[0].action).map(|(p, d)| p + d).collect();
            w[1].positions == moved
        });
        let rewards_ok = out.log.records.iter().all(|r| {
            (reward(&r.v_next, &vec![1.0; r.v_next.len()]).unwrap() - r.reward).abs() <= 1e-12
        });
        if !(chained && rewards_ok) {
            failures.push(format!("transition chain: {} log inconsistent", out.log.controller));
        }
    }

    // seeded reproducibility
    let cfg = scenario::base_run_config("ieee13");
    let loads = cfg.load_config();
    if synthesize_loads(&loads, 12, 7).unwrap() != synthesize_loads(&loads, 12, 7).unwrap() {
        failures.push("synthesize_loads not reproducible".into());
    }
    let mut rng = common::rng(1);
    let topo = common::random_feeder(&mut rng, 10, 2);
    let positions = vec![0, 0];
    let inj = common::random_injections(&mut rng, 10, 0.02);
    let v = lindistflow_solve(&topo, &topo.ratios(&positions).unwrap(), &inj).unwrap().v;
    let v2 = lindistflow_solve(&topo, &topo.ratios(&[1, -1]).unwrap(), &inj).unwrap().v;
    let r2 = reward(&v2, &[1.0; 10]).unwrap();
    let t = Transition::new(
        SystemState::new(positions, v).unwrap(),
        TapAction { steps: vec![1, -1] },
        r2,
        SystemState::new(vec![1, -1], v2).unwrap(),
        &[1.0; 10],
    )
    .unwrap();
    let fms: Vec<_> = (0..2)
        .map(|l| FeatureMap::uniform(&topo, l, 4, 0.9, 0.01, 1.0).unwrap())
        .collect();
    let weights: Vec<_> = fms.iter().map(|f| WeightVector(vec![0.1; f.dim()])).collect();
    let gen = |seed| {
        generate_virtual_transitions(&topo, std::slice::from_ref(&t), 200, &[1.0; 10], 0, &fms, &weights, &mut common::rng(seed))
            .unwrap()
    };
    if gen(9) != gen(9) {
        failures.push("generate_virtual_transitions not reproducible".into());
    }
    let again = reference_rl(7);
    if again.log != runs.rl.log {
        failures.push("run_episode not reproducible".into());
    }

    Verdict {
        id: 6,
        name: "invariant suites",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "reward sign, feature sparsity/bounds, argmax scaling, chain conservation, seeded reproducibility all hold".into()
        } else {
            failures.join("; ")
        },
    }
}

fn reference_rl(seed: u64) -> EpisodeOutcome {
    let cfg = scenario::base_run_config("ieee13");
    let topo = Arc::new(scenario::ieee13());
    let profile = synthesize_loads(&cfg.load_config(), topo.n(), seed).unwrap();
    let mut c = cfg
        .build_controller(ControllerKind::Rl, Arc::clone(&topo), EnvKind::Sweep, seed, LearnMode::Sync)
        .unwrap();
    run_episode(&topo, &profile, c.as_mut(), &cfg.episode_config(topo.n(), EnvKind::Sweep)).unwrap()
}

fn structural_counts(runs: &ReferenceRuns) -> Verdict {
    let mut rng = common::rng(77);
    let mut calls_ok = true;
    let mut seen = Vec::new();
    for (n_ltc, sweeps) in [(1, 1), (2, 3), (4, 3)] {
        let topo = common::random_feeder(&mut rng, 12, n_ltc);
        let positions = vec![0; n_ltc];
        let inj = common::random_injections(&mut rng, 12, 0.02);
        let v = lindistflow_solve(&topo, &topo.ratios(&positions).unwrap(), &inj).unwrap().v;
        let r = reward(&v, &[1.0; 12]).unwrap();
        let s = SystemState::new(positions.clone(), v).unwrap();
        let base = vec![Transition::new(s.clone(), TapAction::hold(n_ltc), r, s, &[1.0; 12]).unwrap()];
        let fms: Vec<_> = (0..n_ltc)
            .map(|l| FeatureMap::uniform(&topo, l, 3, 0.9, 0.01, 1.0).unwrap())
            .collect();
        let mut weights: Vec<_> = fms.iter().map(|f| WeightVector::zeros(f.dim())).collect();
        let cfg = SequentialConfig {
            sweeps,
            batch_size: 100,
            lstdq: LstdqParams::default(),
            v_star: vec![1.0; 12],
        };
        let report = sequential_learn(&topo, &base, &fms, &mut weights, &cfg, &mut rng).unwrap();
        calls_ok &= report.lstdq_calls == n_ltc * sweeps;
        seen.push(format!("{}x{}={}", n_ltc, sweeps, report.lstdq_calls));
    }
    let day_len = runs.rl.log.records.len();

    let topo = common::random_feeder(&mut rng, 10, 2);
    let ids: Vec<usize> = topo.ltcs().iter().map(|l| topo.lines()[l.line()].id).collect();
    let topo = topo.with_tap_windows(&[(ids[0], -8, 0), (ids[1], 0, 4)]).unwrap();
    let windows: Vec<TapChanger> = topo.ltcs().to_vec();
    let inj = common::random_injections(&mut rng, 10, 0.02);
    let evaluations = exhaustive_step(
        &topo,
        &inj,
        &[1.0; 10],
        &windows,
        1_000_000,
        &EnvKind::Sweep.solver(),
    )
    .unwrap()
    .evaluations;
    Verdict {
        id: 7,
        name: "structural counts",
        pass: calls_ok && day_len == 288 && evaluations == 45,
        detail: format!(
            "lstdq calls L*J: {} ; day log length {day_len} (288); exhaustive evaluations {evaluations} (45)",
            seen.join(", ")
        ),
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![estimator_accuracy(), commutation_oracle(), lstdq_correctness()];
    for v in &verdicts {
        report(v);
    }
    let runs = reference_runs(7);
    for v in [
        convergence(&runs),
        ordering(&runs),
        invariant_suites(&runs),
        structural_counts(&runs),
    ] {
        report(&v);
        verdicts.push(v);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
