//! Acceptance checks: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 are empirical comparisons at desk scale; their outcome is
//! printed with the measured numbers but does not fail the run. Every other
//! criterion exits non-zero on failure.

use std::time::Instant;

use fedsim_core::aggregation::aggregate_folb_single;
use fedsim_core::bounds::{lemma1_oracle, random_gradients, BoundKind, TrajectoryPoint};
use fedsim_core::config::{ExperimentConfig, Strategy};
use fedsim_core::data::Dataset;
use fedsim_core::experiment::{check_bound_on_simulation, rounds_to_accuracy, run_rounds, write_metrics_csv};
use fedsim_core::local_solver::LocalUpdate;
use fedsim_core::models::{finite_diff_gradient, LossModel};
use fedsim_core::numerics::{RngStream, StreamRole};
use fedsim_core::selection::{
    lb_near_optimal_distribution, lbh_distribution, norm_proportional_distribution, uniform_distribution,
};
use fedsim_core::ParamVector;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = RngStream::keyed(seed, StreamRole::Oracle, 10, 0).rng();
        let d_in = rng.random_range(1..=20);
        let classes = rng.random_range(2..=5);
        let n = rng.random_range(1..=50);
        let hidden = rng.random_range(1..=8);
        let mut ds = Dataset::empty(d_in);
        for _ in 0..n {
            let x = gaussian(&mut rng, d_in, 1.0);
            ds.push(&x, rng.random_range(0..classes));
        }
        for model in [LossModel::mlr(d_in, classes), LossModel::mlp1(d_in, hidden, classes)] {
            let w = ParamVector::from_vec(gaussian(&mut rng, model.num_params(), 0.5));
            let g = model.gradient(&w, &ds).expect("gradient");
            let fd = finite_diff_gradient(&model, &w, &ds, 1e-5).expect("finite differences");
            let err = g.sub(&fd).norm() / g.norm().max(fd.norm()).max(1e-12);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0,
        format!("max relative error {worst:.2e} over {checked} MLR/MLP instances in {secs:.2}s (limits 1e-6, 10s)"),
    )
}

fn base_config(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(strategy);
    c.seed = seed;
    c
}

fn reduction_identities() -> Outcome {
    let rounds = 50;
    let bitwise = |a: &ExperimentConfig, b: &ExperimentConfig| {
        let (sa, ra) = run_rounds(a, 1).expect("run");
        let (sb, rb) = run_rounds(b, 1).expect("run");
        sa.params == sb.params
            && ra.len() == rounds
            && ra
                .iter()
                .zip(&rb)
                .all(|(x, y)| x.train_loss.to_bits() == y.train_loss.to_bits() && x.weights == y.weights)
    };
    let mut avg = base_config(Strategy::FedAvg, 1);
    avg.rounds = rounds;
    let mut prox = base_config(Strategy::FedProx, 1);
    prox.rounds = rounds;
    prox.mu = 0.0;
    let first = bitwise(&avg, &prox);

    let mut single = base_config(Strategy::FolbSingle, 2);
    single.rounds = rounds;
    let mut het = base_config(Strategy::FolbHet, 2);
    het.rounds = rounds;
    het.psi = Some(0.0);
    het.tau = f64::INFINITY;
    let second = bitwise(&single, &het);
    outcome(
        first && second,
        format!("fedprox(mu=0) == fedavg: {first}; folb_het(psi=0, tau=inf) == folb_single: {second} (bitwise, {rounds} rounds)"),
    )
}

fn selection_distributions() -> Outcome {
    let e1 = ParamVector::from_vec(vec![1.0, 0.0]);
    let grads: Vec<ParamVector> = [2.0, -1.0, 1.0].iter().map(|&v| ParamVector::from_vec(vec![v, 3.0])).collect();
    let example = lb_near_optimal_distribution(&grads, &e1).expect("distribution").probs;
    let example_ok = example == vec![0.5, 0.25, 0.25];

    let mut worst_sum: f64 = 0.0;
    let mut worst_l1: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..1000u64 {
        let mut rng = RngStream::keyed(seed, StreamRole::Oracle, 20, 0).rng();
        let n = rng.random_range(1..=12);
        let dim = rng.random_range(1..=6);
        let grads: Vec<ParamVector> = (0..n).map(|_| ParamVector::from_vec(gaussian(&mut rng, dim, 2.0))).collect();
        let mut global = ParamVector::zeros(dim);
        for g in &grads {
            global.axpy(1.0 / n as f64, g);
        }
        let gammas: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let psi = 10f64.powf(rng.random_range(-1.0..2.0));
        for probs in [
            uniform_distribution(n).expect("uniform").probs,
            lb_near_optimal_distribution(&grads, &global).expect("lb").probs,
            norm_proportional_distribution(&grads).expect("norm").probs,
            lbh_distribution(&grads, &global, &gammas, psi).expect("lbh").probs,
        ] {
            assert!(probs.iter().all(|p| *p >= 0.0));
            worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
        }

        let center = ParamVector::from_vec(gaussian(&mut rng, dim, 1.0));
        let updates: Vec<LocalUpdate> = grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let delta = ParamVector::from_vec(gaussian(&mut rng, dim, 0.1));
                let mut w_next = center.clone();
                w_next.axpy(1.0, &delta);
                LocalUpdate {
                    device_id: i,
                    delta: w_next.sub(&center),
                    w_next,
                    grad_at_center: g.clone(),
                    gamma: gammas[i],
                    steps: 1,
                    elapsed: 1.0,
                }
            })
            .collect();
        let r = aggregate_folb_single(&center, &updates).expect("aggregation");
        if !r.fallback {
            worst_l1 = worst_l1.max((r.weights.iter().map(|w| w.abs()).sum::<f64>() - 1.0).abs());
            instances += 1;
        }
    }
    outcome(
        example_ok && worst_sum <= 1e-9 && worst_l1 <= 1e-12 && instances == 1000,
        format!(
            "inner products (2,-1,1) -> {example:?}; max |sum P - 1| = {worst_sum:.1e} (tol 1e-9); \
             single-set max |sum|w| - 1| = {worst_l1:.1e} over {instances} instances (tol 1e-12)"
        ),
    )
}

fn lemma1_oracle_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut ineq_ok = true;
    let mut cases = 0;
    for set in 0..100u64 {
        for n in 1..=4 {
            for k in 1..=3 {
                let grads = random_gradients(n, 4, set * 97 + n as u64);
                let r = lemma1_oracle(&grads, k, set).expect("oracle");
                assert!(r.exhaustive);
                worst = worst.max((r.lhs14_indep - r.rhs14).abs() / r.rhs14.abs().max(1.0));
                ineq_ok &= r.lhs15_indep <= r.rhs15 + 1e-10 * r.rhs15.abs().max(1.0);
                cases += 1;
            }
        }
    }
    let example = lemma1_oracle(
        &[ParamVector::from_vec(vec![1.0, 0.0]), ParamVector::from_vec(vec![0.0, 1.0])],
        1,
        0,
    )
    .expect("oracle");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && ineq_ok && secs < 30.0,
        format!(
            "{cases} exhaustive cases: max identity gap {worst:.1e} (tol 1e-10), second inequality holds: {ineq_ok}; \
             K=1 example exact multiset {:.3} vs identity {:.3} (reported, not asserted); {secs:.2}s",
            example.lhs14_exact, example.rhs14
        ),
    )
}

fn theorem_bounds() -> Outcome {
    let mut cfg = ExperimentConfig::new(Strategy::FedProx);
    cfg.devices = 10;
    cfg.clients_per_round = 5;
    cfg.mu = 10.0;
    cfg.rounds = 30;
    cfg.d_in = 10;
    cfg.classes = 5;
    cfg.total_samples = 1000;
    cfg.full_information = true;
    cfg.seed = 3;
    let (sim, records) = run_rounds(&cfg, 1).expect("run");
    let trajectory: Vec<TrajectoryPoint> = records
        .iter()
        .map(|r| TrajectoryPoint {
            round: r.round as u64,
            params: ParamVector::from_vec(r.start_params.clone().expect("full information")),
        })
        .collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [BoundKind::Thm1, BoundKind::Prop1, BoundKind::Prop2] {
        let report = check_bound_on_simulation(&sim, &trajectory, kind, 200, 11).expect("bound check");
        let checked = report.rounds.len();
        let min_margin = report.rounds.iter().map(|r| r.margin + 3.0 * r.std_error).fold(f64::INFINITY, f64::min);
        let ok = report.holds && checked == 30 && report.constants.mu_prime > 0.0;
        pass &= ok;
        parts.push(format!(
            "{kind:?}: {checked} rounds, min(rhs + 3SE - measured) = {min_margin:.3e}, mu' = {:.2}",
            report.constants.mu_prime
        ));
    }
    outcome(pass, parts.join("; "))
}

struct Comparison {
    rounds: [Option<usize>; 3],
    early_loss: [f64; 3],
}

const COMPARED: [Strategy; 3] = [Strategy::FolbSingle, Strategy::FedProx, Strategy::FedAvg];

fn table_comparison() -> (Vec<Comparison>, f64) {
    let start = Instant::now();
    let mut out = Vec::new();
    for seed in 0..5u64 {
        let mut rounds = [None; 3];
        let mut early_loss = [0.0; 3];
        for (i, strategy) in COMPARED.into_iter().enumerate() {
            // defaults: Synthetic(1,1), N = 30, K = 10, T = 200, steps U[1, 20], mu = 0.01
            let cfg = base_config(strategy, seed);
            let (_, records) = run_rounds(&cfg, fedsim_core::experiment::threads_from_env()).expect("run");
            let acc: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
            rounds[i] = rounds_to_accuracy(&acc, 0.70);
            early_loss[i] = records.iter().take(20).map(|r| r.train_loss).sum::<f64>() / 20.0;
        }
        out.push(Comparison { rounds, early_loss });
    }
    (out, start.elapsed().as_secs_f64())
}

fn fmt_rounds(r: Option<usize>) -> String {
    r.map_or("never".into(), |v| v.to_string())
}

fn table_analog(runs: &[Comparison], secs: f64) -> Outcome {
    let reached = |r: Option<usize>| r.unwrap_or(usize::MAX);
    let wins = runs
        .iter()
        .filter(|c| {
            let folb = reached(c.rounds[0]);
            folb != usize::MAX && folb < reached(c.rounds[1]) && folb < reached(c.rounds[2])
        })
        .count();
    let mut speedups: Vec<f64> = runs
        .iter()
        .map(|c| match (c.rounds[0], c.rounds[1]) {
            (Some(f), Some(p)) => p as f64 / f as f64,
            (Some(_), None) => f64::INFINITY,
            _ => 0.0,
        })
        .collect();
    speedups.sort_by(f64::total_cmp);
    let median = speedups[speedups.len() / 2];
    let per_seed: Vec<String> = runs
        .iter()
        .map(|c| {
            format!(
                "{}/{}/{}",
                fmt_rounds(c.rounds[0]),
                fmt_rounds(c.rounds[1]),
                fmt_rounds(c.rounds[2])
            )
        })
        .collect();
    outcome(
        wins >= 4 && median >= 1.5 && secs < 300.0,
        format!(
            "rounds to 70% folb_single/fedprox/fedavg per seed [{}]; folb strictly first in {wins}/5 (need 4), \
             median speedup over fedprox {median:.2}x (need 1.5x); {secs:.0}s",
            per_seed.join(", ")
        ),
    )
}

fn early_loss(runs: &[Comparison]) -> Outcome {
    let wins = runs.iter().filter(|c| c.early_loss[0] < c.early_loss[1]).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|c| format!("{:.3} vs {:.3}", c.early_loss[0], c.early_loss[1]))
        .collect();
    outcome(
        wins >= 4,
        format!(
            "mean train loss rounds 1-20, folb_single vs fedprox (mu = 0.01): [{}]; folb lower in {wins}/5 (need 4)",
            per_seed.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let mut identical = true;
    let mut checked = Vec::new();
    for strategy in [Strategy::FolbHet, Strategy::FolbTwoSet, Strategy::FednuExact] {
        let mut cfg = base_config(strategy, 9);
        cfg.rounds = 15;
        if strategy == Strategy::FolbHet {
            cfg.psi = Some(1.0);
            cfg.comm_delay_mean = 2.0;
            cfg.tau = 15.0;
        }
        let bytes = |threads: usize| {
            let (_, records) = run_rounds(&cfg, threads).expect("run");
            let mut out = Vec::new();
            write_metrics_csv(&records, cfg.strategy, cfg.seed, &mut out).expect("csv");
            out
        };
        let reference = bytes(1);
        for threads in [1, 2, 4, 7] {
            identical &= bytes(threads) == reference;
        }
        checked.push(strategy.to_string());
    }
    outcome(
        identical,
        format!("metrics CSV byte-identical across 1/2/4/7 worker threads and repeated runs for {}", checked.join(", ")),
    )
}

fn main() {
    let mut hard_failures = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome, enforced: bool| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id}. {name}: {}", o.detail);
        if !o.pass && enforced {
            hard_failures.push(id);
        }
    };
    report(1, "gradient correctness", gradient_correctness(), true);
    report(2, "reduction identities", reduction_identities(), true);
    report(3, "selection distributions", selection_distributions(), true);
    report(4, "gradient-estimation oracle", lemma1_oracle_check(), true);
    report(5, "per-round bound check", theorem_bounds(), true);
    let (runs, secs) = table_comparison();
    report(6, "rounds-to-accuracy comparison", table_analog(&runs, secs), false);
    report(7, "early training loss comparison", early_loss(&runs), false);
    report(8, "determinism", determinism(), true);
    if !hard_failures.is_empty() {
        eprintln!("failed criteria: {hard_failures:?}");
        std::process::exit(1);
    }
}
