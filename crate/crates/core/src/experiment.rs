//! Round loop, metrics output and grid search.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_average, aggregate_folb_het, aggregate_folb_single, aggregate_folb_two_set, AggregationReport,
};
use crate::bounds::{
    check_bound_along_run, estimate_constants, BoundHarness, BoundKind, BoundReport, ProbeSettings, ShardObjectives,
    TrajectoryPoint,
};
use crate::config::{DataSource, ExperimentConfig, Strategy};
use crate::data::{generate_synthetic, holdout_split, load_csv, partition_by_label, FederatedData, SyntheticSpec};
use crate::error::{FedError, Result};
use crate::local_solver::{draw_delay_bounds, local_solve, DeviceProfile, LocalUpdate};
use crate::models::{LossModel, ModelKind};
use crate::numerics::{sample_categorical, ParamVector, RngStream, StreamRole};
use crate::selection::{lb_near_optimal_distribution, norm_proportional_distribution, uniform_distribution};

/// Everything logged about one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// Sampled multiset, in draw order.
    pub selected: Vec<usize>,
    /// Calibration multiset of the two-set rule.
    pub selected_second: Option<Vec<usize>>,
    /// Entries of `selected` that delivered an update.
    pub participants: Vec<usize>,
    /// Aggregation weight of each participant entry.
    pub weights: Vec<f64>,
    /// Global training loss after this round's update.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Norm of the global gradient at the start of the round (full-information mode only).
    pub grad_norm: Option<f64>,
    pub gammas: Vec<f64>,
    pub steps: Vec<usize>,
    /// Longest participant time; 0 for a no-op round.
    pub sim_time: f64,
    /// Selected devices whose delay left no time to compute.
    pub timed_out: Vec<usize>,
    /// Every selected device timed out and the parameters were kept.
    pub noop: bool,
    /// The aggregation rule degenerated to plain averaging.
    pub fallback: bool,
    /// Floats uploaded by devices this round.
    pub payload: usize,
    /// Parameters at the start of the round (full-information mode only).
    pub start_params: Option<Vec<f64>>,
}

/// Builds the federated dataset described by a config.
pub fn build_data(config: &ExperimentConfig) -> Result<FederatedData> {
    let seed = config.data_seed();
    match &config.data {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                alpha: config.alpha,
                beta: config.beta,
                iid: config.iid,
                devices: config.devices,
                d_in: config.d_in,
                classes: config.classes,
                total_samples: config.total_samples,
                power_law_exponent: config.power_law,
                test_fraction: config.test_fraction,
                seed,
            };
            Ok(generate_synthetic(&spec)?.data)
        }
        DataSource::Csv(path) => {
            if path.as_os_str().is_empty() {
                return Err(FedError::Config("data = csv needs csv_path".into()));
            }
            let loaded = load_csv(path, config.label_column, Some(config.classes))?;
            log::info!("{}: {}", path.display(), loaded.report());
            let (train, test) = holdout_split(&loaded.dataset, config.test_fraction, seed);
            let shards = partition_by_label(
                &train,
                config.classes,
                config.devices,
                config.classes_per_device,
                config.power_law,
                seed,
            )?;
            Ok(FederatedData {
                classes: config.classes,
                shards,
                test,
            })
        }
    }
}

/// Live state of one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub model: LossModel,
    pub data: FederatedData,
    pub profiles: Vec<DeviceProfile>,
    /// Weight of each device loss in the global objective.
    pub objective_weights: Vec<f64>,
    pub params: ParamVector,
    /// Rounds completed so far.
    pub round: usize,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = build_data(&config)?;
        Self::with_data(config, data)
    }

    /// Uses an already-built dataset (its shard count must match `devices`).
    pub fn with_data(config: ExperimentConfig, data: FederatedData) -> Result<Self> {
        config.validate()?;
        if data.shards.len() != config.devices {
            return Err(FedError::Config(format!(
                "config has {} devices but the data has {} shards",
                config.devices,
                data.shards.len()
            )));
        }
        if data.test.is_empty() {
            return Err(FedError::Config("the held-out test set is empty".into()));
        }
        if let Some(k) = data.shards.iter().position(|s| s.is_empty()) {
            return Err(FedError::Config(format!("device {k} has no data")));
        }
        let model = match config.model {
            ModelKind::Mlr => LossModel::mlr(data.d_in(), data.classes),
            ModelKind::Mlp1 => LossModel::mlp1(data.d_in(), config.hidden, data.classes),
        };
        let delays = draw_delay_bounds(config.devices, config.comm_delay_mean, config.seed);
        let profiles: Vec<DeviceProfile> = delays
            .iter()
            .enumerate()
            .map(|(k, &comm_delay)| DeviceProfile {
                device_id: k,
                comm_delay,
                steps_min: config.steps_min,
                steps_max: config.steps_max,
                learning_rate: config.learning_rate,
                minibatch: config.minibatch,
                step_cost: config.step_cost,
                seed: config.seed,
            })
            .collect();
        for p in &profiles {
            p.validate()?;
        }
        let objective_weights = if config.weighted_objective {
            let sizes = data.sizes();
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        } else {
            vec![1.0 / config.devices as f64; config.devices]
        };
        let params = model.init_params(config.seed);
        Ok(Simulation {
            config,
            model,
            data,
            profiles,
            objective_weights,
            params,
            round: 0,
        })
    }

    /// `f(w) = sum_k p_k F_k(w)`, summed in device order.
    pub fn global_loss(&self, w: &ParamVector) -> Result<f64> {
        let losses: Vec<f64> = self
            .data
            .shards
            .par_iter()
            .map(|s| self.model.loss(w, &s.data))
            .collect::<Result<_>>()?;
        Ok(losses.iter().zip(&self.objective_weights).map(|(l, p)| l * p).sum())
    }

    /// Every device gradient at `w` plus the weighted global gradient.
    pub fn all_gradients(&self, w: &ParamVector) -> Result<(Vec<ParamVector>, ParamVector)> {
        let grads: Vec<ParamVector> = self
            .data
            .shards
            .par_iter()
            .map(|s| self.model.gradient(w, &s.data))
            .collect::<Result<_>>()?;
        let mut global = ParamVector::zeros(w.len());
        for (g, p) in grads.iter().zip(&self.objective_weights) {
            global.axpy(*p, g);
        }
        Ok((grads, global))
    }

    /// Solves each distinct device once; timeouts come back as `None`.
    fn solve_devices(&self, devices: &BTreeSet<usize>, round: u64) -> Result<Vec<(usize, Option<LocalUpdate>)>> {
        let mu = self.config.effective_mu();
        let list: Vec<usize> = devices.iter().copied().collect();
        list.par_iter()
            .map(|&k| {
                let r = local_solve(
                    &self.profiles[k],
                    &self.model,
                    &self.data.shards[k].data,
                    &self.params,
                    mu,
                    self.config.tau,
                    round,
                );
                match r {
                    Ok(u) => Ok((k, Some(u))),
                    Err(FedError::Timeout { .. }) => Ok((k, None)),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    /// Executes one round and advances the parameters.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.round + 1;
        let cfg = &self.config;
        let n = cfg.devices;
        let k = cfg.clients_per_round;
        let dim = self.params.len();

        let full = if cfg.full_information {
            Some(self.all_gradients(&self.params)?)
        } else {
            None
        };
        let grad_norm = full.as_ref().map(|(_, g)| g.norm());

        let probs = match cfg.strategy {
            Strategy::FednuExact => {
                let (grads, global) = full.as_ref().expect("validated");
                lb_near_optimal_distribution(grads, global)?.probs
            }
            Strategy::FednuNorm => norm_proportional_distribution(&full.as_ref().expect("validated").0)?.probs,
            _ => uniform_distribution(n)?.probs,
        };
        let mut rng = RngStream::keyed(cfg.seed, StreamRole::Selection, 0, t as u64).rng();
        let selected = sample_categorical(&probs, k, &mut rng)?;
        let selected_second = if cfg.strategy == Strategy::FolbTwoSet {
            let mut rng2 = RngStream::keyed(cfg.seed, StreamRole::SecondSelection, 0, t as u64).rng();
            Some(sample_categorical(&uniform_distribution(n)?.probs, k, &mut rng2)?)
        } else {
            None
        };

        let distinct: BTreeSet<usize> = selected.iter().copied().collect();
        let solved = self.solve_devices(&distinct, t as u64)?;
        let lookup = |d: usize| solved.iter().find(|(id, _)| *id == d).and_then(|(_, u)| u.as_ref());
        let mut participants = Vec::new();
        let mut updates = Vec::new();
        for &d in &selected {
            if let Some(u) = lookup(d) {
                participants.push(d);
                updates.push(u.clone());
            }
        }
        let timed_out: Vec<usize> = solved.iter().filter(|(_, u)| u.is_none()).map(|(d, _)| *d).collect();
        let sim_time = solved
            .iter()
            .filter_map(|(_, u)| u.as_ref().map(|u| u.elapsed))
            .fold(0.0, f64::max);
        let uploaded = solved.iter().filter(|(_, u)| u.is_some()).count();

        let mut payload = match cfg.strategy {
            Strategy::FedAvg | Strategy::FedProx => uploaded * dim,
            Strategy::FednuExact | Strategy::FednuNorm => n * dim + uploaded * dim,
            Strategy::FolbSingle | Strategy::FolbTwoSet => uploaded * 2 * dim,
            Strategy::FolbHet => uploaded * (2 * dim + 1),
        };

        let start_params = cfg.full_information.then(|| self.params.as_slice().to_vec());
        let report: Option<AggregationReport> = if updates.is_empty() {
            log::warn!("round {t}: every selected device timed out; parameters unchanged");
            None
        } else {
            Some(match cfg.strategy {
                Strategy::FedAvg | Strategy::FedProx | Strategy::FednuExact | Strategy::FednuNorm => {
                    aggregate_average(&self.params, &updates)?
                }
                Strategy::FolbTwoSet => {
                    let second = selected_second.as_ref().expect("two-set draws a second multiset");
                    let tau = cfg.tau;
                    let calibrated: BTreeSet<usize> = second
                        .iter()
                        .copied()
                        .filter(|&d| tau > self.profiles[d].comm_delay)
                        .collect();
                    let list: Vec<usize> = calibrated.iter().copied().collect();
                    let grads: Vec<ParamVector> = list
                        .par_iter()
                        .map(|&d| self.model.gradient(&self.params, &self.data.shards[d].data))
                        .collect::<Result<_>>()?;
                    payload += list.len() * dim;
                    let calibration: Vec<ParamVector> = second
                        .iter()
                        .filter_map(|d| list.iter().position(|x| x == d).map(|i| grads[i].clone()))
                        .collect();
                    if calibration.is_empty() {
                        log::info!("round {t}: no calibration gradients arrived, averaging instead");
                        let mut r = aggregate_average(&self.params, &updates)?;
                        r.fallback = true;
                        r
                    } else {
                        aggregate_folb_two_set(&self.params, &updates, &calibration)?
                    }
                }
                Strategy::FolbSingle => aggregate_folb_single(&self.params, &updates)?,
                Strategy::FolbHet => aggregate_folb_het(&self.params, &updates, cfg.psi.unwrap_or(0.0))?,
            })
        };

        let (weights, fallback) = match report {
            Some(r) => {
                self.params = r.params;
                (r.weights, r.fallback)
            }
            None => (Vec::new(), false),
        };
        self.round = t;
        let train_loss = self.global_loss(&self.params)?;
        if !train_loss.is_finite() {
            return Err(FedError::Aggregation(format!(
                "round {t}: training loss is not finite (try a smaller learning_rate)"
            )));
        }
        let test_accuracy = self.model.accuracy(&self.params, &self.data.test)?;
        Ok(RoundRecord {
            round: t,
            selected,
            selected_second,
            participants,
            weights,
            train_loss,
            test_accuracy,
            grad_norm,
            gammas: updates.iter().map(|u| u.gamma).collect(),
            steps: updates.iter().map(|u| u.steps).collect(),
            sim_time,
            timed_out,
            noop: updates.is_empty(),
            fallback,
            payload,
            start_params,
        })
    }
}

/// Worker count from `FEDSIM_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> usize {
    std::env::var("FEDSIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| FedError::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every round in memory using `threads` workers.
pub fn run_rounds(config: &ExperimentConfig, threads: usize) -> Result<(Simulation, Vec<RoundRecord>)> {
    let sim = Simulation::new(config.clone())?;
    run_simulation(sim, threads)
}

/// Runs the remaining rounds of an existing simulation.
pub fn run_simulation(mut sim: Simulation, threads: usize) -> Result<(Simulation, Vec<RoundRecord>)> {
    let records = pool(threads)?.install(|| {
        let mut records = Vec::with_capacity(sim.config.rounds);
        while sim.round < sim.config.rounds {
            let r = sim.run_round()?;
            log::debug!("round {} loss {:.6} acc {:.4}", r.round, r.train_loss, r.test_accuracy);
            records.push(r);
        }
        Ok::<_, FedError>(records)
    })?;
    Ok((sim, records))
}

pub const CSV_HEADER: [&str; 7] = ["round", "train_loss", "test_accuracy", "grad_norm", "sim_time", "strategy", "seed"];

/// Writes the per-round metrics table.
pub fn write_metrics_csv<W: Write>(records: &[RoundRecord], strategy: Strategy, seed: u64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| FedError::Format(format!("csv output: {e}"));
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.train_loss.to_string(),
            r.test_accuracy.to_string(),
            r.grad_norm.map_or(String::new(), |g| g.to_string()),
            r.sim_time.to_string(),
            strategy.to_string(),
            seed.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| FedError::Format(format!("csv output: {e}")))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    config: std::collections::BTreeMap<String, String>,
}

/// Writes a header line holding the config, then one record per line.
pub fn write_records_jsonl<W: Write>(config: &ExperimentConfig, records: &[RoundRecord], mut out: W) -> Result<()> {
    let to_fmt = |e: serde_json::Error| FedError::Format(format!("jsonl output: {e}"));
    let io = |e: std::io::Error| FedError::Format(format!("jsonl output: {e}"));
    let header = JsonlHeader {
        config: config.to_pairs(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(to_fmt)?).map_err(io)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(to_fmt)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a file produced by [`write_records_jsonl`].
pub fn read_records_jsonl(path: &Path) -> Result<(ExperimentConfig, Vec<RoundRecord>)> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, e: serde_json::Error| FedError::Parse { line, msg: e.to_string() };
    let first = lines
        .next()
        .ok_or_else(|| FedError::Format(format!("{}: empty run file", path.display())))?
        .map_err(|e| FedError::io(path, e))?;
    let header: JsonlHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
    let config = ExperimentConfig::from_map(&header.config)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| FedError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?);
    }
    Ok((config, records))
}

/// Paths of the files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub csv: PathBuf,
    pub jsonl: PathBuf,
    pub records: Vec<RoundRecord>,
}

/// Runs all rounds and writes `<strategy>_seed<seed>.csv` and `.jsonl` into `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput> {
    let (_, records) = run_rounds(config, threads)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let stem = format!("{}_seed{}", config.strategy, config.seed);
    let csv = dir.join(format!("{stem}.csv"));
    let jsonl = dir.join(format!("{stem}.jsonl"));
    let f = File::create(&csv).map_err(|e| FedError::io(&csv, e))?;
    write_metrics_csv(&records, config.strategy, config.seed, BufWriter::new(f))?;
    let f = File::create(&jsonl).map_err(|e| FedError::io(&jsonl, e))?;
    write_records_jsonl(config, &records, BufWriter::new(f))?;
    Ok(ExperimentOutput { csv, jsonl, records })
}

/// 1-based first round whose accuracy reaches `threshold`.
pub fn rounds_to_accuracy(accuracy: &[f64], threshold: f64) -> Option<usize> {
    accuracy.iter().position(|&a| a >= threshold).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub mu: f64,
    pub psi: Option<f64>,
    pub seed: u64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Best first: higher final accuracy, then smaller psi, then smaller mu.
    pub ranking: Vec<GridRun>,
}

impl GridReport {
    pub fn best(&self) -> &GridRun {
        &self.ranking[0]
    }
}

/// The `(mu, psi)` combinations a grid search runs; psi is only varied for `folb_het`.
pub fn grid_plan(template: &ExperimentConfig, mus: &[f64], psis: &[f64]) -> Result<Vec<(f64, Option<f64>)>> {
    if mus.is_empty() {
        return Err(FedError::Config("mu grid is empty".into()));
    }
    let psi_values: Vec<Option<f64>> = if template.strategy == Strategy::FolbHet {
        if psis.is_empty() {
            return Err(FedError::Config("psi grid is empty".into()));
        }
        psis.iter().map(|&p| Some(p)).collect()
    } else {
        if !psis.is_empty() {
            log::warn!("{} does not use psi; psi grid ignored", template.strategy);
        }
        vec![None]
    };
    Ok(mus
        .iter()
        .flat_map(|&m| psi_values.iter().map(move |&p| (m, p)))
        .collect())
}

/// Runs every grid point with a shared data seed and distinct solver seeds.
pub fn grid_search(template: &ExperimentConfig, mus: &[f64], psis: &[f64], threads: usize) -> Result<GridReport> {
    let plan = grid_plan(template, mus, psis)?;
    let data_seed = template.data_seed();
    let mut runs = Vec::with_capacity(plan.len());
    for (i, (mu, psi)) in plan.into_iter().enumerate() {
        let mut cfg = template.clone();
        cfg.mu = mu;
        cfg.psi = psi;
        cfg.seed = template.seed.wrapping_add(i as u64);
        cfg.data_seed = Some(data_seed);
        let (_, records) = run_rounds(&cfg, threads)?;
        let final_accuracy = records.last().map_or(0.0, |r| r.test_accuracy);
        log::info!("grid mu={mu} psi={psi:?}: final accuracy {final_accuracy:.4}");
        runs.push(GridRun {
            mu,
            psi,
            seed: cfg.seed,
            final_accuracy,
        });
    }
    Ok(GridReport {
        ranking: rank_grid(runs),
    })
}

/// Orders grid results best first; ties go to the smaller psi, then the smaller mu.
pub fn rank_grid(mut runs: Vec<GridRun>) -> Vec<GridRun> {
    runs.sort_by(|a, b| {
        b.final_accuracy
            .total_cmp(&a.final_accuracy)
            .then(a.psi.unwrap_or(0.0).total_cmp(&b.psi.unwrap_or(0.0)))
            .then(a.mu.total_cmp(&b.mu))
    });
    runs
}

/// Rebuilds a recorded run and checks a loss-decrease bound along its trajectory.
///
/// Needs a run recorded in full-information mode (it stores the start-of-round parameters).
pub fn check_recorded_run(
    config: &ExperimentConfig,
    records: &[RoundRecord],
    kind: BoundKind,
    mc_rounds: usize,
    seed: u64,
) -> Result<BoundReport> {
    let sim = Simulation::new(config.clone())?;
    let trajectory: Vec<TrajectoryPoint> = records
        .iter()
        .map(|r| {
            r.start_params
                .as_ref()
                .map(|p| TrajectoryPoint {
                    round: r.round as u64,
                    params: ParamVector::from_vec(p.clone()),
                })
                .ok_or_else(|| {
                    FedError::Config(format!(
                        "round {} has no start parameters; record the run with full_information = true",
                        r.round
                    ))
                })
        })
        .collect::<Result<_>>()?;
    check_bound_on_simulation(&sim, &trajectory, kind, mc_rounds, seed)
}

/// Estimates constants around `trajectory` and checks the chosen bound on it.
pub fn check_bound_on_simulation(
    sim: &Simulation,
    trajectory: &[TrajectoryPoint],
    kind: BoundKind,
    mc_rounds: usize,
    seed: u64,
) -> Result<BoundReport> {
    if sim.config.weighted_objective {
        return Err(FedError::Config("bound checks assume the uniformly weighted objective".into()));
    }
    let objectives = ShardObjectives {
        model: &sim.model,
        shards: &sim.data.shards,
    };
    let params: Vec<ParamVector> = trajectory.iter().map(|p| p.params.clone()).collect();
    let settings = ProbeSettings {
        seed,
        ..ProbeSettings::default()
    };
    let constants = estimate_constants(&objectives, &params, &settings, sim.config.mu)?;
    log::info!(
        "estimated L = {:.4}, B = {:.4}, sigma = {:.4}, mu' = {:.4}",
        constants.l_hat,
        constants.b_hat,
        constants.sigma_hat,
        constants.mu_prime
    );
    let harness = BoundHarness {
        model: &sim.model,
        shards: &sim.data.shards,
        profiles: &sim.profiles,
        mu: sim.config.mu,
        k: sim.config.clients_per_round,
        tau: sim.config.tau,
        steps_override: None,
    };
    check_bound_along_run(&harness, trajectory, &constants, kind, mc_rounds, seed)
}
