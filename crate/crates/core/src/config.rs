//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticSpec, DEFAULT_POWER_LAW};
use crate::error::{FedError, Result};
use crate::models::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FedAvg,
    FedProx,
    FednuExact,
    FednuNorm,
    FolbTwoSet,
    FolbSingle,
    FolbHet,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::FednuExact,
        Strategy::FednuNorm,
        Strategy::FolbTwoSet,
        Strategy::FolbSingle,
        Strategy::FolbHet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FednuExact => "fednu_exact",
            Strategy::FednuNorm => "fednu_norm",
            Strategy::FolbTwoSet => "folb_two_set",
            Strategy::FolbSingle => "folb_single",
            Strategy::FolbHet => "folb_het",
        }
    }

    /// Strategies that need every device's gradient each round.
    pub fn needs_full_information(self) -> bool {
        matches!(self, Strategy::FednuExact | Strategy::FednuNorm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| FedError::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub devices: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub mu: f64,
    /// Only meaningful (and required) for `folb_het`.
    pub psi: Option<f64>,
    /// Round time budget; infinite by default.
    pub tau: f64,
    /// Solver, selection and initialization seed.
    pub seed: u64,
    /// Seed for data generation and partitioning; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub full_information: bool,
    /// Weight device losses by shard size instead of uniformly.
    pub weighted_objective: bool,

    pub model: ModelKind,
    pub hidden: usize,

    pub data: DataSource,
    /// Defaults to the last column.
    pub label_column: Option<usize>,
    pub classes_per_device: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iid: bool,
    pub d_in: usize,
    pub classes: usize,
    pub total_samples: usize,
    pub power_law: f64,
    pub test_fraction: f64,

    pub learning_rate: f64,
    pub minibatch: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    pub step_cost: f64,
    pub comm_delay_mean: f64,

    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy) -> Self {
        ExperimentConfig {
            strategy,
            devices: 30,
            clients_per_round: 10,
            rounds: 200,
            mu: 0.01,
            psi: if strategy == Strategy::FolbHet { Some(0.0) } else { None },
            tau: f64::INFINITY,
            seed: 0,
            data_seed: None,
            full_information: strategy.needs_full_information(),
            weighted_objective: false,
            model: ModelKind::Mlr,
            hidden: 32,
            data: DataSource::Synthetic,
            label_column: None,
            classes_per_device: 2,
            alpha: 1.0,
            beta: 1.0,
            iid: false,
            d_in: 60,
            classes: 10,
            total_samples: 10_000,
            power_law: DEFAULT_POWER_LAW,
            test_fraction: 0.2,
            learning_rate: 0.01,
            minibatch: 0,
            steps_min: 1,
            steps_max: 20,
            step_cost: 1.0,
            comm_delay_mean: 0.0,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// `mu` actually handed to the local solver (plain averaging never uses a proximal term).
    pub fn effective_mu(&self) -> f64 {
        if self.strategy == Strategy::FedAvg {
            0.0
        } else {
            self.mu
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.devices == 0 {
            return bad("devices must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.devices {
            return bad(format!(
                "clients_per_round must be in [1, devices = {}], got {}",
                self.devices, self.clients_per_round
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be a finite value >= 0, got {}", self.mu));
        }
        match (self.strategy, self.psi) {
            (Strategy::FolbHet, None) => return bad("folb_het requires psi".into()),
            (Strategy::FolbHet, Some(p)) if !(p >= 0.0) => return bad(format!("psi must be >= 0, got {p}")),
            (s, Some(_)) if s != Strategy::FolbHet => return bad(format!("psi is only used by folb_het, not {s}")),
            _ => {}
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.strategy.needs_full_information() && !self.full_information {
            return bad(format!("{} needs full_information = true", self.strategy));
        }
        if self.model == ModelKind::Mlp1 && self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must be in [0, 1), got {}", self.test_fraction));
        }
        if self.steps_min < 1 || self.steps_min > self.steps_max {
            return bad(format!("need 1 <= steps_min <= steps_max, got [{}, {}]", self.steps_min, self.steps_max));
        }
        if !(self.learning_rate > 0.0) || !(self.step_cost > 0.0) || !(self.comm_delay_mean >= 0.0) {
            return bad("learning_rate and step_cost must be positive, comm_delay_mean nonnegative".into());
        }
        Ok(())
    }

    /// Parses the text format; `strategy` is the only mandatory key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FedError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((i + 1, key.trim().to_string(), value.trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a config from `(line, key, value)` triples.
    pub fn from_pairs(pairs: Vec<(usize, String, String)>) -> Result<Self> {
        let strategy = pairs
            .iter()
            .find(|(_, k, _)| k == "strategy")
            .map(|(line, _, v)| {
                v.parse::<Strategy>().map_err(|e| FedError::Parse {
                    line: *line,
                    msg: e.to_string(),
                })
            })
            .transpose()?
            .ok_or_else(|| FedError::Config("missing required key strategy".into()))?;
        let mut cfg = ExperimentConfig::new(strategy);
        // psi given explicitly for folb_het replaces the default; other strategies start without it
        let mut seen = std::collections::HashSet::new();
        for (line, key, value) in pairs {
            if !seen.insert(key.clone()) {
                return Err(FedError::Parse {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            cfg.set(&key, &value).map_err(|e| match e {
                FedError::Config(msg) => FedError::Parse { line, msg },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| FedError::Config(format!("invalid value {value:?} for {key}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(FedError::Config(format!("invalid boolean {value:?} for {key}"))),
            }
        }
        match key {
            "strategy" => self.strategy = value.parse()?,
            "devices" => self.devices = num(key, value)?,
            "clients_per_round" => self.clients_per_round = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "psi" => self.psi = if value == "none" { None } else { Some(num(key, value)?) },
            "tau" => self.tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = if value == "none" { None } else { Some(num(key, value)?) },
            "full_information" => self.full_information = flag(key, value)?,
            "weighted_objective" => self.weighted_objective = flag(key, value)?,
            "model" => self.model = value.parse()?,
            "hidden" => self.hidden = num(key, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => match &self.data {
                        DataSource::Csv(p) => DataSource::Csv(p.clone()),
                        DataSource::Synthetic => DataSource::Csv(PathBuf::new()),
                    },
                    other => return Err(FedError::Config(format!("data must be synthetic or csv, got {other:?}"))),
                }
            }
            "csv_path" => self.data = DataSource::Csv(PathBuf::from(value)),
            "label_column" => self.label_column = if value == "last" { None } else { Some(num(key, value)?) },
            "classes_per_device" => self.classes_per_device = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "iid" => self.iid = flag(key, value)?,
            "d_in" => self.d_in = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "total_samples" => self.total_samples = num(key, value)?,
            "power_law" => self.power_law = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "minibatch" => self.minibatch = num(key, value)?,
            "steps_min" => self.steps_min = num(key, value)?,
            "steps_max" => self.steps_max = num(key, value)?,
            "step_cost" => self.step_cost = num(key, value)?,
            "comm_delay_mean" => self.comm_delay_mean = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(FedError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in the text format's spelling.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("strategy", self.strategy.to_string());
        put("devices", self.devices.to_string());
        put("clients_per_round", self.clients_per_round.to_string());
        put("rounds", self.rounds.to_string());
        put("mu", self.mu.to_string());
        put("psi", self.psi.map_or("none".into(), |p| p.to_string()));
        put("tau", self.tau.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.map_or("none".into(), |s| s.to_string()));
        put("full_information", self.full_information.to_string());
        put("weighted_objective", self.weighted_objective.to_string());
        put("model", self.model.to_string());
        put("hidden", self.hidden.to_string());
        match &self.data {
            DataSource::Synthetic => put("data", "synthetic".into()),
            DataSource::Csv(p) => put("csv_path", p.display().to_string()),
        }
        put("label_column", self.label_column.map_or("last".into(), |c| c.to_string()));
        put("classes_per_device", self.classes_per_device.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("iid", self.iid.to_string());
        put("d_in", self.d_in.to_string());
        put("classes", self.classes.to_string());
        put("total_samples", self.total_samples.to_string());
        put("power_law", self.power_law.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("minibatch", self.minibatch.to_string());
        put("steps_min", self.steps_min.to_string());
        put("steps_max", self.steps_max.to_string());
        put("step_cost", self.step_cost.to_string());
        put("comm_delay_mean", self.comm_delay_mean.to_string());
        put("out_dir", self.out_dir.display().to_string());
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        Self::from_pairs(map.iter().map(|(k, v)| (0, k.clone(), v.clone())).collect())
    }
}

/// Parses a synthetic-data spec in the same `key = value` format.
///
/// Keys: `alpha`, `beta`, `iid`, `devices`, `d_in`, `classes`,
/// `total_samples`, `power_law`, `test_fraction`, `seed`.
pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| FedError::Parse { line: i + 1, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || err(format!("invalid value {value:?} for {key}"));
        match key {
            "alpha" => spec.alpha = value.parse().map_err(|_| bad())?,
            "beta" => spec.beta = value.parse().map_err(|_| bad())?,
            "iid" => spec.iid = value.parse().map_err(|_| bad())?,
            "devices" => spec.devices = value.parse().map_err(|_| bad())?,
            "d_in" => spec.d_in = value.parse().map_err(|_| bad())?,
            "classes" => spec.classes = value.parse().map_err(|_| bad())?,
            "total_samples" => spec.total_samples = value.parse().map_err(|_| bad())?,
            "power_law" => spec.power_law_exponent = value.parse().map_err(|_| bad())?,
            "test_fraction" => spec.test_fraction = value.parse().map_err(|_| bad())?,
            "seed" => spec.seed = value.parse().map_err(|_| bad())?,
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}
