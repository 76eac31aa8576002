//! Datasets, synthetic non-IID generation, label-skew partitioning, CSV
//! ingestion and the binary shard container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{argmax, RngStream, StreamRole};

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub d_in: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(d_in: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != d_in * labels.len() {
            return Err(FedError::Dimension {
                expected: d_in * labels.len(),
                got: features.len(),
            });
        }
        Ok(Dataset {
            d_in,
            features,
            labels,
        })
    }

    pub fn empty(d_in: usize) -> Self {
        Dataset {
            d_in,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        debug_assert_eq!(x.len(), self.d_in);
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.d_in);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Per-class counts for labels in `[0, classes)`.
    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                h[y] += 1;
            }
        }
        h
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// One device's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    pub device_id: usize,
    pub data: Dataset,
}

impl DataShard {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Device shards plus the global held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub classes: usize,
    pub shards: Vec<DataShard>,
    pub test: Dataset,
}

impl FederatedData {
    pub fn d_in(&self) -> usize {
        self.test.d_in
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.len()).collect()
    }
}

/// Parameters of the Gaussian synthetic family.
///
/// `alpha` controls how much the per-device labelling models differ and
/// `beta` how much the per-device feature means differ. `iid` ignores both and
/// shares one labelling model and one feature mean across devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub alpha: f64,
    pub beta: f64,
    pub iid: bool,
    pub devices: usize,
    pub d_in: usize,
    pub classes: usize,
    pub total_samples: usize,
    pub power_law_exponent: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            alpha: 1.0,
            beta: 1.0,
            iid: false,
            devices: 30,
            d_in: 60,
            classes: 10,
            total_samples: 10_000,
            power_law_exponent: DEFAULT_POWER_LAW,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

pub const DEFAULT_POWER_LAW: f64 = 1.2;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::Spec(m.to_string()));
        if self.devices == 0 {
            return bad("at least one device required");
        }
        if self.d_in == 0 || self.classes < 2 {
            return bad("need d_in >= 1 and at least two classes");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(self.power_law_exponent > 0.0) {
            return bad("power-law exponent must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test fraction must lie in [0, 1)");
        }
        if self.total_samples < 2 * self.devices {
            return Err(FedError::Spec(format!(
                "{} samples cannot give {} devices two samples each",
                self.total_samples, self.devices
            )));
        }
        Ok(())
    }
}

/// Splits `total` into `weights.len()` integer sizes proportional to the
/// weights, each at least `floor`, summing exactly to `total`.
fn proportional_sizes(weights: &[f64], total: usize, floor: usize) -> Vec<usize> {
    let n = weights.len();
    let spare = total - floor * n;
    let wsum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| spare as f64 * w / wsum).collect();
    let mut sizes: Vec<usize> = shares.iter().map(|s| floor + s.floor() as usize).collect();
    let mut left = total - sizes.iter().sum::<usize>();
    // Largest remainders first; ties resolved by index for determinism.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Pareto(1, exponent) weights via inverse transform.
fn power_law_weights<R: Rng>(n: usize, exponent: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            u.powf(-1.0 / exponent)
        })
        .collect()
}

/// Power-law device sizes summing to `total`, each at least 2.
pub fn power_law_sizes(devices: usize, total: usize, exponent: f64, seed: u64) -> Vec<usize> {
    let mut rng = RngStream::keyed(seed, StreamRole::Data, u64::MAX, 0).rng();
    let w = power_law_weights(devices, exponent, &mut rng);
    proportional_sizes(&w, total, 2)
}

/// Per-device labelling model: `W` is `classes x d_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelModel {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LabelModel {
    pub fn label(&self, x: &[f64]) -> usize {
        let d = x.len();
        let logits: Vec<f64> = self
            .bias
            .iter()
            .enumerate()
            .map(|(c, b)| b + crate::numerics::dot_unchecked(&self.weights[c * d..(c + 1) * d], x))
            .collect();
        // argmax of softmax(z) is argmax of z
        argmax(&logits)
    }
}

/// Output of [`generate_synthetic`] with the generating models kept for inspection.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: FederatedData,
    pub label_models: Vec<LabelModel>,
    pub feature_means: Vec<Vec<f64>>,
}

fn normal_vec<R: Rng>(len: usize, mean: f64, std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(mean, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Generates the synthetic federated dataset.
///
/// Per device: `u_k ~ N(0, alpha)`, `W_k, b_k ~ N(u_k, 1)`, `B_k ~ N(0, beta)`,
/// `v_k ~ N(B_k, 1)`, `x ~ N(v_k, diag(j^-1.2))`, `y = argmax(W_k x + b_k)`.
/// Device sizes follow a power law. A `test_fraction` share of each device's
/// samples is pooled into the global test set.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let sizes = power_law_sizes(spec.devices, spec.total_samples, spec.power_law_exponent, spec.seed);
    let d = spec.d_in;
    let c = spec.classes;
    let cov_std: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-1.2).sqrt()).collect();

    let mut shared = RngStream::keyed(spec.seed, StreamRole::Data, u64::MAX - 1, 0).rng();
    let shared_model = LabelModel {
        weights: normal_vec(c * d, 0.0, 1.0, &mut shared),
        bias: normal_vec(c, 0.0, 1.0, &mut shared),
    };
    let shared_mean = normal_vec(d, 0.0, 1.0, &mut shared);

    let mut shards = Vec::with_capacity(spec.devices);
    let mut test = Dataset::empty(d);
    let mut label_models = Vec::with_capacity(spec.devices);
    let mut feature_means = Vec::with_capacity(spec.devices);
    for (k, &n_k) in sizes.iter().enumerate() {
        let mut rng = RngStream::keyed(spec.seed, StreamRole::Data, k as u64, 0).rng();
        let (model, mean) = if spec.iid {
            (shared_model.clone(), shared_mean.clone())
        } else {
            let u_k = spec.alpha * rng.sample::<f64, _>(StandardNormal);
            let b_k = spec.beta * rng.sample::<f64, _>(StandardNormal);
            let model = LabelModel {
                weights: normal_vec(c * d, u_k, 1.0, &mut rng),
                bias: normal_vec(c, u_k, 1.0, &mut rng),
            };
            (model, normal_vec(d, b_k, 1.0, &mut rng))
        };
        let mut local = Dataset::empty(d);
        let mut x = vec![0.0; d];
        for _ in 0..n_k {
            for j in 0..d {
                x[j] = mean[j] + cov_std[j] * rng.sample::<f64, _>(StandardNormal);
            }
            let y = model.label(&x);
            local.push(&x, y);
        }
        let n_test = (spec.test_fraction * n_k as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..n_k).collect();
        idx.shuffle(&mut rng);
        let (held, kept) = idx.split_at(n_test);
        let mut kept = kept.to_vec();
        kept.sort_unstable();
        let mut held = held.to_vec();
        held.sort_unstable();
        for &i in &held {
            test.push(local.row(i), local.labels[i]);
        }
        shards.push(DataShard {
            device_id: k,
            data: local.subset(&kept),
        });
        label_models.push(model);
        feature_means.push(mean);
    }
    Ok(SyntheticData {
        data: FederatedData {
            classes: c,
            shards,
            test,
        },
        label_models,
        feature_means,
    })
}

/// Splits a dataset across `devices` so each device sees at most
/// `classes_per_device` distinct labels, with power-law sizes.
///
/// Classes are shuffled and dealt to devices cyclically; each class's samples
/// are then divided among the devices holding it in proportion to per-device
/// power-law weights (every holder gets at least one sample).
pub fn partition_by_label(
    dataset: &Dataset,
    classes: usize,
    devices: usize,
    classes_per_device: usize,
    power_law_exponent: f64,
    seed: u64,
) -> Result<Vec<DataShard>> {
    if devices == 0 {
        return Err(FedError::Partition("no devices".into()));
    }
    if classes_per_device == 0 || classes_per_device > classes {
        return Err(FedError::Partition(format!(
            "classes_per_device {classes_per_device} outside [1, {classes}]"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        if y >= classes {
            return Err(FedError::Label { label: y, classes });
        }
        by_class[y].push(i);
    }
    let mut rng = RngStream::keyed(seed, StreamRole::Partition, 0, 0).rng();
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    // Only classes that actually occur need an owner.
    order.retain(|&c| !by_class[c].is_empty());
    if order.is_empty() {
        return Err(FedError::EmptyData);
    }
    let present = order.len();
    let per_device = classes_per_device.min(present);
    if devices * per_device < present {
        return Err(FedError::Partition(format!(
            "{devices} devices x {per_device} classes cannot cover {present} classes"
        )));
    }

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for k in 0..devices {
        for j in 0..per_device {
            let c = order[(k * per_device + j) % present];
            holders[c].push(k);
        }
    }
    let weights = power_law_weights(devices, power_law_exponent, &mut rng);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); devices];
    for c in 0..classes {
        let owners = &holders[c];
        if owners.is_empty() {
            continue;
        }
        let mut members = by_class[c].clone();
        if members.len() < owners.len() {
            return Err(FedError::Partition(format!(
                "class {c} has {} samples for {} devices",
                members.len(),
                owners.len()
            )));
        }
        members.shuffle(&mut rng);
        let w: Vec<f64> = owners.iter().map(|&k| weights[k]).collect();
        let sizes = proportional_sizes(&w, members.len(), 1);
        let mut start = 0;
        for (&k, &n) in owners.iter().zip(&sizes) {
            assigned[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            DataShard {
                device_id: k,
                data: dataset.subset(&idx),
            }
        })
        .collect())
}

/// Draws a random `fraction` of the dataset as a test set; returns `(train, test)`.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n = dataset.len();
    let n_test = (fraction * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::keyed(seed, StreamRole::Partition, 1, 0).rng());
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (dataset.subset(&train), dataset.subset(&test))
}

/// Result of [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub rejected: usize,
}

impl CsvLoad {
    pub fn report(&self) -> String {
        format!("{} loaded, {} rejected", self.dataset.len(), self.rejected)
    }
}

/// Reads a numeric CSV whose `label_column` (default: last) holds nonnegative integer labels.
///
/// A first row that does not parse as numbers is treated as a header. Rows
/// with a NaN feature are dropped and counted in [`CsvLoad::rejected`].
pub fn load_csv(path: &Path, label_column: Option<usize>, classes: Option<usize>) -> Result<CsvLoad> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));
    let mut dataset: Option<Dataset> = None;
    let mut rejected = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| FedError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let values: std::result::Result<Vec<f64>, _> = record.iter().map(|f| f.parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if line == 1 => continue,
            Err(e) => {
                return Err(FedError::Parse {
                    line,
                    msg: e.to_string(),
                })
            }
        };
        let label_column = label_column.unwrap_or(values.len().saturating_sub(1));
        if label_column >= values.len() {
            return Err(FedError::Parse {
                line,
                msg: format!("label column {label_column} out of range for {} fields", values.len()),
            });
        }
        let d_in = values.len() - 1;
        let ds = dataset.get_or_insert_with(|| Dataset::empty(d_in));
        if ds.d_in != d_in {
            return Err(FedError::Parse {
                line,
                msg: format!("expected {} fields, found {}", ds.d_in + 1, values.len()),
            });
        }
        let raw = values[label_column];
        if raw.is_nan() || values.iter().any(|v| v.is_nan()) {
            rejected += 1;
            continue;
        }
        if raw < 0.0 || raw.fract() != 0.0 || !raw.is_finite() {
            return Err(FedError::Parse {
                line,
                msg: format!("label {raw} is not a nonnegative integer"),
            });
        }
        let label = raw as usize;
        if let Some(c) = classes {
            if label >= c {
                return Err(FedError::Parse {
                    line,
                    msg: format!("label {label} out of range for {c} classes"),
                });
            }
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(FedError::Parse {
                line,
                msg: "infinite feature value".into(),
            });
        }
        let features: Vec<f64> = values
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != label_column)
            .map(|(_, v)| *v)
            .collect();
        ds.push(&features, label);
    }
    let dataset = dataset.ok_or(FedError::EmptyData)?;
    if rejected > 0 {
        log::info!("{}: {} rejected", path.display(), rejected);
    }
    Ok(CsvLoad { dataset, rejected })
}

const SHARD_MAGIC: &[u8; 4] = b"FSHD";
const SHARD_VERSION: u32 = 1;

/// Binary container layout (all integers little-endian):
///
/// ```text
/// magic "FSHD" | version u32 | N u64 | d_in u64 | C u64 | has_test u8
/// N x size u64 | [test size u64 if has_test]
/// then per block (N shards, then the test set if present):
///   byte length u64 | device id u64 | n*d_in f64 | n labels u32
/// ```
pub fn write_shards<W: Write>(data: &FederatedData, out: &mut W) -> std::io::Result<()> {
    let d = data.d_in() as u64;
    out.write_all(SHARD_MAGIC)?;
    out.write_all(&SHARD_VERSION.to_le_bytes())?;
    out.write_all(&(data.shards.len() as u64).to_le_bytes())?;
    out.write_all(&d.to_le_bytes())?;
    out.write_all(&(data.classes as u64).to_le_bytes())?;
    out.write_all(&[1u8])?;
    for s in &data.shards {
        out.write_all(&(s.len() as u64).to_le_bytes())?;
    }
    out.write_all(&(data.test.len() as u64).to_le_bytes())?;
    let blocks = data
        .shards
        .iter()
        .map(|s| (s.device_id as u64, &s.data))
        .chain(std::iter::once((u64::MAX, &data.test)));
    for (id, ds) in blocks {
        let len = 8 + 8 * ds.features.len() + 4 * ds.labels.len();
        out.write_all(&(len as u64).to_le_bytes())?;
        out.write_all(&id.to_le_bytes())?;
        for v in &ds.features {
            out.write_all(&v.to_le_bytes())?;
        }
        for y in &ds.labels {
            out.write_all(&(*y as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| FedError::Format(format!("truncated container: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_shards<R: Read>(input: &mut R) -> Result<FederatedData> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| FedError::Format(e.to_string()))?;
    if &magic != SHARD_MAGIC {
        return Err(FedError::Format("not a shard container".into()));
    }
    let mut v = [0u8; 4];
    input.read_exact(&mut v).map_err(|e| FedError::Format(e.to_string()))?;
    if u32::from_le_bytes(v) != SHARD_VERSION {
        return Err(FedError::Format("unsupported container version".into()));
    }
    let n = read_u64(input)? as usize;
    let d = read_u64(input)? as usize;
    let classes = read_u64(input)? as usize;
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag).map_err(|e| FedError::Format(e.to_string()))?;
    let blocks = n + usize::from(flag[0] == 1);
    let sizes: Vec<usize> = (0..blocks).map(|_| read_u64(input).map(|s| s as usize)).collect::<Result<_>>()?;
    let mut datasets = Vec::with_capacity(blocks);
    for &size in &sizes {
        let len = read_u64(input)? as usize;
        if len != 8 + 8 * size * d + 4 * size {
            return Err(FedError::Format(format!("block length {len} disagrees with header")));
        }
        let id = read_u64(input)?;
        let mut buf = vec![0u8; len - 8];
        input.read_exact(&mut buf).map_err(|e| FedError::Format(e.to_string()))?;
        let (fb, lb) = buf.split_at(8 * size * d);
        let features = fb
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = lb
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        datasets.push((id, Dataset::new(d, features, labels)?));
    }
    let test = if flag[0] == 1 {
        datasets.pop().map(|(_, ds)| ds).unwrap_or_else(|| Dataset::empty(d))
    } else {
        Dataset::empty(d)
    };
    Ok(FederatedData {
        classes,
        shards: datasets
            .into_iter()
            .map(|(id, data)| DataShard {
                device_id: id as usize,
                data,
            })
            .collect(),
        test,
    })
}

pub fn save_shards(data: &FederatedData, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_shards(data, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| FedError::io(path, e))
}

pub fn load_shards(path: &Path) -> Result<FederatedData> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    read_shards(&mut BufReader::new(file))
}
