//! Loss models with analytic gradients, the proximal local objective and a
//! central finite-difference gradient oracle.
//!
//! Parameter layout is row-major `[W, b]` per layer:
//!
//! * `mlr`:  `W (C x d_in)`, `b (C)`
//! * `mlp1`: `W1 (H x d_in)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`, tanh hidden units
//!
//! Losses are mean cross-entropy over the dataset, with no built-in regularizer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::numerics::{argmax, dot_unchecked, softmax_in_place, ParamVector, RngStream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlr,
    Mlp1,
}

impl std::str::FromStr for ModelKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlr" => Ok(ModelKind::Mlr),
            "mlp1" | "mlp" => Ok(ModelKind::Mlp1),
            other => Err(FedError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mlr => "mlr",
            ModelKind::Mlp1 => "mlp1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: ModelKind,
    pub d_in: usize,
    pub classes: usize,
    /// Hidden width; ignored for `mlr`.
    pub hidden: usize,
}

impl LossModel {
    pub fn mlr(d_in: usize, classes: usize) -> Self {
        LossModel {
            kind: ModelKind::Mlr,
            d_in,
            classes,
            hidden: 0,
        }
    }

    pub fn mlp1(d_in: usize, hidden: usize, classes: usize) -> Self {
        LossModel {
            kind: ModelKind::Mlp1,
            d_in,
            classes,
            hidden,
        }
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            ModelKind::Mlr => self.classes * self.d_in + self.classes,
            ModelKind::Mlp1 => self.hidden * self.d_in + self.hidden + self.classes * self.hidden + self.classes,
        }
    }

    /// Zeros for `mlr`; for `mlp1`, Gaussian weights scaled by `1/sqrt(fan_in)` and zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut w = ParamVector::zeros(self.num_params());
        if self.kind == ModelKind::Mlp1 {
            let mut rng = RngStream::keyed(seed, StreamRole::Init, 0, 0).rng();
            let (h, d, c) = (self.hidden, self.d_in, self.classes);
            let v = w.as_mut_slice();
            let s1 = 1.0 / (d as f64).sqrt();
            for x in &mut v[..h * d] {
                *x = s1 * rng.sample::<f64, _>(StandardNormal);
            }
            let off = h * d + h;
            let s2 = 1.0 / (h as f64).sqrt();
            for x in &mut v[off..off + c * h] {
                *x = s2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    fn check(&self, w: &[f64], data: &Dataset) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(FedError::Dimension {
                expected: self.num_params(),
                got: w.len(),
            });
        }
        if data.is_empty() {
            return Err(FedError::EmptyData);
        }
        if data.d_in != self.d_in {
            return Err(FedError::Dimension {
                expected: self.d_in,
                got: data.d_in,
            });
        }
        if let Some(&label) = data.labels.iter().find(|&&y| y >= self.classes) {
            return Err(FedError::Label {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Writes the class logits for sample `x` into `logits`; `hidden` receives tanh activations for mlp1.
    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, c) = (self.d_in, self.classes);
        match self.kind {
            ModelKind::Mlr => {
                let bias = &w[c * d..];
                for k in 0..c {
                    logits[k] = bias[k] + dot_unchecked(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp1 => {
                let h = self.hidden;
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot_unchecked(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    logits[k] = b2[k] + dot_unchecked(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    /// Mean loss and (optionally) its gradient over `indices` (all rows when `None`).
    pub fn loss_and_grad_on(
        &self,
        w: &[f64],
        data: &Dataset,
        indices: Option<&[usize]>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check(w, data)?;
        let n = indices.map_or(data.len(), |i| i.len());
        if n == 0 {
            return Err(FedError::EmptyData);
        }
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let (d, c, h) = (self.d_in, self.classes, self.hidden);
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let mut total = 0.0;
        for t in 0..n {
            let i = indices.map_or(t, |idx| idx[t]);
            let x = data.row(i);
            let y = data.labels[i];
            self.forward(w, x, &mut hidden, &mut logits);
            let z_y = logits[y];
            let lse = softmax_in_place(&mut logits);
            total += lse - z_y;
            let Some(g) = grad.as_deref_mut() else { continue };
            // logits now holds softmax(z); dL/dz = p - onehot(y)
            logits[y] -= 1.0;
            let dz = &logits;
            match self.kind {
                ModelKind::Mlr => {
                    let (gw, gb) = g.split_at_mut(c * d);
                    for k in 0..c {
                        let row = &mut gw[k * d..(k + 1) * d];
                        for j in 0..d {
                            row[j] += dz[k] * x[j];
                        }
                        gb[k] += dz[k];
                    }
                }
                ModelKind::Mlp1 => {
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    let w2 = &w[h * d + h..h * d + h + c * h];
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let row = &mut gw2[k * h..(k + 1) * h];
                        for j in 0..h {
                            row[j] += dz[k] * hidden[j];
                            dhidden[j] += dz[k] * w2[k * h + j];
                        }
                        gb2[k] += dz[k];
                    }
                    for j in 0..h {
                        let da = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                        let row = &mut gw1[j * d..(j + 1) * d];
                        for m in 0..d {
                            row[m] += da * x[m];
                        }
                        gb1[j] += da;
                    }
                }
            }
        }
        let inv = 1.0 / n as f64;
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(total * inv)
    }

    pub fn loss(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        self.loss_and_grad_on(w, data, None, None)
    }

    pub fn gradient(&self, w: &ParamVector, data: &Dataset) -> Result<ParamVector> {
        Ok(self.loss_and_gradient(w, data)?.1)
    }

    pub fn loss_and_gradient(&self, w: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
        let mut g = ParamVector::zeros(self.num_params());
        let f = self.loss_and_grad_on(w, data, None, Some(g.as_mut_slice()))?;
        Ok((f, g))
    }

    /// Fraction of argmax-correct predictions (ties to the lowest class).
    pub fn accuracy(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        self.check(w, data)?;
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.forward(w, data.row(i), &mut hidden, &mut logits);
            if argmax(&logits) == data.labels[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// `h(w) = F(w) + (mu/2) ||w - center||^2`.
#[derive(Debug, Clone)]
pub struct ProximalObjective<'a> {
    pub base: &'a LossModel,
    pub center: &'a ParamVector,
    pub mu: f64,
}

impl ProximalObjective<'_> {
    /// Adds the proximal term to a base `(value, gradient)` pair evaluated at `w`.
    pub fn add_proximal(&self, w: &[f64], value: f64, grad: &mut [f64]) -> f64 {
        let mut sq = 0.0;
        for ((g, wi), ci) in grad.iter_mut().zip(w).zip(self.center.iter()) {
            let diff = wi - ci;
            sq += diff * diff;
            *g += self.mu * diff;
        }
        value + 0.5 * self.mu * sq
    }

    pub fn loss_gradient(&self, w: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
        w.check_len(self.center.len())?;
        let (f, mut g) = self.base.loss_and_gradient(w, data)?;
        let v = self.add_proximal(w, f, g.as_mut_slice());
        Ok((v, g))
    }
}

/// Central differences `(f(w + h e_i) - f(w - h e_i)) / 2h` for every coordinate.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, w: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn finite_diff_gradient(model: &LossModel, w: &ParamVector, data: &Dataset, h: f64) -> Result<ParamVector> {
    model.check(w, data)?;
    Ok(ParamVector::from_vec(finite_diff(
        |p| model.loss_and_grad_on(p, data, None, None).expect("validated above"),
        w,
        h,
    )))
}

const CKPT_MAGIC: &[u8; 4] = b"FSCK";

/// Checkpoint layout (little-endian): magic "FSCK" | kind u8 (0 mlr, 1 mlp1)
/// | d_in u64 | C u64 | H u64 | count u64 | count x f64.
pub fn write_checkpoint<W: Write>(model: &LossModel, w: &ParamVector, out: &mut W) -> std::io::Result<()> {
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&[match model.kind {
        ModelKind::Mlr => 0u8,
        ModelKind::Mlp1 => 1u8,
    }])?;
    for v in [model.d_in, model.classes, model.hidden, w.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in w.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(LossModel, ParamVector)> {
    let fmt = |e: std::io::Error| FedError::Format(e.to_string());
    let mut head = [0u8; 5];
    input.read_exact(&mut head).map_err(fmt)?;
    if &head[..4] != CKPT_MAGIC {
        return Err(FedError::Format("not a checkpoint".into()));
    }
    let kind = match head[4] {
        0 => ModelKind::Mlr,
        1 => ModelKind::Mlp1,
        k => return Err(FedError::Format(format!("unknown model kind tag {k}"))),
    };
    let mut words = [0usize; 4];
    for slot in words.iter_mut() {
        let mut b = [0u8; 8];
        input.read_exact(&mut b).map_err(fmt)?;
        *slot = u64::from_le_bytes(b) as usize;
    }
    let model = LossModel {
        kind,
        d_in: words[0],
        classes: words[1],
        hidden: if kind == ModelKind::Mlr { 0 } else { words[2] },
    };
    if words[3] != model.num_params() {
        return Err(FedError::Format(format!(
            "checkpoint holds {} values, layout needs {}",
            words[3],
            model.num_params()
        )));
    }
    let mut values = Vec::with_capacity(words[3]);
    let mut b = [0u8; 8];
    for _ in 0..words[3] {
        input.read_exact(&mut b).map_err(fmt)?;
        values.push(f64::from_le_bytes(b));
    }
    Ok((model, ParamVector::from_vec(values)))
}

pub fn save_checkpoint(model: &LossModel, w: &ParamVector, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(model, w, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| FedError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(LossModel, ParamVector)> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
