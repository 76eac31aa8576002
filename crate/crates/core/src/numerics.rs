//! Dense vector arithmetic, softmax and seeded sampling.
//!
//! Every reduction here accumulates in ascending index order so that two runs
//! with the same inputs produce bitwise-identical results.

use std::ops::{Deref, Index};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Flat parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> f64 {
        l2_norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        debug_assert_eq!(self.len(), x.len());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.0.iter_mut() {
            *s *= alpha;
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(FedError::Dimension {
                expected,
                got: self.len(),
            })
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FedError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm_sq(a: &[f64]) -> f64 {
    dot_unchecked(a, a)
}

/// Numerically stable softmax (max subtraction). Panics on empty input.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Replaces `z` by its softmax and returns log-sum-exp of the original values.
pub(crate) fn softmax_in_place(z: &mut [f64]) -> f64 {
    assert!(!z.is_empty(), "softmax of empty input");
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer, used to fold structured stream ids into one word.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named role of a random stream, so unrelated consumers never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Data = 1,
    Partition = 2,
    Init = 3,
    Delay = 4,
    StepBudget = 5,
    Minibatch = 6,
    Selection = 7,
    SecondSelection = 8,
    Probe = 9,
    Replay = 10,
    Oracle = 11,
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 keyed with `seed` (expanded through `seed_from_u64`) and
/// its native 64-bit stream selector set to `stream`. The same pair always
/// yields the same sequence, independent of which thread consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Stream for a `(role, entity, round)` triple, e.g. device 7's step budget in round 12.
    pub fn keyed(seed: u64, role: StreamRole, entity: u64, round: u64) -> Self {
        let stream = mix64(mix64(mix64(role as u64) ^ entity) ^ round.wrapping_mul(GOLDEN));
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Checks that `p` is a probability vector (nonnegative, finite, sums to 1 within 1e-9).
pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(FedError::Distribution("empty probability vector".into()));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(FedError::Distribution(format!("invalid entry {bad}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(FedError::Distribution(format!("entries sum to {total}")));
    }
    Ok(())
}

/// Draws `count` indices i.i.d. from `p` by CDF inversion (with replacement).
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    validate_distribution(p)?;
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in p {
        acc += v;
        cdf.push(acc);
    }
    // Rounding can leave the last cumulative value just below u.
    let last_positive = p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * acc;
        let idx = cdf.partition_point(|c| *c <= u);
        out.push(idx.min(last_positive));
    }
    Ok(out)
}
