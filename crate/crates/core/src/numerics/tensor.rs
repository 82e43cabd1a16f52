use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EalmError, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(EalmError::usage(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rows of equal length stacked into a `[rows, cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(EalmError::usage("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix whose columns are the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(EalmError::usage(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Errors with the tensor's name if any value is NaN or infinite.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(EalmError::numeric(
                name,
                format!("non-finite value {} at flat index {}", self.data[i], i),
            )),
        }
    }

    /// Little-endian bytes of the values, used for content hashing and
    /// bitwise comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(EalmError::usage(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    logits.check_finite("softmax input")?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = logits.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| data[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                data[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Softmax of a slice in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of a slice, returned as a new vector.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Probability floor used when scoring from probabilities rather than logits.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `targets` under per-row probabilities.
///
/// `probs` is `[n, V]`; `mask[i] == true` marks row `i` as padding.
pub fn cross_entropy_probs(probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_targets(probs, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &pad)) in targets.iter().zip(mask).enumerate() {
        if pad {
            continue;
        }
        total -= probs.row(i)[t].max(PROB_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return Err(EalmError::EmptyBatch("every position is masked".into()));
    }
    Ok(total / count as f64)
}

/// Mean negative log-likelihood of `targets` under per-row logits.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_targets(logits, targets, mask)?;
    logits.check_finite("cross-entropy logits")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &pad)) in targets.iter().zip(mask).enumerate() {
        if pad {
            continue;
        }
        total -= log_softmax(logits.row(i))[t];
        count += 1;
    }
    if count == 0 {
        return Err(EalmError::EmptyBatch("every position is masked".into()));
    }
    Ok(total / count as f64)
}

pub(crate) fn check_targets(scores: &Tensor, targets: &[usize], mask: &[bool]) -> Result<()> {
    if scores.ndim() != 2 || scores.rows() != targets.len() || mask.len() != targets.len() {
        return Err(EalmError::usage(format!(
            "cross-entropy expects [n, V] scores with n targets and n mask flags; got {:?}, {} targets, {} flags",
            scores.shape(),
            targets.len(),
            mask.len()
        )));
    }
    let v = scores.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(EalmError::usage(format!(
            "target id {} outside vocabulary of {}",
            bad, v
        )));
    }
    Ok(())
}
