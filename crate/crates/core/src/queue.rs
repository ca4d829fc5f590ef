//! Dynamic class queue.
//!
//! Class weights are not learned. A shadow copy of the extractor (kept as an
//! exponential moving average of its parameters) embeds a reference sample
//! of each batch identity, and the normalized embedding serves as that
//! identity's class weight. Weights from recent batches stay in a FIFO ring
//! and act as negatives for the margin softmax, with queue entries of the
//! sample's own class (or never-written slots) masked out.

use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::numerics::{LossDiagnostics, Tape, Tensor, Var, NORM_EPS};

/// Logit written into masked queue slots before scaling.
pub const MASK_VALUE: f64 = -1e9;

/// Label of a queue slot that has never been written.
pub const SENTINEL: i64 = -1;

/// Shadow extractor used as the class-weight generator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaGenerator {
    shadow: MlpParams,
    alpha: f64,
}

impl EmaGenerator {
    /// Starts as an exact copy of `extractor`.
    pub fn new(extractor: &MlpParams, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("EMA momentum must lie in [0, 1], got {alpha}")));
        }
        Ok(Self {
            shadow: extractor.clone(),
            alpha,
        })
    }

    pub fn from_parts(shadow: MlpParams, alpha: f64) -> Result<Self> {
        let mut g = Self::new(&shadow, alpha)?;
        g.shadow = shadow;
        Ok(g)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shadow(&self) -> &MlpParams {
        &self.shadow
    }

    /// `shadow ← α·shadow + (1 − α)·extractor`, elementwise.
    pub fn ema_update(&mut self, extractor: &MlpParams) -> Result<()> {
        if !self.shadow.same_shapes(extractor) {
            return Err(Error::contract(format!(
                "generator shapes {:?} differ from extractor {:?}",
                self.shadow.dims(),
                extractor.dims()
            )));
        }
        let a = self.alpha;
        let b = 1.0 - a;
        for (s, p) in self.shadow.tensors_mut().into_iter().zip(extractor.tensors()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = a * *sv + b * pv;
            }
        }
        Ok(())
    }

    /// Row-normalized shadow embeddings of `x_w`. Computed off-tape, so the
    /// result carries no gradient.
    pub fn generate_class_weights(&self, x_w: &Tensor) -> Result<Tensor> {
        Ok(self.shadow.forward(x_w)?.l2_normalize_rows(NORM_EPS))
    }
}

/// Ring of `K` unit-norm class weights (`D×K`, one column per slot) and their
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassQueue {
    weights: Tensor,
    labels: Vec<i64>,
    cursor: usize,
}

impl ClassQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            weights: Tensor::zeros(&[dim, capacity]),
            labels: vec![SENTINEL; capacity],
            cursor: 0,
        })
    }

    pub fn from_parts(weights: Tensor, labels: Vec<i64>, cursor: usize) -> Result<Self> {
        if weights.shape().len() != 2 || weights.cols() != labels.len() || cursor >= labels.len() {
            return Err(Error::contract(format!(
                "inconsistent queue parts: weights {:?}, {} labels, cursor {cursor}",
                weights.shape(),
                labels.len()
            )));
        }
        Ok(Self {
            weights,
            labels,
            cursor,
        })
    }

    pub fn capacity(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    /// `D×K` weight matrix.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn column(&self, slot: usize) -> Vec<f64> {
        self.weights.column(slot)
    }

    pub fn filled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != SENTINEL).count()
    }

    /// Overwrites the `B` oldest slots with the rows of `w` and labels `y`.
    pub fn enqueue(&mut self, w: &Tensor, y: &[usize]) -> Result<()> {
        let b = w.rows();
        if b > self.capacity() {
            return Err(Error::config(format!(
                "batch of {b} does not fit a queue of {}",
                self.capacity()
            )));
        }
        if w.cols() != self.dim() || y.len() != b {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: w.shape().to_vec(),
                rhs: vec![y.len(), self.dim()],
            });
        }
        let k = self.capacity();
        for (r, &label) in y.iter().enumerate() {
            let slot = self.cursor;
            for (d, &v) in w.row(r).iter().enumerate() {
                self.weights.set(d, slot, v);
            }
            self.labels[slot] = label as i64;
            self.cursor = (self.cursor + 1) % k;
        }
        Ok(())
    }

    /// Stored labels from oldest to newest, sentinels skipped.
    pub fn labels_fifo(&self) -> Vec<i64> {
        let k = self.capacity();
        (0..k)
            .map(|i| self.labels[(self.cursor + i) % k])
            .filter(|&l| l != SENTINEL)
            .collect()
    }

    /// Row-major `B×K` mask: slot holds the row's own label or is unfilled.
    pub fn duplicate_mask(&self, y: &[usize]) -> Vec<bool> {
        let mut mask = Vec::with_capacity(y.len() * self.capacity());
        for &label in y {
            let label = label as i64;
            mask.extend(self.labels.iter().map(|&l| l == label || l == SENTINEL));
        }
        mask
    }
}

/// Tape handles produced by [`dcq_logits_with_mask`].
#[derive(Clone, Debug)]
pub struct DcqLogits {
    pub f_hat: Var,
    /// `B×1` cosine to the generated positive weight.
    pub l_pos: Var,
    /// `B×K` cosines to queue entries with duplicates and empty slots masked.
    pub l_neg: Var,
    pub mask: Vec<bool>,
}

/// Positive and negative cosine logits for raw features `f`.
///
/// `w_pos` and the queue enter the tape as constants, so no gradient reaches
/// them.
pub fn dcq_logits_with_mask(
    tape: &mut Tape,
    f: Var,
    w_pos: &Tensor,
    queue: &ClassQueue,
    y: &[usize],
) -> Result<DcqLogits> {
    let b = tape.value(f).rows();
    if y.len() != b {
        return Err(Error::Shape {
            op: "dcq_logits",
            lhs: tape.value(f).shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let f_hat = tape.l2_normalize_rows(f, NORM_EPS);
    let wp = tape.constant(w_pos.clone());
    let l_pos = tape.row_dot(f_hat, wp)?;
    let wq = tape.constant(queue.weights().clone());
    let raw = tape.matmul(f_hat, wq)?;
    let mask = queue.duplicate_mask(y);
    let l_neg = tape.masked_fill(raw, &mask, MASK_VALUE)?;
    Ok(DcqLogits {
        f_hat,
        l_pos,
        l_neg,
        mask,
    })
}

/// Subset CosFace loss: `s·[l_pos − m, l_neg]` with the positive at index 0.
pub fn dcq_cosface_loss(
    tape: &mut Tape,
    l_pos: Var,
    l_neg: Var,
    scale: f64,
    margin: f64,
) -> Result<(Var, LossDiagnostics)> {
    if !(scale > 0.0) {
        return Err(Error::config(format!("scale must be > 0, got {scale}")));
    }
    if !(margin >= 0.0) {
        return Err(Error::config(format!("margin must be >= 0, got {margin}")));
    }
    let shifted = tape.add_scalar(l_pos, -margin);
    let logits = tape.concat_cols(shifted, l_neg)?;
    let scaled = tape.scale(logits, scale);
    let targets = vec![0usize; tape.value(l_pos).rows()];
    tape.softmax_cross_entropy(scaled, &targets)
}
