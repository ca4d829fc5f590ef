//! Full fully-connected CosFace head, the reference the queue is compared to.

use crate::error::{Error, Result};
use crate::numerics::{LossDiagnostics, Tape, Tensor, Var, NORM_EPS};
use crate::rng::{self, Domain};

/// Learned `D×C` class-weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHead {
    pub weight: Tensor,
}

impl FcHead {
    /// Gaussian columns scaled by `1/√D`.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::config("head needs a positive dimension and class count"));
        }
        let mut s = rng::stream(seed, Domain::Init, &[u64::MAX]);
        let scale = 1.0 / (dim as f64).sqrt();
        let data = rng::gaussian_vec(&mut s, dim * classes)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Ok(Self {
            weight: Tensor::new(vec![dim, classes], data)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Tape handles of one [`fc_cosface_loss`] evaluation.
#[derive(Clone, Debug)]
pub struct FcLoss {
    pub loss: Var,
    pub f_hat: Var,
    /// Column-normalized head, `D×C`.
    pub w_hat: Var,
    /// `B×C` cosines before margin and scale.
    pub cos: Var,
    pub diagnostics: LossDiagnostics,
}

/// CosFace over every class: `s·(cos − m·onehot(y))` into softmax cross
/// entropy. Gradients reach both `f` and `weight`.
pub fn fc_cosface_loss(
    tape: &mut Tape,
    f: Var,
    weight: Var,
    y: &[usize],
    scale: f64,
    margin: f64,
) -> Result<FcLoss> {
    if !(scale > 0.0) || !(margin >= 0.0) {
        return Err(Error::config(format!(
            "need scale > 0 and margin >= 0, got s={scale} m={margin}"
        )));
    }
    let f_hat = tape.l2_normalize_rows(f, NORM_EPS);
    let wt = tape.transpose(weight)?;
    let wt_hat = tape.l2_normalize_rows(wt, NORM_EPS);
    let w_hat = tape.transpose(wt_hat)?;
    let cos = tape.matmul(f_hat, w_hat)?;
    let shifted = tape.margin_at(cos, y, margin)?;
    let logits = tape.scale(shifted, scale);
    let (loss, diagnostics) = tape.softmax_cross_entropy(logits, y)?;
    Ok(FcLoss {
        loss,
        f_hat,
        w_hat,
        cos,
        diagnostics,
    })
}

/// Classes kept by a head-only baseline and the dense relabeling.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadClasses {
    /// Original identity of each dense label.
    pub retained: Vec<usize>,
    /// Dense label of each original identity, if retained.
    pub remap: Vec<Option<usize>>,
}

impl HeadClasses {
    pub fn dense(&self, identity: usize) -> Option<usize> {
        self.remap.get(identity).copied().flatten()
    }

    pub fn retained_fraction(&self) -> f64 {
        self.retained.len() as f64 / self.remap.len().max(1) as f64
    }
}

/// Keeps classes with at least `min_instances` instances.
pub fn filter_head_classes(counts: &[usize], min_instances: usize) -> Result<HeadClasses> {
    if min_instances == 0 {
        return Err(Error::config("min_instances must be >= 1"));
    }
    let mut retained = Vec::new();
    let remap = counts
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            (c >= min_instances).then(|| {
                retained.push(id);
                retained.len() - 1
            })
        })
        .collect();
    if retained.is_empty() {
        return Err(Error::config(format!(
            "no class has at least {min_instances} instances"
        )));
    }
    Ok(HeadClasses { retained, remap })
}
