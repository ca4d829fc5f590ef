//! Metrics, head-cost accounting, the tail-alignment diagnostic and the
//! experiment-grid driver.

mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    cosine_distance, evaluate_embeddings, evaluate_extractor, identification_hits,
    identification_rank1, verification_accuracy, EvalReport, VerificationResult,
};

use crate::baseline::FcHead;
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::numerics::{cosine, Tensor, NORM_EPS};
use crate::synthdata::{draw_instance, IdentityUniverse, SamplingMode};
use crate::trainer::{EpochMetrics, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub class_count: u64,
    pub queue_size: u64,
    pub embed_dim: u64,
    pub batch_size: u64,
    pub head_param_bytes: u64,
    pub head_macs_per_batch: u64,
    pub optimizer_state_bytes: u64,
    /// Head parameter bytes relative to a full FC head of the same `C` and `D`.
    pub param_ratio_vs_full: f64,
}

/// Closed-form memory and compute of the classification head.
///
/// The full head stores `C·D` weights plus one momentum buffer of the same
/// size and costs `B·D·C` MACs per batch. The queue stores `K·D` generated
/// weights with no optimizer state and costs `B·D·(K+1)` MACs plus
/// `generator_macs_per_sample·B` for generating the positives.
pub fn head_cost_report(
    method: Method,
    classes: u64,
    queue_size: u64,
    dim: u64,
    batch: u64,
    bytes_per_float: u64,
    generator_macs_per_sample: u64,
) -> Result<CostReport> {
    if classes == 0 || dim == 0 || batch == 0 || bytes_per_float == 0 {
        return Err(Error::config("cost report needs positive dimensions"));
    }
    let full_bytes = classes * dim * bytes_per_float;
    let (param, macs, opt) = match method {
        Method::Dcq => {
            if queue_size == 0 {
                return Err(Error::config("queue size must be positive"));
            }
            (
                queue_size * dim * bytes_per_float,
                batch * dim * (queue_size + 1) + batch * generator_macs_per_sample,
                0,
            )
        }
        Method::CosfaceFull | Method::CosfaceHeadOnly => {
            (full_bytes, batch * dim * classes, full_bytes)
        }
    };
    Ok(CostReport {
        method,
        class_count: classes,
        queue_size,
        embed_dim: dim,
        batch_size: batch,
        head_param_bytes: param,
        head_macs_per_batch: macs,
        optimizer_state_bytes: opt,
        param_ratio_vs_full: param as f64 / full_bytes as f64,
    })
}

/// Instance-count buckets of the alignment diagnostic: `[lo, hi)`.
pub const ALIGNMENT_BUCKETS: [(usize, Option<usize>); 4] =
    [(0, Some(5)), (5, Some(10)), (10, Some(50)), (50, None)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAlignment {
    pub min_count: usize,
    pub max_count_exclusive: Option<usize>,
    pub classes: usize,
    /// `None` when the bucket holds no class.
    pub mean_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub buckets: Vec<BucketAlignment>,
    /// Per-class cosine, indexed like the head columns.
    pub per_class: Vec<f64>,
}

/// Cosine between each learned column and the mean normalized embedding of
/// that class's training instances, averaged per instance-count bucket.
///
/// Column `j` of `head` belongs to identity `class_ids[j]`.
pub fn tail_alignment_diagnostic(
    head: &FcHead,
    class_ids: &[usize],
    universe: &IdentityUniverse,
    counts: &[usize],
    extractor: &MlpParams,
) -> Result<AlignmentReport> {
    if class_ids.len() != head.classes() {
        return Err(Error::Shape {
            op: "tail_alignment",
            lhs: head.weight.shape().to_vec(),
            rhs: vec![class_ids.len()],
        });
    }
    let mut per_class = Vec::with_capacity(class_ids.len());
    for (col, &id) in class_ids.iter().enumerate() {
        let n = counts[id];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| draw_instance(universe, counts, id, i))
            .collect::<Result<_>>()?;
        let emb = extractor
            .forward(&Tensor::from_rows(&rows))?
            .l2_normalize_rows(NORM_EPS);
        let mut mean = vec![0.0; emb.cols()];
        for r in 0..emb.rows() {
            for (m, v) in mean.iter_mut().zip(emb.row(r)) {
                *m += v / n as f64;
            }
        }
        per_class.push(cosine(&head.weight.column(col), &mean).clamp(-1.0, 1.0));
    }
    let buckets = ALIGNMENT_BUCKETS
        .iter()
        .map(|&(lo, hi)| {
            let vals: Vec<f64> = class_ids
                .iter()
                .zip(&per_class)
                .filter(|(&id, _)| counts[id] >= lo && hi.is_none_or(|h| counts[id] < h))
                .map(|(_, &c)| c)
                .collect();
            BucketAlignment {
                min_count: lo,
                max_count_exclusive: hi,
                classes: vals.len(),
                mean_cosine: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            }
        })
        .collect();
    Ok(AlignmentReport { buckets, per_class })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    QueueSize,
    Alpha,
    Sampling,
    Method,
}

impl GridAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "K" | "queue_size" => Ok(GridAxis::QueueSize),
            "alpha" => Ok(GridAxis::Alpha),
            "sampling" => Ok(GridAxis::Sampling),
            "method" => Ok(GridAxis::Method),
            other => Err(Error::config(format!(
                "invalid grid axis {other:?}; expected K, alpha, sampling or method"
            ))),
        }
    }

    fn apply(self, config: &mut RunConfig, value: &str) -> Result<()> {
        let bad = |v: &str| Error::config(format!("bad value {v:?} for axis {self:?}"));
        match self {
            GridAxis::QueueSize => config.train.queue_size = value.parse().map_err(|_| bad(value))?,
            GridAxis::Alpha => config.train.alpha = value.parse().map_err(|_| bad(value))?,
            GridAxis::Sampling => {
                config.train.sampling = match value {
                    "instance" => SamplingMode::Instance,
                    "class" => SamplingMode::Class,
                    _ => return Err(bad(value)),
                }
            }
            GridAxis::Method => {
                config.train.method = Method::parse(value)?;
                // method-dependent defaults must follow the new method
                config.train.scale = None;
                config.train.margin = None;
                config.train.lr0 = None;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: String,
    pub ver_acc: f64,
    pub id_rank1: f64,
    pub tail_rank1: f64,
    pub curves: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub axis: GridAxis,
    pub base_config: RunConfig,
    pub rows: Vec<GridRow>,
}

/// The config a grid cell trains with.
pub fn grid_cell_config(base: &RunConfig, axis: GridAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    axis.apply(&mut cfg, value)?;
    if cfg.eval.interval == 0 {
        cfg.eval.interval = cfg.train.epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one model per value with the base seed and data. Cells run in
/// parallel; row order follows `values`.
pub fn run_experiment_grid(base: &RunConfig, axis: GridAxis, values: &[String]) -> Result<GridReport> {
    let configs = values
        .iter()
        .map(|v| grid_cell_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, value)| {
            let mut trainer = Trainer::from_config(cfg)?;
            let curves = trainer.run()?;
            let report = trainer
                .evaluate()?
                .ok_or_else(|| Error::contract("grid cell ran without evaluation"))?;
            Ok(GridRow {
                value: value.clone(),
                ver_acc: report.ver_acc,
                id_rank1: report.id_rank1,
                tail_rank1: report.tail_rank1,
                curves,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridReport {
        axis,
        base_config: base.clone(),
        rows,
    })
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,ver_acc,id_rank1,tail_rank1,final_train_loss\n");
        for r in &self.rows {
            let last = r.curves.last().map_or(f64::NAN, |m| m.train_loss);
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.value, r.ver_acc, r.id_rank1, r.tail_rank1, last
            ));
        }
        s
    }
}
