//! Training loops for the queue method and the FC baselines.
//!
//! One queue iteration runs, in order: extractor forward on the query
//! samples, generator forward on the reference samples, masked logits, loss,
//! backward, SGD on the extractor, EMA update of the generator, enqueue of
//! the freshly generated weights.

mod checkpoint;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{lr_at_step, sgd_momentum_step, OptimizerState, SgdHyper};

use crate::baseline::{fc_cosface_loss, filter_head_classes, FcHead, HeadClasses};
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate_extractor, EvalReport};
use crate::model::{extract_features, init_extractor, MlpParams, ParamKind};
use crate::numerics::{Tape, Tensor};
use crate::queue::{dcq_cosface_loss, dcq_logits_with_mask, ClassQueue, EmaGenerator};
use crate::synthdata::{
    assign_longtail_counts, build_eval_protocol, build_universe_with_reserved, make_pair_batch,
    EvalProtocol, IdentityUniverse, PairBatch, Population, SamplerState,
};

/// One row of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ver_acc: f64,
    pub id_rank1: f64,
    pub wall_seconds: f64,
}

/// Method-specific head state.
#[derive(Clone, Debug)]
pub enum HeadState {
    Queue {
        generator: EmaGenerator,
        queue: ClassQueue,
    },
    Fc {
        head: FcHead,
        velocity: OptimizerState,
        /// Present for the head-only baseline.
        classes: Option<HeadClasses>,
    },
}

/// What one iteration did, for inspection in tests.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub loss: f64,
    pub labels: Vec<usize>,
    /// Generated positive weights (queue method only).
    pub w_pos: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    universe: IdentityUniverse,
    counts: Vec<usize>,
    population: Population,
    extractor: MlpParams,
    velocity: OptimizerState,
    head: HeadState,
    sampler: SamplerState,
    epoch: usize,
    step: u64,
    eval: Option<(EvalProtocol, Tensor)>,
}

fn decay_mask(params: &MlpParams) -> Vec<bool> {
    params.kinds().into_iter().map(|k| k == ParamKind::Weight).collect()
}

impl Trainer {
    /// Builds the universe and counts described by `config.data`.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let d = &config.data;
        let universe = build_universe_with_reserved(
            d.classes,
            d.reserved.unwrap_or(d.classes),
            d.d_in,
            d.sigma,
            config.data_seed(),
        )?;
        let counts = assign_longtail_counts(&d.longtail(), d.classes)?;
        Self::new(&config, universe, counts)
    }

    pub fn new(config: &RunConfig, universe: IdentityUniverse, counts: Vec<usize>) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        if counts.len() != universe.classes() {
            return Err(Error::config(format!(
                "{} counts for {} identities",
                counts.len(),
                universe.classes()
            )));
        }
        if config.data.d_in != universe.d_in() {
            return Err(Error::config("config d_in differs from the universe"));
        }
        let t = &config.train;
        let extractor = init_extractor(&config.layer_dims(), t.seed)?;
        let velocity = OptimizerState::zeros_like(extractor.tensors());
        let (head, population) = match t.method {
            Method::Dcq => (
                HeadState::Queue {
                    generator: EmaGenerator::new(&extractor, t.alpha)?,
                    queue: ClassQueue::new(t.queue_size, extractor.embed_dim())?,
                },
                Population::all(&counts),
            ),
            Method::CosfaceFull | Method::CosfaceHeadOnly => {
                let (classes, population) = if t.method == Method::CosfaceHeadOnly {
                    let hc = filter_head_classes(&counts, t.min_instances)?;
                    let pop = Population::subset(&counts, hc.retained.clone());
                    (Some(hc), pop)
                } else {
                    (None, Population::all(&counts))
                };
                let head = FcHead::init(extractor.embed_dim(), population.len(), t.seed)?;
                let velocity = OptimizerState::zeros_like([&head.weight]);
                (
                    HeadState::Fc {
                        head,
                        velocity,
                        classes,
                    },
                    population,
                )
            }
        };
        let eval = if config.eval.interval > 0 {
            let e = &config.eval;
            let protocol = build_eval_protocol(
                &universe,
                e.pairs,
                e.probes,
                e.distractors,
                eval_protocol_seed(&config),
            )?;
            let inputs = protocol.inputs(&universe)?;
            Some((protocol, inputs))
        } else {
            None
        };
        Ok(Self {
            sampler: SamplerState::new(t.seed),
            config,
            universe,
            counts,
            population,
            extractor,
            velocity,
            head,
            epoch: 0,
            step: 0,
            eval,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn universe(&self) -> &IdentityUniverse {
        &self.universe
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn extractor(&self) -> &MlpParams {
        &self.extractor
    }

    pub fn head(&self) -> &HeadState {
        &self.head
    }

    pub fn queue(&self) -> Option<&ClassQueue> {
        match &self.head {
            HeadState::Queue { queue, .. } => Some(queue),
            HeadState::Fc { .. } => None,
        }
    }

    pub fn generator(&self) -> Option<&EmaGenerator> {
        match &self.head {
            HeadState::Queue { generator, .. } => Some(generator),
            HeadState::Fc { .. } => None,
        }
    }

    /// Every momentum buffer the optimizer holds.
    pub fn optimizer_buffers(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.velocity.velocity.iter().collect();
        if let HeadState::Fc { velocity, .. } = &self.head {
            v.extend(velocity.velocity.iter());
        }
        v
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.population.total_instances().div_ceil(self.config.train.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        let t = &self.config.train;
        make_pair_batch(
            &self.universe,
            &self.population,
            t.batch_size,
            t.sampling,
            &mut self.sampler,
        )
    }

    /// One optimization step at learning rate `lr`.
    pub fn step(&mut self, lr: f64) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let t = self.config.train.clone();
        let hyper = SgdHyper {
            lr,
            momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
        };
        let mut tape = Tape::new();
        let x = tape.constant(batch.x_t.clone());
        let (f, vars) = extract_features(&self.extractor, x, &mut tape)?;

        let record = match &mut self.head {
            HeadState::Queue { generator, queue } => {
                let w = generator.generate_class_weights(&batch.x_w)?;
                let logits = dcq_logits_with_mask(&mut tape, f, &w, queue, &batch.y)?;
                let (loss, diag) =
                    dcq_cosface_loss(&mut tape, logits.l_pos, logits.l_neg, t.scale(), t.margin())?;
                check_finite(diag.loss, self.step, &batch)?;
                let grads = tape.backward(loss)?;
                let g = vars.grads(&grads, &self.extractor);
                let mask = decay_mask(&self.extractor);
                sgd_momentum_step(self.extractor.tensors_mut(), &g, &mut self.velocity, hyper, &mask)?;
                generator.ema_update(&self.extractor)?;
                queue.enqueue(&w, &batch.y)?;
                StepRecord {
                    loss: diag.loss,
                    labels: batch.y.clone(),
                    w_pos: Some(w),
                }
            }
            HeadState::Fc {
                head,
                velocity,
                classes,
            } => {
                let y: Vec<usize> = match classes {
                    Some(hc) => batch
                        .y
                        .iter()
                        .map(|&id| hc.dense(id).expect("sampled from retained classes"))
                        .collect(),
                    None => batch.y.clone(),
                };
                let w = tape.param(head.weight.clone());
                let out = fc_cosface_loss(&mut tape, f, w, &y, t.scale(), t.margin())?;
                check_finite(out.diagnostics.loss, self.step, &batch)?;
                let grads = tape.backward(out.loss)?;
                let g = vars.grads(&grads, &self.extractor);
                let mask = decay_mask(&self.extractor);
                sgd_momentum_step(self.extractor.tensors_mut(), &g, &mut self.velocity, hyper, &mask)?;
                let gw = grads.get_or_zeros(w, &head.weight);
                sgd_momentum_step(vec![&mut head.weight], &[gw], velocity, hyper, &[true])?;
                StepRecord {
                    loss: out.diagnostics.loss,
                    labels: y,
                    w_pos: None,
                }
            }
        };
        self.step += 1;
        Ok(record)
    }

    /// Scores the current extractor on the evaluation protocol, if enabled.
    pub fn evaluate(&self) -> Result<Option<EvalReport>> {
        match &self.eval {
            Some((protocol, inputs)) => Ok(Some(evaluate_extractor(
                &self.extractor,
                inputs,
                protocol,
                &self.counts,
            )?)),
            None => Ok(None),
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.is_finished() {
            return Err(Error::contract("all configured epochs already ran"));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = lr_at_step(&self.config.train, epoch);
        let iters = self.iterations_per_epoch();
        let mut total = 0.0;
        for _ in 0..iters {
            total += self.step(lr)?.loss;
        }
        self.epoch += 1;
        let interval = self.config.eval.interval;
        let due = interval > 0 && (self.epoch.is_multiple_of(interval) || self.is_finished());
        let report = if due { self.evaluate()? } else { None };
        let wall = if self.config.train.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        Ok(EpochMetrics {
            epoch,
            lr,
            train_loss: total / iters as f64,
            ver_acc: report.map_or(f64::NAN, |r| r.ver_acc),
            id_rank1: report.map_or(f64::NAN, |r| r.id_rank1),
            wall_seconds: wall,
        })
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::new();
        while !self.is_finished() {
            rows.push(self.run_epoch()?);
        }
        Ok(rows)
    }
}

/// Seed of the evaluation protocol a config trains against.
pub fn eval_protocol_seed(config: &RunConfig) -> u64 {
    config.data_seed() ^ 0x5eed_e7a1
}

fn check_finite(loss: f64, step: u64, batch: &PairBatch) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "loss {loss} at step {step}; labels {:?}; query rows finite: {}; reference rows finite: {}; first query row {:?}",
        batch.y,
        batch.x_t.is_finite(),
        batch.x_w.is_finite(),
        batch.x_t.row(0)
    )))
}

/// Result of [`run_training`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
}

pub fn run_training(
    config: &RunConfig,
    universe: IdentityUniverse,
    counts: Vec<usize>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, universe, counts)?;
    let metrics = trainer.run()?;
    Ok(TrainOutcome { trainer, metrics })
}
