use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Momentum buffers, one per optimized tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn bytes(&self, bytes_per_float: usize) -> usize {
        self.velocity.iter().map(|v| v.len() * bytes_per_float).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `g' = g + wd·θ; v ← μ·v + g'; θ ← θ − lr·v`.
///
/// `decay[i] == false` exempts tensor `i` from weight decay.
pub fn sgd_momentum_step(
    params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    hyper: SgdHyper,
    decay: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() || params.len() != decay.len() {
        return Err(Error::contract(format!(
            "sgd got {} params, {} grads, {} buffers, {} decay flags",
            params.len(),
            grads.len(),
            state.velocity.len(),
            decay.len()
        )));
    }
    for (((p, g), v), &wd_on) in params.into_iter().zip(grads).zip(&mut state.velocity).zip(decay) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_momentum_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let wd = if wd_on { hyper.weight_decay } else { 0.0 };
        for ((th, &gr), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g2 = gr + wd * *th;
            *vel = hyper.momentum * *vel + g2;
            *th -= hyper.lr * *vel;
        }
    }
    Ok(())
}

/// Step-decayed learning rate for a zero-based epoch.
pub fn lr_at_step(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr0() * config.decay_factor.powi(decays as i32)
}
