//! Randomized finite-difference checks of both training losses end to end,
//! extractor included.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::fc_cosface_loss;
use crate::error::Result;
use crate::model::{extract_features, init_extractor, MlpParams};
use crate::numerics::{finite_difference_check, Tape, Tensor, NORM_EPS};
use crate::queue::{dcq_cosface_loss, dcq_logits_with_mask, ClassQueue};
use crate::rng::{self, Domain};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-5;

/// One randomized problem: a small extractor, a batch, a partly filled queue
/// and an FC head.
#[derive(Clone, Debug)]
pub struct GradProblem {
    pub extractor: MlpParams,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub w_pos: Tensor,
    pub queue: ClassQueue,
    pub head: Tensor,
    pub scale: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub case: usize,
    pub dims: Vec<usize>,
    pub batch: usize,
    pub queue_size: usize,
    pub scale: f64,
    pub margin: f64,
    pub dcq_max_rel_error: f64,
    pub fc_max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.dcq_max_rel_error <= MAX_RELATIVE_ERROR && self.fc_max_rel_error <= MAX_RELATIVE_ERROR
    }
}

/// At most 3 layers, `D ≤ 8`, `B ≤ 4`, `K ≤ 6`.
pub fn random_problem(seed: u64, case: usize) -> Result<GradProblem> {
    let mut r = rng::stream(seed, Domain::Test, &[case as u64]);
    let d_in = r.random_range(2..=6);
    let n_hidden = r.random_range(1..=2);
    let mut dims = vec![d_in];
    for _ in 0..n_hidden {
        dims.push(r.random_range(2..=8));
    }
    let embed = r.random_range(2..=8);
    dims.push(embed);
    let extractor = init_extractor(&dims, r.random())?;
    let batch = r.random_range(1..=4);
    let k = r.random_range(batch..=6);
    let classes = 5;
    let x = Tensor::new(vec![batch, d_in], rng::gaussian_vec(&mut r, batch * d_in))?;
    let y: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let unit = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Result<Tensor> {
        Ok(Tensor::new(vec![n, embed], rng::gaussian_vec(r, n * embed))?.l2_normalize_rows(NORM_EPS))
    };
    let w_pos = unit(&mut r, batch)?;
    let mut queue = ClassQueue::new(k, embed)?;
    // leave some slots empty so the sentinel mask is exercised
    let fill = r.random_range(1..=k);
    let w = unit(&mut r, fill)?;
    let labels: Vec<usize> = (0..fill).map(|_| r.random_range(0..classes)).collect();
    queue.enqueue(&w, &labels)?;
    let head = Tensor::new(vec![embed, classes], rng::gaussian_vec(&mut r, embed * classes))?;
    Ok(GradProblem {
        extractor,
        x,
        y,
        w_pos,
        queue,
        head,
        scale: r.random_range(1.0..8.0),
        margin: r.random_range(0.0..0.5),
    })
}

impl GradProblem {
    pub fn dcq_loss(&self, extractor: &MlpParams) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let (f, vars) = extract_features(extractor, x, &mut tape)?;
        let lg = dcq_logits_with_mask(&mut tape, f, &self.w_pos, &self.queue, &self.y)?;
        let (loss, _) = dcq_cosface_loss(&mut tape, lg.l_pos, lg.l_neg, self.scale, self.margin)?;
        let grads = tape.backward(loss)?;
        let g = vars
            .grads(&grads, extractor)
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect();
        Ok((tape.value(loss).data()[0], g))
    }

    /// Loss and gradient over `[extractor params…, head]`.
    pub fn fc_loss(&self, extractor: &MlpParams, head: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(self.x.clone());
        let (f, vars) = extract_features(extractor, x, &mut tape)?;
        let w = tape.param(head.clone());
        let out = fc_cosface_loss(&mut tape, f, w, &self.y, self.scale, self.margin)?;
        let grads = tape.backward(out.loss)?;
        let mut g: Vec<f64> = vars
            .grads(&grads, extractor)
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect();
        g.extend(grads.get_or_zeros(w, head).into_data());
        Ok((tape.value(out.loss).data()[0], g))
    }

    pub fn dcq_error(&self) -> Result<f64> {
        let theta = self.extractor.flatten();
        let (_, analytic) = self.dcq_loss(&self.extractor)?;
        let mut scratch = self.extractor.clone();
        finite_difference_check(
            |p| {
                scratch.unflatten(p)?;
                Ok(self.dcq_loss(&scratch)?.0)
            },
            &theta,
            &analytic,
            FD_STEP,
        )
    }

    pub fn fc_error(&self) -> Result<f64> {
        let n_ext = self.extractor.parameter_count();
        let mut theta = self.extractor.flatten();
        theta.extend_from_slice(self.head.data());
        let (_, analytic) = self.fc_loss(&self.extractor, &self.head)?;
        let mut scratch = self.extractor.clone();
        let mut head = self.head.clone();
        finite_difference_check(
            |p| {
                scratch.unflatten(&p[..n_ext])?;
                head.data_mut().copy_from_slice(&p[n_ext..]);
                Ok(self.fc_loss(&scratch, &head)?.0)
            },
            &theta,
            &analytic,
            FD_STEP,
        )
    }
}

pub fn run_gradient_suite(cases: usize, seed: u64) -> Result<Vec<GradCase>> {
    (0..cases)
        .map(|case| {
            let p = random_problem(seed, case)?;
            Ok(GradCase {
                case,
                dims: p.extractor.dims().to_vec(),
                batch: p.x.rows(),
                queue_size: p.queue.capacity(),
                scale: p.scale,
                margin: p.margin,
                dcq_max_rel_error: p.dcq_error()?,
                fc_max_rel_error: p.fc_error()?,
            })
        })
        .collect()
}
