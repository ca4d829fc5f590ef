//! MLP feature extractor: `(matmul → bias → PReLU)` per hidden layer and a
//! linear output layer. Output embeddings are left unnormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var, PRELU_INIT};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Slope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
    /// `1 × 1`. Stored for every layer; the output layer does not apply it.
    pub slope: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Gaussian weights scaled by `1/√fan_in`, zero biases, slopes at 0.25.
pub fn init_extractor(dims: &[usize], seed: u64) -> Result<MlpParams> {
    validate_dims(dims)?;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut s = rng::stream(seed, Domain::Init, &[l as u64]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = rng::gaussian_vec(&mut s, fan_in * fan_out)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            Layer {
                weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
                bias: Tensor::zeros(&[1, fan_out]),
                slope: Tensor::scalar(PRELU_INIT),
            }
        })
        .collect();
    Ok(MlpParams {
        dims: dims.to_vec(),
        layers,
    })
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 3 {
        return Err(Error::config(format!(
            "extractor needs input, at least one hidden layer and an output, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::config(format!("zero-width layer in {dims:?}")));
    }
    if *dims.last().unwrap() < 2 {
        return Err(Error::config("embedding dimension must be >= 2"));
    }
    Ok(())
}

/// Handles of one extractor's parameters on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<[Var; 3]>,
}

impl MlpVars {
    /// Gradients in [`MlpParams::tensors`] order; zeros where none reached.
    pub fn grads(&self, grads: &Gradients, params: &MlpParams) -> Vec<Tensor> {
        self.vars()
            .zip(params.tensors())
            .map(|(v, t)| grads.get_or_zeros(v, t))
            .collect()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|l| l.iter().copied())
    }
}

impl MlpParams {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `Σ (fan_in·fan_out + fan_out + 1)` over layers.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Multiply-accumulates for one forward pass of one sample.
    pub fn macs_per_sample(&self) -> u64 {
        self.dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    /// Weight, bias, slope for each layer in order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.slope])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.slope])
            .collect()
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.layers
            .iter()
            .flat_map(|_| [ParamKind::Weight, ParamKind::Bias, ParamKind::Slope])
            .collect()
    }

    pub fn same_shapes(&self, other: &MlpParams) -> bool {
        self.dims == other.dims
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![self.parameter_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces all tensors, checking each shape.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut dst = self.tensors_mut();
        if tensors.len() != dst.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                dst.len(),
                tensors.len()
            )));
        }
        for (d, t) in dst.iter_mut().zip(tensors) {
            if d.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load_tensors",
                    lhs: d.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            **d = t;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "extract_features",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Forward pass with no tape. Produces the same bits as the taped path.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?.add_row_vector(&l.bias)?;
            if i < last {
                h = h.prelu(l.slope.data()[0]);
            }
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [
                        tape.param(l.weight.clone()),
                        tape.param(l.bias.clone()),
                        tape.param(l.slope.clone()),
                    ]
                })
                .collect(),
        }
    }
}

/// Records the forward pass on `tape` and returns the raw `B×D` embeddings.
pub fn extract_features(params: &MlpParams, x: Var, tape: &mut Tape) -> Result<(Var, MlpVars)> {
    params.check_input(tape.value(x))?;
    let vars = params.register(tape);
    let last = vars.layers.len() - 1;
    let mut h = x;
    for (i, [w, b, s]) in vars.layers.iter().copied().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row_bias(h, b)?;
        if i < last {
            h = tape.prelu(h, s)?;
        }
    }
    Ok((h, vars))
}
