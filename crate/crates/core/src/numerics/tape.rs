use super::loss::{softmax_cross_entropy, LossDiagnostics};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Prelu(Var, Var),
    L2NormRows { x: Var, eps: f64 },
    Transpose(Var),
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MarginAt(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Tensor },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Leaves are either parameters (`param`) or detached constants
/// (`constant`). Anything computed only from constants is itself detached
/// and never receives a gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for detached values and for values the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient or zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    /// `slope` must be a single-element tensor.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let s = self.value(slope);
        if s.len() != 1 {
            return Err(Error::Shape {
                op: "prelu",
                lhs: self.value(x).shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let out = self.value(x).prelu(s.data()[0]);
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(out, Op::Prelu(x, slope), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).l2_normalize_rows(eps);
        let rg = self.rg(x);
        self.push(out, Op::L2NormRows { x, eps }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Row-wise inner product of two `B×D` matrices, giving `B×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "row_dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = (0..ta.rows())
            .map(|r| super::tensor::dot(ta.row(r), tb.row(r)))
            .collect();
        let out = Tensor::new(vec![ta.rows(), 1], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Subtracts `margin` at `(i, targets[i])` for every row `i`.
    pub fn margin_at(&mut self, x: Var, targets: &[usize], margin: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        check_targets(&out, targets)?;
        for (r, &t) in targets.iter().enumerate() {
            let v = out.get(r, t);
            out.set(r, t, v - margin);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MarginAt(x), rg))
    }

    /// Overwrites every position where `mask` is set with `value`; those
    /// positions pass no gradient back.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        if mask.len() != out.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: out.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross entropy over rows; the result is a `1×1` scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<(Var, LossDiagnostics)> {
        let (loss, diag, probs) = softmax_cross_entropy(self.value(logits), targets)?;
        let rg = self.rg(logits);
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        );
        Ok((v, diag))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Reverse sweep from a scalar `loss`, visiting operations in exact
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, g.matmul_t(self.value(*b))?));
                }
                if self.rg(*b) {
                    v.push((*b, self.value(*a).t_matmul(g)?));
                }
                v
            }
            Op::AddRowBias(x, b) => {
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (acc, v) in db.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                let db = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::Prelu(x, slope) => {
                let xv = self.value(*x);
                let s = self.value(*slope).data()[0];
                let mut dslope = 0.0;
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if xi < 0.0 {
                        dslope += xi * *d;
                        *d *= s;
                    }
                }
                let ds = Tensor::new(self.value(*slope).shape().to_vec(), vec![dslope])?;
                vec![(*x, dx), (*slope, ds)]
            }
            Op::L2NormRows { x, eps } => {
                let xv = self.value(*x);
                let y = &node.value;
                let mut dx = Tensor::zeros(xv.shape());
                let norms = xv.row_norms();
                for (r, &n) in norms.iter().enumerate() {
                    let gy = g.row(r);
                    let dst = dx.row_mut(r);
                    if n > *eps {
                        let yr = y.row(r);
                        let proj = super::tensor::dot(yr, gy);
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gy).zip(yr) {
                            *d = (gi - yi * proj) / n;
                        }
                    } else {
                        for (d, &gi) in dst.iter_mut().zip(gy) {
                            *d = gi / eps;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(ta.shape());
                let mut db = Tensor::zeros(tb.shape());
                for r in 0..ta.rows() {
                    let gr = g.data()[r];
                    for (d, &v) in da.row_mut(r).iter_mut().zip(tb.row(r)) {
                        *d = gr * v;
                    }
                    for (d, &v) in db.row_mut(r).iter_mut().zip(ta.row(r)) {
                        *d = gr * v;
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let mut da = Tensor::zeros(&[rows, ca]);
                let mut db = Tensor::zeros(&[rows, cb]);
                for r in 0..rows {
                    let gr = g.row(r);
                    da.row_mut(r).copy_from_slice(&gr[..ca]);
                    db.row_mut(r).copy_from_slice(&gr[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::AddScalar(x) | Op::MarginAt(x) => vec![(*x, g.clone())],
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::MaskedFill { x, mask } => {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *d = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = dl.get(r, t);
                    dl.set(r, t, v - 1.0);
                }
                for v in dl.data_mut() {
                    *v *= scale;
                }
                vec![(*logits, dl)]
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::filled(self.value(*x).shape(), gv))]
            }
        };
        Ok(out)
    }
}

pub(crate) fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            op: "targets",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let c = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Index {
            what: "class logits",
            index: bad,
            len: c,
        });
    }
    Ok(())
}
