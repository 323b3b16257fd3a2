//! Reverse-mode gradient tape.
//!
//! Operations are appended in execution order, so every node's inputs have a
//! smaller index than the node itself. Walking the node list backwards is
//! therefore a reverse topological order and each node is visited once.
//! Gradients of fan-out nodes accumulate additively.
//!
//! Only first-order gradients are supported; the tape records values, not
//! the backward computation.

use crate::error::{Error, Result};
use crate::losses::{self, PROB_FLOOR};
use crate::tensor::Tensor;

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    /// Mean over rows of `sum_n y ln(y / p)`; target is a constant.
    KlMean { pred: Var, target: Tensor },
    /// Mean over rows of `||p - y||^2`; both sides differentiable.
    MseMean { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s)?;
        self.push(Op::Scale(a, s), v)
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        self.push(Op::AddRow(a, row), v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).relu()?;
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).tanh()?;
        self.push(Op::Tanh(a), v)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax()?;
        self.push(Op::Softmax(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::produced(vec![1], vec![self.value(a).sum()], "sum")?;
        self.push(Op::Sum(a), v)
    }

    /// Batch-mean KL divergence of constant targets from `pred`.
    pub fn kl_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let loss = losses::batch_loss(losses::LossKind::Kl, self.value(pred), target)?;
        self.push(
            Op::KlMean {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(loss),
        )
    }

    /// Batch-mean squared distance between `pred` and `target`.
    pub fn mse_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss =
            losses::batch_loss(losses::LossKind::Mse, self.value(pred), self.value(target))?;
        self.push(Op::MseMean { pred, target }, Tensor::scalar(loss))
    }

    /// Backpropagates from `output` and marks the tape as consumed.
    ///
    /// `seed` defaults to 1 for scalar outputs; non-scalar outputs need an
    /// explicit seed of the same shape.
    pub fn backward(&mut self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let grads = self.backward_retain(output, seed)?;
        self.consumed = true;
        Ok(grads)
    }

    /// Backpropagates without consuming the tape, so further passes with
    /// other seeds can reuse the recorded forward values.
    pub fn backward_retain(&self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown variable {}", output.0)));
        }
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.len() != self.nodes[output.0].value.len() {
                    return Err(Error::dim(format!(
                        "seed of length {} for output of shape {:?}",
                        s.len(),
                        out_shape
                    )));
                }
                Tensor::new(out_shape, s.into_data())?
            }
            None => {
                if self.nodes[output.0].value.len() != 1 {
                    return Err(Error::Contract(format!(
                        "output of shape {out_shape:?} needs an explicit seed"
                    )));
                }
                Tensor::filled(&out_shape, 1.0)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "backward pass (gradient of shape {:?})",
                bad.shape()
            )));
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul(&bv.transpose())?)?;
                accumulate(grads, *b, av.transpose().matmul(g)?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0)?)?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.value(*b))?)?;
                accumulate(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)?)?,
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone())?;
                let c = g.cols();
                let mut col_sums = vec![0.0; c];
                for r in 0..g.rows() {
                    for (acc, v) in col_sums.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                let shape = self.value(*row).shape().to_vec();
                accumulate(grads, *row, Tensor::new(shape, col_sums)?)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - inner)));
                }
                debug_assert_eq!(data.len(), y.rows() * c);
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]))?;
            }
            Op::KlMean { pred, target } => {
                let p = self.value(*pred);
                let scale = g.data()[0] / p.rows() as f64;
                let mut data = Vec::with_capacity(p.len());
                for r in 0..p.rows() {
                    data.extend(
                        p.row(r)
                            .iter()
                            .zip(target.row(r))
                            .map(|(&pn, &yn)| if pn < PROB_FLOOR { 0.0 } else { -scale * yn / pn }),
                    );
                }
                accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), data)?)?;
            }
            Op::MseMean { pred, target } => {
                let p = self.value(*pred);
                let y = self.value(*target);
                let scale = 2.0 * g.data()[0] / p.rows() as f64;
                let diff = p.sub(y)?;
                accumulate(grads, *pred, diff.scale(scale)?)?;
                accumulate(grads, *target, diff.scale(-scale)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    let slot = &mut grads[v.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}
