use super::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::ParamVector;

/// SGD with optional heavy-ball momentum and L2 weight decay:
///
/// ```text
/// v ← μ v + (g + λ θ)
/// θ ← θ − η v
/// ```
///
/// With `μ = 0` and `λ = 0` this performs exactly the plain update.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Option<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            velocity: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Returns the updated parameters; `params` is not modified.
    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
        match self.kind {
            OptimizerKind::PlainSgd => params.axpy(-lr, grad),
            OptimizerKind::MomentumSgd {
                momentum,
                weight_decay,
            } => {
                if grad.layout() != params.layout() {
                    return Err(Error::dim("gradient layout differs from parameters"));
                }
                let g = grad.as_slice();
                let th = params.as_slice();
                let v = self.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
                if v.len() != g.len() {
                    return Err(Error::dim("optimizer state has the wrong length"));
                }
                for i in 0..g.len() {
                    let mut d = g[i];
                    if weight_decay != 0.0 {
                        d += weight_decay * th[i];
                    }
                    v[i] = if momentum != 0.0 { momentum * v[i] + d } else { d };
                }
                let dir = ParamVector::new(v.clone(), params.layout().to_vec())?;
                params.axpy(-lr, &dir)
            }
        }
    }
}
