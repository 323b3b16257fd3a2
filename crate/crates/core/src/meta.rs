//! Pseudo-label meta-gradients.
//!
//! Pseudo-labels start at the classifier's own predictions. At that point the
//! consistency loss and its parameter gradient are exactly zero, so a virtual
//! SGD step leaves the parameters where they are. The labeled loss after the
//! virtual step still depends on the pseudo-labels, though, and its gradient
//! with respect to them is
//!
//! ```text
//! ∇ỹ_i = (2α / Bᵘ) · J_θ f(x_i; θ) · ∇_θ G(θ)
//! ```
//!
//! where `G` is the labeled KL loss. [`exact_meta_gradient`] evaluates this
//! with exact Jacobian rows; [`first_order_meta_gradient`] replaces the
//! Jacobian-vector product by a symmetric difference of two perturbed forward
//! passes.

use crate::data::{LabeledBatch, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{MlpClassifier, ParamVector};
use crate::tensor::Tensor;

/// Tolerance for "pseudo-labels equal the current predictions".
pub const INIT_TOL: f64 = 1e-12;

/// Below this labeled-gradient norm the first-order rule has no usable ε.
pub const DEGENERATE_GRAD: f64 = 1e-12;

/// Entry floor used when projecting pseudo-label rows back onto the simplex.
pub const PROJECTION_FLOOR: f64 = 1e-6;

/// Largest ε the first-order rule will use.
pub const EPS_CAP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    /// ỹ: predictions at initialization.
    pub y_init: Tensor,
    /// ∇ỹ, once a meta-gradient has been computed.
    pub y_grad: Option<Tensor>,
    /// ŷ = ỹ − β∇ỹ, possibly projected.
    pub y_updated: Option<Tensor>,
}

impl PseudoLabelSet {
    pub fn with_grad(mut self, y_grad: Tensor) -> Result<Self> {
        if y_grad.shape() != self.y_init.shape() {
            return Err(Error::dim(format!(
                "pseudo-label gradient {:?} for labels {:?}",
                y_grad.shape(),
                self.y_init.shape()
            )));
        }
        self.y_grad = Some(y_grad);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// θ̃ = θ − α ∇θ for one provisional step that is never committed.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualStep {
    pub theta_before: ParamVector,
    pub grad: ParamVector,
    pub alpha: f64,
    pub theta_after: ParamVector,
}

impl VirtualStep {
    pub fn new(theta_before: ParamVector, grad: ParamVector, alpha: f64) -> Result<Self> {
        let theta_after = theta_before.axpy(-alpha, &grad)?;
        Ok(VirtualStep {
            theta_before,
            grad,
            alpha,
            theta_after,
        })
    }
}

/// A pseudo-label gradient together with the labeled-batch quantities it was
/// built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub y_grad: Tensor,
    /// ∇θ of the labeled KL loss at the current parameters.
    pub labeled_grad: ParamVector,
    pub labeled_loss: f64,
    /// Finite-difference radius; `None` for the exact variant.
    pub eps: Option<f64>,
    /// Set when the labeled gradient vanished and a zero gradient was returned.
    pub degenerate: bool,
}

impl MetaGradient {
    pub fn norm(&self) -> f64 {
        self.y_grad.norm()
    }
}

/// ỹ = f(x_u; θ).
pub fn init_pseudo_labels(model: &MlpClassifier, unlabeled: &UnlabeledBatch) -> Result<PseudoLabelSet> {
    if unlabeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(PseudoLabelSet {
        indices: unlabeled.indices.clone(),
        y_init: model.forward(&unlabeled.x)?,
        y_grad: None,
        y_updated: None,
    })
}

/// The provisional step on the consistency loss `mean ||f(x_u; θ) − ỹ||²`.
pub fn virtual_step(
    model: &MlpClassifier,
    x_u: &Tensor,
    y_tilde: &Tensor,
    alpha: f64,
) -> Result<VirtualStep> {
    let (_, grad) = model.loss_and_grad(x_u, y_tilde, LossKind::Mse)?;
    VirtualStep::new(model.params().clone(), grad, alpha)
}

fn check_batches(unlabeled: &UnlabeledBatch, labeled: &LabeledBatch) -> Result<()> {
    if unlabeled.is_empty() || labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Closed-form meta-gradient, valid only while the pseudo-labels equal the
/// current predictions.
pub fn exact_meta_gradient(
    model: &MlpClassifier,
    unlabeled: &UnlabeledBatch,
    pseudo: &PseudoLabelSet,
    labeled: &LabeledBatch,
    alpha: f64,
) -> Result<MetaGradient> {
    check_batches(unlabeled, labeled)?;
    let current = model.forward(&unlabeled.x)?;
    if current.shape() != pseudo.y_init.shape() {
        return Err(Error::dim(format!(
            "pseudo-labels {:?} for a batch producing {:?}",
            pseudo.y_init.shape(),
            current.shape()
        )));
    }
    let drift = current.sub(&pseudo.y_init)?.max_abs();
    if drift > INIT_TOL {
        return Err(Error::Precondition(format!(
            "pseudo-labels differ from the current predictions by {drift:e}; \
             the closed form holds only at initialization"
        )));
    }

    let (labeled_loss, g) = model.loss_and_grad(&labeled.x, &labeled.y, LossKind::Kl)?;
    let b = unlabeled.len();
    let k = model.num_classes();
    let scale = 2.0 * alpha / b as f64;
    let mut rows = Vec::with_capacity(b * k);
    for i in 0..b {
        let xi = unlabeled.x.select_rows(&[i]);
        let jv = model.jacobian_vector_product(&xi, &g)?;
        rows.extend(jv.data().iter().map(|v| scale * v));
    }
    Ok(MetaGradient {
        y_grad: Tensor::produced(vec![b, k], rows, "exact_meta_gradient")?,
        labeled_grad: g,
        labeled_loss,
        eps: None,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstOrderOptions {
    /// ε = eps_rule / ||∇θˡ||, capped at [`EPS_CAP`].
    pub eps_rule: f64,
    /// Drop the α/Bᵘ prefactor and scale by 1/ε only.
    pub unscaled: bool,
}

impl Default for FirstOrderOptions {
    fn default() -> Self {
        FirstOrderOptions {
            eps_rule: 0.01,
            unscaled: false,
        }
    }
}

/// Symmetric-difference meta-gradient:
/// `(α / (Bᵘ ε)) · (f(x; θ + ε∇θˡ) − f(x; θ − ε∇θˡ))`.
pub fn first_order_meta_gradient(
    model: &MlpClassifier,
    unlabeled: &UnlabeledBatch,
    labeled: &LabeledBatch,
    alpha: f64,
    opts: FirstOrderOptions,
) -> Result<MetaGradient> {
    check_batches(unlabeled, labeled)?;
    if !(opts.eps_rule > 0.0) {
        return Err(Error::Config("eps rule constant must be positive".into()));
    }
    let (labeled_loss, g) = model.loss_and_grad(&labeled.x, &labeled.y, LossKind::Kl)?;
    let b = unlabeled.len();
    let k = model.num_classes();
    let gnorm = g.norm();
    if gnorm < DEGENERATE_GRAD {
        return Ok(MetaGradient {
            y_grad: Tensor::zeros(&[b, k]),
            labeled_grad: g,
            labeled_loss,
            eps: None,
            degenerate: true,
        });
    }
    let eps = (opts.eps_rule / gnorm).min(EPS_CAP);
    let plus = model.perturbed_forward(&unlabeled.x, &g, eps, 1.0)?;
    let minus = model.perturbed_forward(&unlabeled.x, &g, eps, -1.0)?;
    let pref = if opts.unscaled {
        1.0 / eps
    } else {
        alpha / (b as f64 * eps)
    };
    Ok(MetaGradient {
        y_grad: plus.sub(&minus)?.scale(pref)?,
        labeled_grad: g,
        labeled_loss,
        eps: Some(eps),
        degenerate: false,
    })
}

/// Clamps every entry to at least [`PROJECTION_FLOOR`] and renormalizes rows.
pub fn project_rows(y: &Tensor) -> Result<Tensor> {
    let k = y.cols();
    let mut data = Vec::with_capacity(y.len());
    for r in 0..y.rows() {
        let row: Vec<f64> = y.row(r).iter().map(|v| v.max(PROJECTION_FLOOR)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    Tensor::produced(vec![y.rows(), k], data, "project_rows")
}

/// ŷ = ỹ − β∇ỹ, optionally projected onto the simplex.
pub fn update_pseudo_labels(pseudo: &PseudoLabelSet, beta: f64, project: bool) -> Result<PseudoLabelSet> {
    let grad = pseudo
        .y_grad
        .as_ref()
        .ok_or_else(|| Error::Contract("pseudo-label gradient not computed".into()))?;
    let mut updated = pseudo.y_init.axpy(-beta, grad)?;
    if project {
        updated = project_rows(&updated)?;
    }
    let mut out = pseudo.clone();
    out.y_updated = Some(updated);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::model::Activation;

    fn batches() -> (MlpClassifier, UnlabeledBatch, LabeledBatch) {
        let m = MlpClassifier::new(&[2, 6, 2], Activation::Tanh, 3).unwrap();
        let u = UnlabeledBatch {
            indices: vec![0, 1, 2],
            x: Tensor::from_rows(&[[0.3, -0.2], [1.1, 0.4], [-0.7, 0.9]]).unwrap(),
        };
        let l = LabeledBatch {
            indices: vec![3, 4],
            x: Tensor::from_rows(&[[0.5, 0.5], [-1.0, 0.2]]).unwrap(),
            y: one_hot(&[0, 1], 2).unwrap(),
        };
        (m, u, l)
    }

    #[test]
    fn init_has_zero_consistency_and_gradient() {
        let (m, u, _) = batches();
        let p = init_pseudo_labels(&m, &u).unwrap();
        let vs = virtual_step(&m, &u.x, &p.y_init, 0.1).unwrap();
        assert_eq!(vs.grad.norm(), 0.0);
        assert_eq!(vs.theta_after, vs.theta_before);
        assert_eq!(m.loss(&u.x, &p.y_init, LossKind::Mse).unwrap(), 0.0);
        for r in 0..p.y_init.rows() {
            assert!((p.y_init.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_refuses_moved_labels() {
        let (m, u, l) = batches();
        let mut p = init_pseudo_labels(&m, &u).unwrap();
        p.y_init = p.y_init.scale(0.9).unwrap();
        assert!(matches!(
            exact_meta_gradient(&m, &u, &p, &l, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn exact_and_first_order_agree() {
        let (m, u, l) = batches();
        let p = init_pseudo_labels(&m, &u).unwrap();
        let ex = exact_meta_gradient(&m, &u, &p, &l, 0.3).unwrap();
        let fo = first_order_meta_gradient(&m, &u, &l, 0.3, FirstOrderOptions::default()).unwrap();
        let err = ex.y_grad.sub(&fo.y_grad).unwrap().max_abs() / ex.y_grad.max_abs();
        assert!(err < 1e-3, "{err}");
        assert!(ex.norm() > 0.0);
    }

    #[test]
    fn unscaled_differs_by_prefactor() {
        let (m, u, l) = batches();
        let a = 0.2;
        let s = first_order_meta_gradient(&m, &u, &l, a, FirstOrderOptions::default()).unwrap();
        let opts = FirstOrderOptions {
            unscaled: true,
            ..Default::default()
        };
        let n = first_order_meta_gradient(&m, &u, &l, a, opts).unwrap();
        let ratio = a / u.len() as f64;
        for (x, y) in s.y_grad.data().iter().zip(n.y_grad.data()) {
            assert!((x - ratio * y).abs() <= 1e-14 * y.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_labeled_gradient_is_flagged() {
        let (_, u, mut l) = batches();
        let m = MlpClassifier::zeros(&[2, 6, 2], Activation::Tanh).unwrap();
        // the zero network predicts [0.5, 0.5], which is a KL minimum for that target
        l.y = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let g = first_order_meta_gradient(&m, &u, &l, 0.1, FirstOrderOptions::default()).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.y_grad.max_abs(), 0.0);
    }

    #[test]
    fn update_endpoints_and_projection() {
        let (m, u, _) = batches();
        let p = init_pseudo_labels(&m, &u).unwrap();
        let grad = Tensor::filled(&[3, 2], 0.25);
        let p = p.with_grad(grad).unwrap();
        let same = update_pseudo_labels(&p, 0.0, false).unwrap();
        assert_eq!(same.y_updated.as_ref().unwrap(), &p.y_init);

        let y = Tensor::from_rows(&[[-0.1, 1.1]]).unwrap();
        let proj = project_rows(&y).unwrap();
        assert!((proj.data()[0] - 1e-6 / 1.100001).abs() < 1e-18);
        assert!((proj.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let bare = PseudoLabelSet {
            indices: vec![0],
            y_init: y,
            y_grad: None,
            y_updated: None,
        };
        assert!(update_pseudo_labels(&bare, 0.1, false).is_err());
    }
}
