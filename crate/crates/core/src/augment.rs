//! Mixup between paired labeled and unlabeled examples.
//!
//! Pair `i` mixes the i-th labeled example with the i-th unlabeled one using
//! its own `λ_i ~ Beta(γ, γ)`:
//!
//! ```text
//! x_in = λ x^l + (1 − λ) x^u
//! y_in = λ y   + (1 − λ) ŷ
//! ```
//!
//! λ is used as drawn; it is not folded to `max(λ, 1 − λ)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub x_in: Tensor,
    pub y_in: Tensor,
    pub lambdas: Tensor,
}

/// `n` draws from Beta(γ, γ), each as `X / (X + Y)` with independent
/// Gamma(γ, 1) variates.
pub fn sample_beta<R: Rng + ?Sized>(gamma: f64, n: usize, rng: &mut R) -> Result<Tensor> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("Beta parameter must be positive, got {gamma}")));
    }
    let g = Gamma::new(gamma, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    let out = (0..n)
        .map(|_| {
            let x: f64 = g.sample(rng);
            let y: f64 = g.sample(rng);
            if x + y > 0.0 {
                x / (x + y)
            } else {
                // both draws underflowed; the limit law puts half the mass at each end
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Mixes with explicitly given coefficients.
pub fn mixup_with(
    x_l: &Tensor,
    y_l: &Tensor,
    x_u: &Tensor,
    y_hat: &Tensor,
    lambdas: &[f64],
) -> Result<MixupBatch> {
    let b = x_l.rows();
    if x_u.rows() != b || y_l.rows() != b || y_hat.rows() != b || lambdas.len() != b {
        return Err(Error::Contract(format!(
            "mixup pairs need equal batch sizes, got {} labeled and {} unlabeled",
            b,
            x_u.rows()
        )));
    }
    if x_l.cols() != x_u.cols() || y_l.cols() != y_hat.cols() {
        return Err(Error::dim("mixup operands differ in width"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Domain(format!("mixing coefficient {l} outside [0, 1]")));
    }
    let mix = |a: &Tensor, c: &Tensor| {
        let w = a.cols();
        let mut data = Vec::with_capacity(a.len());
        for (i, &lam) in lambdas.iter().enumerate() {
            data.extend(
                a.row(i)
                    .iter()
                    .zip(c.row(i))
                    .map(|(p, q)| lam * p + (1.0 - lam) * q),
            );
        }
        Tensor::produced(vec![b, w], data, "mixup")
    };
    Ok(MixupBatch {
        x_in: mix(x_l, x_u)?,
        y_in: mix(y_l, y_hat)?,
        lambdas: Tensor::vector(lambdas.to_vec()),
    })
}

/// Draws one λ per pair and mixes.
pub fn mixup<R: Rng + ?Sized>(
    x_l: &Tensor,
    y_l: &Tensor,
    x_u: &Tensor,
    y_hat: &Tensor,
    gamma: f64,
    rng: &mut R,
) -> Result<MixupBatch> {
    if x_l.rows() != x_u.rows() {
        return Err(Error::Contract(format!(
            "mixup pairs need equal batch sizes, got {} labeled and {} unlabeled",
            x_l.rows(),
            x_u.rows()
        )));
    }
    let lambdas = sample_beta(gamma, x_l.rows(), rng)?;
    mixup_with(x_l, y_l, x_u, y_hat, lambdas.data())
}
