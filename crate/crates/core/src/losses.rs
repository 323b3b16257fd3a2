//! Discrepancy functions between a predicted distribution `p` and a target `y`.
//!
//! KL is used for labeled (classification) targets and MSE for consistency
//! targets. MSE is the plain squared Euclidean distance summed over classes;
//! batch forms average over rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities inside `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// How far a KL target row may stray from summing to one.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Kl,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Mse => "mse",
        }
    }
}

fn check_lengths(p: &[f64], y: &[f64], op: &str) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::dim(format!(
            "{op}: prediction has {} entries, target {}",
            p.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Rejects targets that are not probability distributions.
pub fn check_distribution(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("target entry {v} is not a probability")));
    }
    let total: f64 = y.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Domain(format!("target sums to {total}, not 1")));
    }
    Ok(())
}

/// `sum_n y_n ln(y_n / p_n)` with `0 ln 0 = 0`.
pub fn kl(p: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(p, y, "kl")?;
    check_distribution(y)?;
    Ok(kl_unchecked(p, y))
}

pub(crate) fn kl_unchecked(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .filter(|(_, &yn)| yn > 0.0)
        .map(|(&pn, &yn)| yn * (yn.ln() - pn.max(PROB_FLOOR).ln()))
        .sum()
}

/// Squared Euclidean distance, no class normalization.
pub fn mse(p: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(p, y, "mse")?;
    Ok(mse_unchecked(p, y))
}

pub(crate) fn mse_unchecked(p: &[f64], y: &[f64]) -> f64 {
    p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn per_example(kind: LossKind, p: &[f64], y: &[f64]) -> Result<f64> {
    match kind {
        LossKind::Kl => kl(p, y),
        LossKind::Mse => mse(p, y),
    }
}

/// d kl / d p. Entries where `p` sits below the floor are constant in `p`.
pub fn kl_grad_pred(p: &[f64], y: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(y)
        .map(|(&pn, &yn)| if pn < PROB_FLOOR { 0.0 } else { -yn / pn })
        .collect()
}

/// d mse / d p = 2 (p - y).
pub fn mse_grad_pred(p: &[f64], y: &[f64]) -> Vec<f64> {
    p.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect()
}

/// d mse / d y = -2 (p - y).
pub fn mse_grad_target(p: &[f64], y: &[f64]) -> Vec<f64> {
    p.iter().zip(y).map(|(a, b)| -2.0 * (a - b)).collect()
}

/// Mean of the per-example loss over the rows of `preds` / `targets`.
pub fn batch_loss(kind: LossKind, preds: &Tensor, targets: &Tensor) -> Result<f64> {
    if preds.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "batch_loss: predictions {:?} vs targets {:?}",
            preds.shape(),
            targets.shape()
        )));
    }
    let b = preds.rows();
    if b == 0 || preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for i in 0..b {
        total += per_example(kind, preds.row(i), targets.row(i))?;
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} batch loss", kind.name())));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kl_identical_is_zero() {
        assert_eq!(kl(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(kl(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_known_value() {
        // 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_bad_targets() {
        assert!(matches!(kl(&[0.5, 0.5], &[0.7, 0.7]), Err(Error::Domain(_))));
        assert!(matches!(kl(&[0.5, 0.5], &[-0.1, 1.1]), Err(Error::Domain(_))));
        assert!(matches!(kl(&[0.5], &[0.5, 0.5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn kl_zero_prediction_is_finite() {
        let v = kl(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(mse(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mse_target_gradient_matches_fd() {
        let p = [0.8, 0.2];
        let y = [0.5, 0.5];
        let g = mse_grad_target(&p, &y);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = y;
            let mut dn = y;
            up[j] += h;
            dn[j] -= h;
            let fd = (mse(&p, &up).unwrap() - mse(&p, &dn).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
        }
        assert!((g[0] + 0.6).abs() < 1e-15);
        assert!((g[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_cases() {
        let p = Tensor::from_rows(&[[0.25, 0.75], [0.25, 0.75]]).unwrap();
        let y = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let c = kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((batch_loss(LossKind::Kl, &p, &y).unwrap() - c).abs() < 1e-15);

        let p1 = Tensor::from_rows(&[[0.9, 0.1]]).unwrap();
        let y1 = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(
            batch_loss(LossKind::Mse, &p1, &y1).unwrap(),
            mse(&[0.9, 0.1], &[0.0, 1.0]).unwrap()
        );

        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            batch_loss(LossKind::Mse, &empty, &empty),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batch_loss_matches_loop() {
        let p = Tensor::from_rows(&[[0.1, 0.9], [0.6, 0.4], [0.33, 0.67]]).unwrap();
        let y = Tensor::from_rows(&[[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]]).unwrap();
        for kind in [LossKind::Kl, LossKind::Mse] {
            let mut acc = 0.0;
            for i in 0..3 {
                let (pi, yi) = (p.row(i), y.row(i));
                acc += match kind {
                    LossKind::Kl => (0..2)
                        .filter(|&j| yi[j] > 0.0)
                        .map(|j| yi[j] * (yi[j] / pi[j]).ln())
                        .sum::<f64>(),
                    LossKind::Mse => (0..2).map(|j| (pi[j] - yi[j]).powi(2)).sum::<f64>(),
                };
            }
            let got = batch_loss(kind, &p, &y).unwrap();
            assert!((got - acc / 3.0).abs() < 1e-14, "{kind:?}");
        }
    }

    fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_iff_equal(p in dist(4), y in dist(4)) {
            let v = kl(&p, &y).unwrap();
            prop_assert!(v >= -1e-15);
            prop_assert!(kl(&y, &y).unwrap().abs() < 1e-15);
            let gap: f64 = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
            if gap > 1e-3 {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn batch_loss_permutation_invariant(rows in prop::collection::vec((dist(3), dist(3)), 1..6), rot in 0usize..6) {
            let n = rows.len();
            let preds: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
            let targs: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
            let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let p = Tensor::from_rows(&preds).unwrap();
            let y = Tensor::from_rows(&targs).unwrap();
            for kind in [LossKind::Kl, LossKind::Mse] {
                let a = batch_loss(kind, &p, &y).unwrap();
                let b = batch_loss(kind, &p.select_rows(&order), &y.select_rows(&order)).unwrap();
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
