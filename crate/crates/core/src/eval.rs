//! Top-1 accuracy per split. This is the only place that reads the hidden
//! ground truth of unlabeled examples.

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::MlpClassifier;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitAccuracy {
    pub split: Split,
    /// Examples of this split with a known class.
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub error_rate: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &MlpClassifier, x: &Tensor) -> Result<Vec<usize>> {
    let p = model.forward(x)?;
    Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
}

fn check_fit(model: &MlpClassifier, ds: &Dataset) -> Result<()> {
    if model.input_dim() != ds.dim() {
        return Err(Error::Config(format!(
            "model takes {} features, data has {}",
            model.input_dim(),
            ds.dim()
        )));
    }
    if ds.num_classes() > model.num_classes() {
        return Err(Error::Config(format!(
            "data has {} classes, model predicts {}",
            ds.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Accuracy on one split, or `None` when no example there has a known class.
pub fn accuracy(model: &MlpClassifier, ds: &Dataset, split: Split) -> Result<Option<SplitAccuracy>> {
    check_fit(model, ds)?;
    let truth = ds.hidden_labels();
    let idx: Vec<usize> = ds
        .indices(split)
        .into_iter()
        .filter(|&i| truth[i].is_some())
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let pred = predict(model, &ds.features().select_rows(&idx))?;
    let correct = idx
        .iter()
        .zip(&pred)
        .filter(|(&i, &p)| truth[i] == Some(p))
        .count();
    let accuracy = correct as f64 / idx.len() as f64;
    Ok(Some(SplitAccuracy {
        split,
        n: idx.len(),
        correct,
        accuracy,
        error_rate: 1.0 - accuracy,
    }))
}

/// Accuracy on every split that has known classes, in labeled, unlabeled,
/// test order.
pub fn evaluate(model: &MlpClassifier, ds: &Dataset) -> Result<Vec<SplitAccuracy>> {
    let mut out = Vec::new();
    for s in [Split::Labeled, Split::Unlabeled, Split::Test] {
        if let Some(a) = accuracy(model, ds, s)? {
            out.push(a);
        }
    }
    Ok(out)
}
