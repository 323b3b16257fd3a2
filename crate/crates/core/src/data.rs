//! Datasets: synthetic generators, category-balanced label splitting, CSV
//! ingestion, and feature standardization.
//!
//! Every example carries a split tag. Ground-truth classes of unlabeled
//! examples are kept (the generators know them) but are only reachable from
//! inside the crate; training code sees them through [`Dataset::labeled_batch`]
//! for labeled rows only, and evaluation goes through [`crate::eval`].
//!
//! CSV layout: header `f0,f1,...,label,split`. `label` is a class id in
//! `0..K`, or `-1` / empty for an unlabeled row. The optional `split` column
//! holds `train` or `test`. Features are written with 17 significant digits
//! so files round-trip bit-exactly.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<Option<usize>>,
    split: Vec<Split>,
    num_classes: usize,
    labeled_in_unlabeled: bool,
}

/// A labeled mini-batch with one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// An unlabeled mini-batch: inputs only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One-hot rows for the given class ids.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::Domain(format!("class {c} outside 0..{k}")));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::matrix(classes.len(), k, data)
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<Option<usize>>,
        split: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 {
            return Err(Error::Schema("features must be a 2-D table".into()));
        }
        if labels.len() != n || split.len() != n {
            return Err(Error::Schema(format!(
                "{n} feature rows, {} labels, {} split tags",
                labels.len(),
                split.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Schema("dataset needs at least one class".into()));
        }
        for (i, (l, s)) in labels.iter().zip(&split).enumerate() {
            match l {
                Some(c) if *c >= num_classes => {
                    return Err(Error::Schema(format!(
                        "row {i}: class {c} outside 0..{num_classes}"
                    )))
                }
                None if *s != Split::Unlabeled => {
                    return Err(Error::Schema(format!(
                        "row {i}: {} example without a class",
                        s.name()
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset {
            features,
            labels,
            split,
            num_classes,
            labeled_in_unlabeled: false,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn labeled_in_unlabeled(&self) -> bool {
        self.labeled_in_unlabeled
    }

    /// Class of a labeled example; `None` for any other split.
    pub fn label(&self, i: usize) -> Option<usize> {
        match self.split[i] {
            Split::Labeled => self.labels[i],
            _ => None,
        }
    }

    /// Ground truth for every row, including hidden classes of unlabeled rows.
    pub(crate) fn hidden_labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.indices(Split::Labeled)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    /// Indices the unlabeled sampler draws from; includes labeled rows when
    /// the inclusion flag is set.
    pub fn unlabeled_pool(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                self.split[i] == Split::Unlabeled
                    || (self.labeled_in_unlabeled && self.split[i] == Split::Labeled)
            })
            .collect()
    }

    /// Marks labeled examples as members of the unlabeled pool as well.
    pub fn with_labeled_in_unlabeled(mut self, include: bool) -> Self {
        self.labeled_in_unlabeled = include;
        self
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    pub fn labeled_batch(&self, idx: &[usize]) -> Result<LabeledBatch> {
        let mut classes = Vec::with_capacity(idx.len());
        for &i in idx {
            match self.label(i) {
                Some(c) => classes.push(c),
                None => {
                    return Err(Error::Contract(format!(
                        "example {i} is not in the labeled split"
                    )))
                }
            }
        }
        Ok(LabeledBatch {
            indices: idx.to_vec(),
            x: self.features.select_rows(idx),
            y: one_hot(&classes, self.num_classes)?,
        })
    }

    pub fn unlabeled_batch(&self, idx: &[usize]) -> Result<UnlabeledBatch> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("example {bad} out of range")));
        }
        Ok(UnlabeledBatch {
            indices: idx.to_vec(),
            x: self.features.select_rows(idx),
        })
    }

    /// SHA-256 over the feature bits, labels and split tags.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for (l, s) in self.labels.iter().zip(&self.split) {
            h.update(l.map(|c| c as i64).unwrap_or(-1).to_le_bytes());
            h.update([*s as u8]);
        }
        hex::encode(h.finalize())
    }

    /// Moves `n_test` examples (category-balanced over known classes) into
    /// the test split. The rest become unlabeled.
    pub fn hold_out_test(&self, n_test: usize, seed: u64) -> Result<Dataset> {
        let candidates: Vec<usize> = (0..self.len())
            .filter(|&i| self.split[i] != Split::Test && self.labels[i].is_some())
            .collect();
        let picked = self.balanced_pick(&candidates, n_test, seed)?;
        let mut out = self.clone();
        for &i in &candidates {
            out.split[i] = Split::Unlabeled;
        }
        for i in picked {
            out.split[i] = Split::Test;
        }
        Ok(out)
    }

    fn balanced_pick(&self, candidates: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
        if n > candidates.len() {
            return Err(Error::Config(format!(
                "asked for {n} examples but only {} are available",
                candidates.len()
            )));
        }
        let k = self.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &i in candidates {
            if let Some(c) = self.labels[i] {
                by_class[c].push(i);
            }
        }
        for group in &mut by_class {
            group.shuffle(&mut rng);
        }
        let mut quota = vec![n / k; k];
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| by_class[b].len().cmp(&by_class[a].len()).then(a.cmp(&b)));
        for &c in order.iter().take(n % k) {
            quota[c] += 1;
        }
        let mut picked = Vec::with_capacity(n);
        for c in 0..k {
            if quota[c] > by_class[c].len() {
                return Err(Error::Config(format!(
                    "class {c} has {} examples, {} needed for a balanced split",
                    by_class[c].len(),
                    quota[c]
                )));
            }
            picked.extend_from_slice(&by_class[c][..quota[c]]);
        }
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn standardize(&mut self, st: &Standardizer) -> Result<()> {
        self.features = st.apply(&self.features)?;
        Ok(())
    }
}

/// Category-balanced label split: exactly `n_labeled` examples with known
/// classes become labeled (per-class counts differ by at most one), every
/// other non-test example becomes unlabeled.
pub fn split_labels(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<Dataset> {
    let candidates: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.split[i] != Split::Test && ds.labels[i].is_some())
        .collect();
    if n_labeled > candidates.len() {
        return Err(Error::Config(format!(
            "{n_labeled} labels requested but only {} labeled candidates exist",
            candidates.len()
        )));
    }
    let picked = ds.balanced_pick(&candidates, n_labeled, seed)?;
    let mut out = ds.clone();
    for i in 0..out.len() {
        if out.split[i] != Split::Test {
            out.split[i] = Split::Unlabeled;
        }
    }
    for i in picked {
        out.split[i] = Split::Labeled;
    }
    Ok(out)
}

/// Two interleaved half circles of radius one. Class 0 is the upper arc
/// centred at the origin, class 1 the lower arc centred at `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("two-moons needs n >= 2".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_upper = n - n / 2;
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n_upper);
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx = noise_sigma * normal.sample(&mut rng);
        let ny = noise_sigma * normal.sample(&mut rng);
        rows.push(([x + nx, y + ny], class));
    }
    rows.shuffle(&mut rng);
    from_generated(rows.iter().map(|(p, c)| (p.to_vec(), *c)).collect(), 2)
}

/// Isotropic Gaussian clusters in 2-D whose centres sit evenly on a circle
/// of radius `centers_spread`. Class of example `i` is `i mod k` before
/// shuffling.
pub fn gen_blobs(n: usize, k: usize, centers_spread: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || k < 1 {
        return Err(Error::Config("blobs needs n >= 2 and k >= 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config("sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<[f64; 2]> = (0..k)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            [centers_spread * a.cos(), centers_spread * a.sin()]
        })
        .collect();
    let mut rows: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|i| {
            let c = i % k;
            let p = vec![
                centers[c][0] + sigma * normal.sample(&mut rng),
                centers[c][1] + sigma * normal.sample(&mut rng),
            ];
            (p, c)
        })
        .collect();
    rows.shuffle(&mut rng);
    from_generated(rows, k)
}

fn from_generated(rows: Vec<(Vec<f64>, usize)>, k: usize) -> Result<Dataset> {
    let n = rows.len();
    let d = rows.first().map(|r| r.0.len()).unwrap_or(0);
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (p, c) in rows {
        feats.extend(p);
        labels.push(Some(c));
    }
    Dataset::new(
        Tensor::matrix(n, d, feats)?,
        labels,
        vec![Split::Unlabeled; n],
        k,
    )
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the labeled and unlabeled rows (test rows excluded).
    /// Constant features get a unit scale.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.split[i] != Split::Test).collect();
        if rows.is_empty() {
            return Err(Error::Config("no training rows to standardize on".into()));
        }
        let d = ds.dim();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(ds.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in &rows {
            for ((s, v), m) in var.iter_mut().zip(ds.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.cols();
        if d != self.mean.len() {
            return Err(Error::dim(format!(
                "standardizer fitted on {} features, input has {d}",
                self.mean.len()
            )));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Tensor::produced(x.shape().to_vec(), data, "standardize")
    }
}

/// Column names used when reading a CSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    pub split_column: String,
    /// Number of classes; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "label".into(),
            split_column: "split".into(),
            num_classes: None,
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(input: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Schema(format!("no '{}' column", schema.label_column)))?;
    let split_col = header.iter().position(|h| h == schema.split_column);
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != label_col && Some(c) != split_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Schema(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        for &c in &feature_cols {
            let tok = &rec[c];
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("'{tok}' in column '{}' is not a number", &header[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite feature '{tok}'"),
                });
            }
            feats.push(v);
        }
        let tok = &rec[label_col];
        let label = if tok.is_empty() || tok == "-1" {
            None
        } else {
            Some(tok.parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("label '{tok}' is not a class id"),
            })?)
        };
        let is_test = match split_col.map(|c| &rec[c]) {
            None | Some("") | Some("train") => false,
            Some("test") => true,
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    msg: format!("split '{other}' is neither train nor test"),
                })
            }
        };
        let tag = match (is_test, label) {
            (true, None) => {
                return Err(Error::Parse {
                    line,
                    msg: "test rows need a label".into(),
                })
            }
            (true, Some(_)) => Split::Test,
            (false, Some(_)) => Split::Labeled,
            (false, None) => Split::Unlabeled,
        };
        labels.push(label);
        split.push(tag);
    }
    let n = labels.len();
    let k = match schema.num_classes {
        Some(k) => k,
        None => labels.iter().flatten().max().map(|m| m + 1).unwrap_or(1),
    };
    Dataset::new(
        Tensor::matrix(n, feature_cols.len(), feats)?,
        labels,
        split,
        k,
    )
}

/// Writes `f0..f{d-1},label,split`. Every known class is written, including
/// hidden classes of unlabeled rows; rows without one get `-1`.
pub fn write_csv<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("split".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect();
        fields.push(
            ds.labels[i]
                .map(|c| c.to_string())
                .unwrap_or_else(|| "-1".into()),
        );
        fields.push(if ds.split[i] == Split::Test { "test" } else { "train" }.into());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}
