//! Text checkpoint format, version 1.
//!
//! ```text
//! metassl-checkpoint 1
//! activation relu
//! layers 2 16 16 2
//! standardize 2            # or `standardize none`
//! mean 0.1 -0.3            # only when standardize is not none
//! std 1.2 0.9
//! params 338
//! <one parameter per line>
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a save/load cycle is
//! bit-exact. Parameters follow the flat layout: per layer, the row-major
//! `fan_in x fan_out` weights, then the biases.

use std::fmt::Write as _;
use std::path::Path;

use super::{layout_for, Activation, MlpClassifier, ParamVector};
use crate::data::Standardizer;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "metassl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained classifier plus the feature standardization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpClassifier,
    pub standardizer: Option<Standardizer>,
}

fn join(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Checkpoint {
    pub fn new(model: MlpClassifier, standardizer: Option<Standardizer>) -> Self {
        Checkpoint {
            model,
            standardizer,
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "activation {}", m.activation().tag());
        let sizes: Vec<String> = m.layer_sizes().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "layers {}", sizes.join(" "));
        match &self.standardizer {
            None => {
                let _ = writeln!(s, "standardize none");
            }
            Some(st) => {
                let _ = writeln!(s, "standardize {}", st.mean.len());
                let _ = writeln!(s, "mean {}", join(&st.mean));
                let _ = writeln!(s, "std {}", join(&st.std));
            }
        }
        let _ = writeln!(s, "params {}", m.num_params());
        for v in m.params().as_slice() {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i as u64 + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        let mut next = |what: &str| -> Result<(u64, Vec<&str>)> {
            let (n, l) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("checkpoint ends before {what}"),
            })?;
            Ok((n, l.split_whitespace().collect()))
        };
        let bad = |line: u64, msg: String| Error::Parse { line, msg };
        let float = |line: u64, tok: &str| -> Result<f64> {
            tok.parse::<f64>()
                .map_err(|_| bad(line, format!("'{tok}' is not a number")))
        };

        let (n, head) = next("header")?;
        if head.len() != 2 || head[0] != CHECKPOINT_MAGIC {
            return Err(bad(n, "not a metassl checkpoint".into()));
        }
        if head[1] != CHECKPOINT_VERSION.to_string() {
            return Err(bad(n, format!("unsupported checkpoint version {}", head[1])));
        }

        let (n, act) = next("activation")?;
        if act.len() != 2 || act[0] != "activation" {
            return Err(bad(n, "expected 'activation <tag>'".into()));
        }
        let activation = Activation::from_tag(act[1])?;

        let (n, layers) = next("layers")?;
        if layers.first() != Some(&"layers") {
            return Err(bad(n, "expected 'layers ...'".into()));
        }
        let sizes = layers[1..]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(n, e.to_string()))?;

        let (n, st) = next("standardize")?;
        if st.len() != 2 || st[0] != "standardize" {
            return Err(bad(n, "expected 'standardize <d|none>'".into()));
        }
        let standardizer = if st[1] == "none" {
            None
        } else {
            let d: usize = st[1].parse().map_err(|_| bad(n, "bad dimension".into()))?;
            let (nm, mean) = next("mean")?;
            let (ns, std) = next("std")?;
            if mean.first() != Some(&"mean") || mean.len() != d + 1 {
                return Err(bad(nm, format!("expected 'mean' with {d} values")));
            }
            if std.first() != Some(&"std") || std.len() != d + 1 {
                return Err(bad(ns, format!("expected 'std' with {d} values")));
            }
            Some(Standardizer {
                mean: mean[1..]
                    .iter()
                    .map(|t| float(nm, t))
                    .collect::<Result<_>>()?,
                std: std[1..]
                    .iter()
                    .map(|t| float(ns, t))
                    .collect::<Result<_>>()?,
            })
        };

        let (n, p) = next("params")?;
        if p.len() != 2 || p[0] != "params" {
            return Err(bad(n, "expected 'params <count>'".into()));
        }
        let count: usize = p[1].parse().map_err(|_| bad(n, "bad count".into()))?;
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, tok) = next("parameter values")?;
            if tok.len() != 1 {
                return Err(bad(n, "expected one value per line".into()));
            }
            flat.push(float(n, tok[0])?);
        }
        if lines.next().is_some() {
            return Err(bad(0, "trailing data after parameters".into()));
        }

        let params = ParamVector::new(flat, layout_for(&sizes))
            .map_err(|e| Error::Schema(format!("checkpoint parameters: {e}")))?;
        let model = MlpClassifier::from_params(&sizes, activation, params)?;
        Ok(Checkpoint {
            model,
            standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_bit_exact() {
        let model = MlpClassifier::new(&[2, 5, 3], Activation::Tanh, 11).unwrap();
        let ck = Checkpoint::new(
            model,
            Some(Standardizer {
                mean: vec![0.1, -1.0 / 3.0],
                std: vec![1.0 / 7.0, 2.5],
            }),
        );
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back
            .model
            .params()
            .as_slice()
            .iter()
            .zip(ck.model.params().as_slice())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_counts() {
        assert!(Checkpoint::parse("hello 1\n").is_err());
        let model = MlpClassifier::new(&[2, 2], Activation::Relu, 0).unwrap();
        let text = Checkpoint::new(model, None).to_text();
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::parse(&truncated).is_err());
        let wrong_version = text.replacen("checkpoint 1", "checkpoint 9", 1);
        assert!(Checkpoint::parse(&wrong_version).is_err());
    }
}
