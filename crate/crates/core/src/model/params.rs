use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Where one dense layer's weights and bias live inside the flat vector.
///
/// Weights are stored row-major as `fan_in x fan_out`, followed by the
/// `fan_out` bias entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

/// Builds the layout for consecutive dense layers of the given widths.
pub fn layout_for(layer_sizes: &[usize]) -> Vec<LayerLayout> {
    let mut offset = 0;
    layer_sizes
        .windows(2)
        .map(|w| {
            let l = LayerLayout {
                offset,
                fan_in: w[0],
                fan_out: w[1],
            };
            offset = l.end();
            l
        })
        .collect()
}

/// All model parameters as one flat vector plus per-layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    flat: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn new(flat: Vec<f64>, layout: Vec<LayerLayout>) -> Result<Self> {
        let expected = layout.last().map(|l| l.end()).unwrap_or(0);
        if flat.len() != expected {
            return Err(Error::dim(format!(
                "parameter vector of length {} for a layout of {expected}",
                flat.len()
            )));
        }
        Ok(ParamVector { flat, layout })
    }

    pub fn zeros(layout: Vec<LayerLayout>) -> Self {
        let n = layout.last().map(|l| l.end()).unwrap_or(0);
        ParamVector {
            flat: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    /// Reassembles a vector from per-layer `(weight, bias)` tensors.
    pub fn flatten(layers: &[(Tensor, Tensor)]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(layers.len() + 1);
        let mut flat = Vec::new();
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.shape().len() != 2 || b.len() != w.shape()[1] {
                return Err(Error::dim(format!(
                    "layer {i}: weight {:?} with bias of length {}",
                    w.shape(),
                    b.len()
                )));
            }
            if i == 0 {
                sizes.push(w.shape()[0]);
            } else if sizes[i] != w.shape()[0] {
                return Err(Error::dim(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    w.shape()[0],
                    sizes[i]
                )));
            }
            sizes.push(w.shape()[1]);
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b.data());
        }
        ParamVector::new(flat, layout_for(&sizes))
    }

    /// Splits the vector into per-layer `(weight, bias)` tensors.
    pub fn unflatten(&self) -> Vec<(Tensor, Tensor)> {
        self.layout
            .iter()
            .map(|l| {
                let w = Tensor::new(
                    vec![l.fan_in, l.fan_out],
                    self.flat[l.offset..l.bias_offset()].to_vec(),
                )
                .expect("layout is consistent");
                let b = Tensor::vector(self.flat[l.bias_offset()..l.end()].to_vec());
                (w, b)
            })
            .collect()
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.flat.clone())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::dim(format!(
                "parameter layouts differ ({} vs {} entries)",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// `self + eps * g`.
    pub fn axpy(&self, eps: f64, g: &ParamVector) -> Result<ParamVector> {
        self.check_layout(g)?;
        let flat: Vec<f64> = self
            .flat
            .iter()
            .zip(&g.flat)
            .map(|(a, b)| a + eps * b)
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        Ok(ParamVector {
            flat,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector {
            flat: self.flat.iter().map(|v| v * s).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(tensor::dot(&self.flat, &other.flat))
    }

    pub fn norm(&self) -> f64 {
        tensor::norm(&self.flat)
    }

    /// Mask selecting weight entries (1.0) and zeroing biases.
    pub fn weight_mask(&self) -> ParamVector {
        let mut flat = vec![0.0; self.len()];
        for l in &self.layout {
            flat[l.offset..l.bias_offset()].fill(1.0);
        }
        ParamVector {
            flat,
            layout: self.layout.clone(),
        }
    }
}
