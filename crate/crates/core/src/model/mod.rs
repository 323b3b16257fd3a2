//! The classifier `f(x; θ)`: a dense multilayer perceptron with a softmax
//! output, plus the parameter-space tools the meta step needs (perturbed
//! evaluation, Jacobian rows, Jacobian-vector products, spectral norms).

mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{layout_for, LayerLayout, ParamVector};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(self, t: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => t.relu(),
            Activation::Tanh => t.tanh(),
        }
    }
}

/// Which output a Jacobian is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Softmax probabilities, the classifier output proper.
    Probabilities,
    /// Raw pre-softmax logits.
    Logits,
}

/// Forward values recorded on a tape, with handles to every parameter leaf.
#[derive(Debug)]
pub struct Recorded {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
}

impl Recorded {
    /// Collects parameter gradients back into flat layout order.
    pub fn param_grad(&self, grads: &Gradients, layout: &[LayerLayout]) -> Result<ParamVector> {
        let mut flat = Vec::with_capacity(layout.last().map(|l| l.end()).unwrap_or(0));
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(grads.wrt(*w).data());
            flat.extend_from_slice(grads.wrt(*b).data());
        }
        ParamVector::new(flat, layout.to_vec())
    }
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianNormEstimate {
    /// Largest singular value found.
    pub value: f64,
    /// False when power iteration hit its iteration cap on some input.
    pub converged: bool,
    /// Row of the sample that attained the maximum.
    pub argmax: usize,
}

pub const POWER_ITER_CAP: usize = 1000;
pub const POWER_ITER_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: ParamVector,
}

impl MlpClassifier {
    /// Seeded initialization: weights uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn new(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut model = MlpClassifier::zeros(layer_sizes, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = model.params.as_slice().to_vec();
        for l in model.params.layout() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for v in &mut flat[l.offset..l.bias_offset()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        model.params = ParamVector::new(flat, model.params.layout().to_vec())?;
        Ok(model)
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes {layer_sizes:?} need an input and an output width, all positive"
            )));
        }
        Ok(MlpClassifier {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params: ParamVector::zeros(layout_for(layer_sizes)),
        })
    }

    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: ParamVector,
    ) -> Result<Self> {
        let mut m = MlpClassifier::zeros(layer_sizes, activation)?;
        m.set_params(params)?;
        Ok(m)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> &[LayerLayout] {
        self.params.layout()
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.layout() != self.params.layout() {
            return Err(Error::dim(format!(
                "parameters of length {} do not fit a {:?} network",
                params.len(),
                self.layer_sizes
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "input width {} but the model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn logits_with(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let layers = params.unflatten();
        let last = layers.len() - 1;
        let mut h = x.as_matrix();
        for (i, (w, b)) in layers.iter().enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i < last {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }

    /// Pre-softmax outputs, `B x K`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_with(&self.params, x)
    }

    /// Class probabilities, `B x K`; each row is a distribution.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.logits(x)?.softmax()
    }

    /// Forward pass at `θ + sign * eps * g`; the model itself is untouched.
    pub fn perturbed_forward(
        &self,
        x: &Tensor,
        g: &ParamVector,
        eps: f64,
        sign: f64,
    ) -> Result<Tensor> {
        let shifted = self.params.axpy(sign * eps, g)?;
        self.logits_with(&shifted, x)?.softmax()
    }

    /// Records the forward pass on `tape` with every parameter as a leaf.
    pub fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<Recorded> {
        self.check_input(x)?;
        let layers = self.params.unflatten();
        let last = layers.len() - 1;
        let mut h = tape.leaf(x.as_matrix())?;
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        for (i, (w, b)) in layers.into_iter().enumerate() {
            let wv = tape.leaf(w)?;
            let bv = tape.leaf(b)?;
            weights.push(wv);
            biases.push(bv);
            let z = tape.matmul(h, wv)?;
            h = tape.add_row(z, bv)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        let probs = tape.softmax(h)?;
        Ok(Recorded {
            weights,
            biases,
            logits: h,
            probs,
        })
    }

    /// Batch-mean loss of the probabilities against `targets` and its
    /// gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        targets: &Tensor,
        kind: LossKind,
    ) -> Result<(f64, ParamVector)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let loss = match kind {
            LossKind::Kl => tape.kl_mean(rec.probs, targets)?,
            LossKind::Mse => {
                let t = tape.leaf(targets.clone())?;
                tape.mse_mean(rec.probs, t)?
            }
        };
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss, None)?;
        Ok((value, rec.param_grad(&grads, self.layout())?))
    }

    /// Batch-mean loss without gradients.
    pub fn loss(&self, x: &Tensor, targets: &Tensor, kind: LossKind) -> Result<f64> {
        crate::losses::batch_loss(kind, &self.forward(x)?, targets)
    }

    /// Full Jacobian of one example's output with respect to the parameters,
    /// `K x P`, one backward pass per output entry.
    pub fn jacobian(&self, x: &[f64], head: Head) -> Result<Tensor> {
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &xt)?;
        let out = match head {
            Head::Probabilities => rec.probs,
            Head::Logits => rec.logits,
        };
        let k = self.num_classes();
        let p = self.num_params();
        let mut data = Vec::with_capacity(k * p);
        for j in 0..k {
            let mut seed = vec![0.0; k];
            seed[j] = 1.0;
            let grads = tape.backward_retain(out, Some(Tensor::vector(seed)))?;
            data.extend(rec.param_grad(&grads, self.layout())?.into_vec());
        }
        Tensor::matrix(k, p, data)
    }

    /// `J_θ f(x; θ) · v` for a single example, computed from the exact
    /// Jacobian rows.
    pub fn jacobian_vector_product(&self, x: &Tensor, v: &ParamVector) -> Result<Tensor> {
        if x.rows() != 1 {
            return Err(Error::dim(format!(
                "jacobian_vector_product takes one example, got {}",
                x.rows()
            )));
        }
        if v.layout() != self.layout() {
            return Err(Error::dim("direction does not match the parameter layout"));
        }
        let jac = self.jacobian(x.row(0), Head::Probabilities)?;
        jvp_rows(&jac, v.as_slice())
    }

    /// `J_θ f(x; θ)^T · u` for a single example: one seeded backward pass.
    pub fn vector_jacobian_product(&self, x: &Tensor, u: &[f64]) -> Result<ParamVector> {
        if x.rows() != 1 || u.len() != self.num_classes() {
            return Err(Error::dim(format!(
                "vector_jacobian_product takes one example and {} cotangents",
                self.num_classes()
            )));
        }
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let grads = tape.backward(rec.probs, Some(Tensor::vector(u.to_vec())))?;
        rec.param_grad(&grads, self.layout())
    }

    /// Largest spectral norm of `J_θ f` over the rows of `xs`, each found by
    /// power iteration on `J Jᵀ`.
    pub fn jacobian_norm_estimate(
        &self,
        xs: &Tensor,
        head: Head,
        seed: u64,
    ) -> Result<JacobianNormEstimate> {
        if xs.rows() == 0 || xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_input(xs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = JacobianNormEstimate {
            value: 0.0,
            converged: true,
            argmax: 0,
        };
        for i in 0..xs.rows() {
            let jac = self.jacobian(xs.row(i), head)?;
            let (sigma, ok) = spectral_norm(&jac, &mut rng)?;
            best.converged &= ok;
            if sigma > best.value {
                best.value = sigma;
                best.argmax = i;
            }
        }
        Ok(best)
    }
}

/// Multiplies a row-major `K x P` Jacobian by a parameter-space vector.
pub fn jvp_rows(jac: &Tensor, v: &[f64]) -> Result<Tensor> {
    if jac.cols() != v.len() {
        return Err(Error::dim(format!(
            "Jacobian with {} columns against a vector of {}",
            jac.cols(),
            v.len()
        )));
    }
    let out = (0..jac.rows()).map(|r| tensor::dot(jac.row(r), v)).collect();
    Tensor::produced(vec![jac.rows()], out, "jacobian_vector_product")
}

/// `Jᵀ u` for a row-major `K x P` Jacobian.
pub fn vjp_rows(jac: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; jac.cols()];
    for (r, &ur) in u.iter().enumerate() {
        for (o, j) in out.iter_mut().zip(jac.row(r)) {
            *o += ur * j;
        }
    }
    out
}

/// Power iteration on `J Jᵀ` through `Jᵀ u` and `J w`. Returns the largest
/// singular value and whether the iteration converged within the cap.
pub fn spectral_norm<R: Rng>(jac: &Tensor, rng: &mut R) -> Result<(f64, bool)> {
    let k = jac.rows();
    let mut u: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = tensor::norm(&u);
    if n0 == 0.0 {
        u[0] = 1.0;
    } else {
        u.iter_mut().for_each(|v| *v /= n0);
    }
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_CAP {
        let w = vjp_rows(jac, &u);
        let next = jvp_rows(jac, &w)?.into_data();
        let n = tensor::norm(&next);
        if n == 0.0 {
            return Ok((0.0, true));
        }
        let done = (n - lambda).abs() <= POWER_ITER_TOL * n;
        lambda = n;
        u = next.into_iter().map(|v| v / n).collect();
        if done {
            return Ok((lambda.sqrt(), true));
        }
    }
    Ok((lambda.sqrt(), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_forward(model: &MlpClassifier, x: &[f64]) -> Vec<f64> {
        let layers = model.params().unflatten();
        let mut h = x.to_vec();
        for (li, (w, b)) in layers.iter().enumerate() {
            let (fin, fout) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; fout];
            for (o, nv) in next.iter_mut().enumerate() {
                let mut acc = b.data()[o];
                for (i, hv) in h.iter().enumerate().take(fin) {
                    acc += hv * w.data()[i * fout + o];
                }
                *nv = acc;
            }
            if li + 1 < layers.len() {
                for v in &mut next {
                    *v = match model.activation() {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            h = next;
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn param_count_formula() {
        let m = MlpClassifier::new(&[2, 16, 16, 2], Activation::Relu, 0).unwrap();
        assert_eq!(m.num_params(), 3 * 16 + 17 * 16 + 17 * 2);
    }

    #[test]
    fn zero_network_is_uniform() {
        let m = MlpClassifier::zeros(&[3, 5, 4], Activation::Tanh).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap();
        let p = m.forward(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn duplicated_rows_give_identical_outputs() {
        let m = MlpClassifier::new(&[2, 4, 3], Activation::Relu, 5).unwrap();
        let x = Tensor::from_rows(&vec![[0.3, -1.2]; 6]).unwrap();
        let p = m.forward(&x).unwrap();
        for r in 1..6 {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for act in [Activation::Relu, Activation::Tanh] {
            let m = MlpClassifier::new(&[2, 4, 2], act, 42).unwrap();
            let x = [0.7, -1.3];
            let got = m.forward(&Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap();
            let want = oracle_forward(&m, &x);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-15);
            }
            let s: f64 = got.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let m = MlpClassifier::new(&[2, 4, 2], Activation::Relu, 0).unwrap();
        let x = Tensor::zeros(&[3, 5]);
        assert!(matches!(m.forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn perturbed_forward_endpoints() {
        let m = MlpClassifier::new(&[2, 4, 2], Activation::Tanh, 1).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.9], [-1.0, 0.4]]).unwrap();
        let base = m.forward(&x).unwrap();
        let g = ParamVector::new(vec![0.37; m.num_params()], m.layout().to_vec()).unwrap();
        assert_eq!(m.perturbed_forward(&x, &g, 0.0, 1.0).unwrap(), base);
        let zero = m.params().zeros_like();
        assert_eq!(m.perturbed_forward(&x, &zero, 0.5, -1.0).unwrap(), base);

        let bad = ParamVector::zeros(layout_for(&[2, 3, 2]));
        assert!(m.perturbed_forward(&x, &bad, 0.1, 1.0).is_err());
    }

    #[test]
    fn jvp_of_zero_direction_is_zero() {
        let m = MlpClassifier::new(&[2, 4, 2], Activation::Tanh, 2).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let out = m.jacobian_vector_product(&x, &m.params().zeros_like()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_jacobian_of_linear_layer_is_closed_form() {
        // logits = x W + b, so d logit_k / d W[j, k] = x_j and d logit_k / d b_k = 1
        let m = MlpClassifier::new(&[3, 2], Activation::Relu, 9).unwrap();
        let x = [0.5, -1.5, 2.0];
        let jac = m.jacobian(&x, Head::Logits).unwrap();
        let v: Vec<f64> = (0..m.num_params()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let got = jvp_rows(&jac, &v).unwrap();
        // V reshaped: W block 3x2 then bias 2
        for k in 0..2 {
            let mut want = v[6 + k];
            for j in 0..3 {
                want += x[j] * v[j * 2 + k];
            }
            assert!((got.data()[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn vjp_agrees_with_jacobian_rows() {
        let m = MlpClassifier::new(&[2, 5, 3], Activation::Tanh, 4).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.1, 0.8]).unwrap();
        let u = [0.3, -1.0, 0.25];
        let jac = m.jacobian(x.row(0), Head::Probabilities).unwrap();
        let via_rows = vjp_rows(&jac, &u);
        let direct = m.vector_jacobian_product(&x, &u).unwrap();
        for (a, b) in via_rows.iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_norm_of_zero_is_zero() {
        let jac = Tensor::zeros(&[2, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spectral_norm(&jac, &mut rng).unwrap(), (0.0, true));
    }
}
