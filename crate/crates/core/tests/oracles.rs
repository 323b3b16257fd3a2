//! Library results against oracles written from scratch here: a hand-coded
//! one-hidden-layer tanh network with manual backprop, closed-form least
//! squares curvature, and a manual trace of one exact training step.

use metassl::data::{one_hot, LabeledBatch, UnlabeledBatch};
use metassl::losses::LossKind;
use metassl::meta::{self, FirstOrderOptions};
use metassl::model::{Activation, MlpClassifier};
use metassl::tensor::Tensor;
use metassl::trainer::{
    train_step_exact, train_step_first_order, OptimizerChoice, Projection, Schedule, StepRates,
    TrainConfig, TrainState,
};
use metassl::verify::{self, rel_err_inf};
use metassl::{augment, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d -> h (tanh) -> k (softmax), parameters laid out as the library does:
/// per layer a row-major fan_in x fan_out weight block, then the biases.
struct Net {
    d: usize,
    h: usize,
    k: usize,
}

impl Net {
    fn split<'a>(&self, th: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = th.split_at(self.d * self.h);
        let (b1, rest) = rest.split_at(self.h);
        let (w2, b2) = rest.split_at(self.h * self.k);
        (w1, b1, w2, b2)
    }

    /// Hidden activations and output probabilities for one input.
    fn forward(&self, th: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split(th);
        let z: Vec<f64> = (0..self.h)
            .map(|j| (b1[j] + (0..self.d).map(|i| x[i] * w1[i * self.h + j]).sum::<f64>()).tanh())
            .collect();
        let l: Vec<f64> = (0..self.k)
            .map(|c| b2[c] + (0..self.h).map(|j| z[j] * w2[j * self.k + c]).sum::<f64>())
            .collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        (z, e.iter().map(|v| v / s).collect())
    }

    fn example_loss(kind: LossKind, p: &[f64], y: &[f64]) -> f64 {
        match kind {
            LossKind::Kl => p
                .iter()
                .zip(y)
                .filter(|(_, &yy)| yy > 0.0)
                .map(|(&pp, &yy)| yy * (yy / pp).ln())
                .sum(),
            LossKind::Mse => p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    }

    fn loss(&self, th: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>], kind: LossKind) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| Self::example_loss(kind, &self.forward(th, x).1, y))
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Manual backprop of the mean loss.
    fn grad(&self, th: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>], kind: LossKind) -> Vec<f64> {
        let (_, _, w2, _) = self.split(th);
        let n = th.len();
        let mut g = vec![0.0; n];
        let o_b1 = self.d * self.h;
        let o_w2 = o_b1 + self.h;
        let o_b2 = o_w2 + self.h * self.k;
        for (x, y) in xs.iter().zip(ys) {
            let (z, p) = self.forward(th, x);
            let dl: Vec<f64> = match kind {
                LossKind::Kl => p.iter().zip(y).map(|(a, b)| a - b).collect(),
                LossKind::Mse => {
                    let dp: Vec<f64> = p.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect();
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    p.iter().zip(&dp).map(|(a, b)| a * (b - dot)).collect()
                }
            };
            for c in 0..self.k {
                g[o_b2 + c] += dl[c];
                for j in 0..self.h {
                    g[o_w2 + j * self.k + c] += z[j] * dl[c];
                }
            }
            for j in 0..self.h {
                let dz: f64 = (0..self.k).map(|c| w2[j * self.k + c] * dl[c]).sum();
                let da = dz * (1.0 - z[j] * z[j]);
                g[o_b1 + j] += da;
                for i in 0..self.d {
                    g[i * self.h + j] += x[i] * da;
                }
            }
        }
        g.iter().map(|v| v / xs.len() as f64).collect()
    }

    /// Labeled KL loss after one virtual step on the MSE consistency loss.
    fn unrolled(&self, th: &[f64], xu: &[Vec<f64>], yt: &[Vec<f64>], xl: &[Vec<f64>], yl: &[Vec<f64>], alpha: f64) -> f64 {
        let g = self.grad(th, xu, yt, LossKind::Mse);
        let moved: Vec<f64> = th.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
        self.loss(&moved, xl, yl, LossKind::Kl)
    }

    fn hypergrad(&self, th: &[f64], xu: &[Vec<f64>], yt: &[Vec<f64>], xl: &[Vec<f64>], yl: &[Vec<f64>], alpha: f64, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..yt.len() {
            for j in 0..self.k {
                let mut p = yt.to_vec();
                p[i][j] += h;
                let mut m = yt.to_vec();
                m[i][j] -= h;
                out.push((self.unrolled(th, xu, &p, xl, yl, alpha) - self.unrolled(th, xu, &m, xl, yl, alpha)) / (2.0 * h));
            }
        }
        out
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

struct Instance {
    net: Net,
    model: MlpClassifier,
    unlabeled: UnlabeledBatch,
    labeled: LabeledBatch,
}

fn instance(seed: u64, d: usize, h: usize, k: usize, bu: usize, bl: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MlpClassifier::new(&[d, h, k], Activation::Tanh, seed).unwrap();
    // shift biases off zero so they carry gradient signal
    let p: Vec<f64> = model.params().as_slice().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    let model = model
        .with_params(metassl::ParamVector::new(p, model.layout().to_vec()).unwrap())
        .unwrap();
    let mut m = |n: usize| Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let xu = m(bu);
    let xl = m(bl);
    let classes: Vec<usize> = (0..bl).map(|i| (i * 7 + seed as usize) % k).collect();
    Instance {
        net: Net { d, h, k },
        model,
        unlabeled: UnlabeledBatch {
            indices: (0..bu).collect(),
            x: xu,
        },
        labeled: LabeledBatch {
            indices: (0..bl).collect(),
            x: xl,
            y: one_hot(&classes, k).unwrap(),
        },
    }
}

#[test]
fn tape_gradients_match_manual_backprop() {
    for seed in 0..20 {
        let inst = instance(seed, 3, 5, 3, 4, 4);
        let th = inst.model.params().as_slice();
        let xs = rows(&inst.unlabeled.x);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ys: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let y = Tensor::from_rows(&ys).unwrap();
        for kind in [LossKind::Kl, LossKind::Mse] {
            let (loss, g) = inst.model.loss_and_grad(&inst.unlabeled.x, &y, kind).unwrap();
            let manual_loss = inst.net.loss(th, &xs, &ys, kind);
            assert!((loss - manual_loss).abs() <= 1e-12 * manual_loss.abs().max(1.0));
            let manual = inst.net.grad(th, &xs, &ys, kind);
            assert!(rel_err_inf(g.as_slice(), &manual) < 1e-12, "{kind:?} seed {seed}");
        }
    }
}

#[test]
fn exact_meta_gradient_matches_manual_unrolled_pipeline() {
    for seed in 0..10 {
        let inst = instance(seed, 2, 6, 2, 3, 5);
        let th = inst.model.params().as_slice();
        let pseudo = meta::init_pseudo_labels(&inst.model, &inst.unlabeled).unwrap();
        let alpha = 0.4;
        let exact = meta::exact_meta_gradient(&inst.model, &inst.unlabeled, &pseudo, &inst.labeled, alpha).unwrap();
        let manual = inst.net.hypergrad(
            th,
            &rows(&inst.unlabeled.x),
            &rows(&pseudo.y_init),
            &rows(&inst.labeled.x),
            &rows(&inst.labeled.y),
            alpha,
            1e-4,
        );
        let err = rel_err_inf(exact.y_grad.data(), &manual);
        assert!(err < 1e-7, "seed {seed}: {err:e}");
    }
}

#[test]
fn oracle_difference_steps_agree_to_second_order() {
    let inst = instance(3, 2, 8, 2, 4, 4);
    let y = inst.model.forward(&inst.unlabeled.x).unwrap();
    let a = verify::hypergrad_oracle(&inst.model, &inst.unlabeled.x, &y, &inst.labeled, 0.5, 1e-3).unwrap();
    let b = verify::hypergrad_oracle(&inst.model, &inst.unlabeled.x, &y, &inst.labeled, 0.5, 5e-4).unwrap();
    // H is quadratic-dominated in y, so the O(h²) term is tiny; the gap must
    // be far below the gradient scale
    let gap = rel_err_inf(a.data(), b.data());
    assert!(gap < 1e-6, "{gap:e}");
}

#[test]
fn library_oracle_matches_manual_oracle() {
    let inst = instance(8, 2, 4, 3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let yt: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    let y = Tensor::from_rows(&yt).unwrap();
    let lib = verify::hypergrad_oracle(&inst.model, &inst.unlabeled.x, &y, &inst.labeled, 0.3, 1e-4).unwrap();
    let manual = inst.net.hypergrad(
        inst.model.params().as_slice(),
        &rows(&inst.unlabeled.x),
        &yt,
        &rows(&inst.labeled.x),
        &rows(&inst.labeled.y),
        0.3,
        1e-4,
    );
    assert!(rel_err_inf(lib.data(), &manual) < 1e-7);
}

#[test]
fn closed_form_is_refused_away_from_initialization() {
    let inst = instance(1, 2, 4, 2, 3, 3);
    let mut pseudo = meta::init_pseudo_labels(&inst.model, &inst.unlabeled).unwrap();
    pseudo.y_init = pseudo.y_init.map("shift", |v| 0.9 * v + 0.05).unwrap();
    let r = meta::exact_meta_gradient(&inst.model, &inst.unlabeled, &pseudo, &inst.labeled, 0.1);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn first_order_tracks_exact_as_eps_shrinks() {
    let inst = instance(5, 2, 8, 2, 4, 4);
    let pseudo = meta::init_pseudo_labels(&inst.model, &inst.unlabeled).unwrap();
    let exact = meta::exact_meta_gradient(&inst.model, &inst.unlabeled, &pseudo, &inst.labeled, 0.2).unwrap();
    let err = |eps_rule| {
        let fo = meta::first_order_meta_gradient(
            &inst.model,
            &inst.unlabeled,
            &inst.labeled,
            0.2,
            FirstOrderOptions {
                eps_rule,
                unscaled: false,
            },
        )
        .unwrap();
        rel_err_inf(fo.y_grad.data(), exact.y_grad.data())
    };
    let (coarse, fine) = (err(0.1), err(0.01));
    assert!(fine < coarse, "{fine:e} vs {coarse:e}");
    // symmetric differences: ten times smaller ε, about a hundred times less error
    assert!(fine < coarse / 30.0);
}

/// λ_max of the 2x2 symmetric matrix [[a, b], [b, c]].
fn top_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

#[test]
fn l0_of_least_squares_approaches_hessian_norm_from_below() {
    let x = [[1.0, 0.2], [0.3, -1.5], [2.0, 0.7], [-0.4, 0.9]];
    let y = [0.5, -1.0, 0.3, 2.0];
    let n = x.len() as f64;
    let grad = |th: &[f64]| -> metassl::Result<Vec<f64>> {
        let mut g = vec![0.0; 2];
        for (row, t) in x.iter().zip(&y) {
            let r = row[0] * th[0] + row[1] * th[1] - t;
            g[0] += 2.0 * r * row[0] / n;
            g[1] += 2.0 * r * row[1] / n;
        }
        Ok(g)
    };
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for row in &x {
        a += 2.0 * row[0] * row[0] / n;
        b += 2.0 * row[0] * row[1] / n;
        c += 2.0 * row[1] * row[1] / n;
    }
    let lmax = top_eigenvalue(a, b, c);
    let mut prev = 0.0;
    for probes in 1..=4 {
        let est = verify::estimate_l0_with(grad, &[0.3, -0.2], probes, 0.1, 9).unwrap();
        assert!(est <= lmax * (1.0 + 1e-12), "{est} above {lmax}");
        assert!(est >= prev, "not monotone in probes");
        prev = est;
    }
    assert!(prev > 0.999 * lmax, "{prev} vs {lmax}");
}

#[test]
fn jacobian_matches_manual_differences() {
    let inst = instance(2, 3, 4, 3, 1, 1);
    let th = inst.model.params().as_slice().to_vec();
    let x = inst.unlabeled.x.row(0).to_vec();
    let jac = inst.model.jacobian(&x, metassl::model::Head::Probabilities).unwrap();
    let h = 1e-6;
    let p = th.len();
    let mut fd = vec![0.0; 3 * p];
    for l in 0..p {
        let mut a = th.clone();
        a[l] += h;
        let mut b = th.clone();
        b[l] -= h;
        let (_, pa) = inst.net.forward(&a, &x);
        let (_, pb) = inst.net.forward(&b, &x);
        for c in 0..3 {
            fd[c * p + l] = (pa[c] - pb[c]) / (2.0 * h);
        }
    }
    assert!(rel_err_inf(jac.data(), &fd) < 1e-8);
}

fn checked_descent_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![4],
        activation: Activation::Tanh,
        alpha: Schedule::constant(0.3),
        beta: Some(Schedule::constant(0.7)),
        optimizer: OptimizerChoice::Plain,
        projection: Projection::Off,
        consistency_weight: 1.0,
        ..TrainConfig::default()
    }
}

#[test]
fn exact_step_matches_manual_trace() {
    let inst = instance(4, 2, 4, 2, 3, 4);
    let cfg = checked_descent_config();
    let mut state = TrainState::new(inst.model.clone(), &cfg);
    let rec = train_step_exact(&mut state, &inst.labeled, &inst.unlabeled, &cfg, StepRates { alpha: 0.3, beta: 0.7 }).unwrap();

    let th = inst.model.params().as_slice();
    let xu = rows(&inst.unlabeled.x);
    let xl = rows(&inst.labeled.x);
    let yl = rows(&inst.labeled.y);
    let yt: Vec<Vec<f64>> = xu.iter().map(|x| inst.net.forward(th, x).1).collect();
    let hg = inst.net.hypergrad(th, &xu, &yt, &xl, &yl, 0.3, 1e-4);
    let yhat: Vec<Vec<f64>> = yt
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v - 0.7 * hg[i * 2 + j]).collect())
        .collect();
    let g = inst.net.grad(th, &xu, &yhat, LossKind::Mse);
    let expected: Vec<f64> = th.iter().zip(&g).map(|(a, b)| a - 0.3 * b).collect();
    assert!(rel_err_inf(state.model.params().as_slice(), &expected) < 1e-9);
    assert!((rec.g_before - inst.net.loss(th, &xl, &yl, LossKind::Kl)).abs() < 1e-12);
    assert!((rec.g_after - inst.net.loss(&expected, &xl, &yl, LossKind::Kl)).abs() < 1e-9);
}

#[test]
fn zero_beta_leaves_parameters_untouched() {
    let inst = instance(6, 2, 4, 2, 3, 4);
    let cfg = checked_descent_config();
    let mut state = TrainState::new(inst.model.clone(), &cfg);
    let rec = train_step_exact(&mut state, &inst.labeled, &inst.unlabeled, &cfg, StepRates { alpha: 0.3, beta: 0.0 }).unwrap();
    assert_eq!(state.model.params(), inst.model.params());
    assert_eq!(rec.consistency_loss, 0.0);
    assert_eq!(rec.g_after, rec.g_before);
}

#[test]
fn first_order_step_equals_composition_of_ops() {
    let inst = instance(7, 2, 5, 2, 4, 4);
    let cfg = TrainConfig {
        hidden: vec![5],
        activation: Activation::Tanh,
        ..TrainConfig::default()
    };
    let rates = StepRates { alpha: 0.2, beta: 0.2 };
    let mut state = TrainState::new(inst.model.clone(), &cfg);
    let mut rng = state.mix_rng.clone();
    let mut opt = state.optimizer.clone();
    train_step_first_order(&mut state, &inst.labeled, &inst.unlabeled, &cfg, rates).unwrap();

    let m = &inst.model;
    let pseudo = meta::init_pseudo_labels(m, &inst.unlabeled).unwrap();
    let mg = meta::first_order_meta_gradient(m, &inst.unlabeled, &inst.labeled, 0.2, FirstOrderOptions::default()).unwrap();
    let pseudo = meta::update_pseudo_labels(&pseudo.with_grad(mg.y_grad).unwrap(), 0.2, true).unwrap();
    let yhat = pseudo.y_updated.unwrap();
    let mb = augment::mixup(&inst.labeled.x, &inst.labeled.y, &inst.unlabeled.x, &yhat, 1.0, &mut rng).unwrap();
    let (_, g1) = m.loss_and_grad(&mb.x_in, &mb.y_in, LossKind::Kl).unwrap();
    let (_, g2) = m.loss_and_grad(&inst.unlabeled.x, &yhat, LossKind::Mse).unwrap();
    let g = g1.axpy(1.0, &g2).unwrap();
    let expected = opt.step(m.params(), &g, 0.2).unwrap();
    assert_eq!(state.model.params(), &expected);
    assert_eq!(state.mix_rng, rng);
}
