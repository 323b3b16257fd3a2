//! Numerical checks of the descent and rate guarantees.
//!
//! Constants such as the Jacobian bound `M` and the Lipschitz constant `L₀`
//! of the labeled-loss gradient are sampled estimates, not certified bounds,
//! and every report says so. Sampled checks multiply them by a safety factor
//! (2 by default).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{gen_blobs, one_hot, split_labels, LabeledBatch, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::meta::{self, FirstOrderOptions};
use crate::model::{Activation, Head, MlpClassifier, ParamVector};
use crate::tensor::{self, Tensor};
use crate::trainer::{self, MetricsSeries, Schedule, StepRecord, TrainConfig, DESCENT_TOL};

/// Secant refinement steps per L₀ probe.
pub const L0_REFINE: usize = 5;

/// `max|a − b| / max|b|`; zero when the vectors agree exactly.
pub fn rel_err_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Tape gradient of a batch loss against central differences with step `h`;
/// returns [`rel_err_inf`] of the two.
pub fn gradcheck(
    model: &MlpClassifier,
    x: &Tensor,
    targets: &Tensor,
    kind: LossKind,
    h: f64,
) -> Result<f64> {
    let (_, g) = model.loss_and_grad(x, targets, kind)?;
    let theta = model.params().as_slice().to_vec();
    let layout = model.layout().to_vec();
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let lp = model
            .with_params(ParamVector::new(plus, layout.clone())?)?
            .loss(x, targets, kind)?;
        let lm = model
            .with_params(ParamVector::new(minus, layout.clone())?)?
            .loss(x, targets, kind)?;
        fd.push((lp - lm) / (2.0 * h));
    }
    Ok(rel_err_inf(g.as_slice(), &fd))
}

/// H(ỹ): the labeled loss after one virtual step on the consistency loss
/// with pseudo-labels `y_tilde`.
pub fn unrolled_labeled_loss(
    model: &MlpClassifier,
    x_u: &Tensor,
    y_tilde: &Tensor,
    labeled: &LabeledBatch,
    alpha: f64,
) -> Result<f64> {
    let vs = meta::virtual_step(model, x_u, y_tilde, alpha)?;
    model
        .with_params(vs.theta_after)?
        .loss(&labeled.x, &labeled.y, LossKind::Kl)
}

/// Brute-force ∇H: central differences of [`unrolled_labeled_loss`] in
/// every pseudo-label entry.
pub fn hypergrad_oracle(
    model: &MlpClassifier,
    x_u: &Tensor,
    y_tilde: &Tensor,
    labeled: &LabeledBatch,
    alpha: f64,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("difference step must be positive, got {h}")));
    }
    let mut out = Vec::with_capacity(y_tilde.len());
    let base = y_tilde.data().to_vec();
    for e in 0..base.len() {
        let mut p = base.clone();
        p[e] += h;
        let mut m = base.clone();
        m[e] -= h;
        let yp = Tensor::new(y_tilde.shape().to_vec(), p)?;
        let ym = Tensor::new(y_tilde.shape().to_vec(), m)?;
        let hp = unrolled_labeled_loss(model, x_u, &yp, labeled, alpha)?;
        let hm = unrolled_labeled_loss(model, x_u, &ym, labeled, alpha)?;
        out.push((hp - hm) / (2.0 * h));
    }
    Tensor::new(y_tilde.shape().to_vec(), out)
}

/// Largest secant ratio `‖∇G(θ+δ) − ∇G(θ)‖ / ‖δ‖` over probes with
/// `‖δ‖ = radius`.
///
/// Each probe starts from a random direction and is refined by
/// [`L0_REFINE`] secant power steps (`δ ← radius · d / ‖d‖` with `d` the
/// gradient difference), which pulls it towards the direction of largest
/// curvature. Every probe consumes the same number of random draws, so the
/// estimate for `n` probes is a prefix of the one for `n + 1` and the result
/// never decreases with `n_probes`.
pub fn estimate_l0_with<F>(mut grad: F, theta: &[f64], n_probes: usize, radius: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n_probes == 0 {
        return Err(Error::Config("need at least one probe".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("probe radius must be positive, got {radius}")));
    }
    let g0 = grad(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..n_probes {
        let u: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = tensor::norm(&u);
        if n == 0.0 {
            continue;
        }
        let mut delta: Vec<f64> = u.iter().map(|v| v * radius / n).collect();
        for r in 0..=L0_REFINE {
            let shifted: Vec<f64> = theta.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let d: Vec<f64> = grad(&shifted)?.iter().zip(&g0).map(|(a, b)| a - b).collect();
            let dn = tensor::norm(&d);
            best = best.max(dn / tensor::norm(&delta));
            if r == L0_REFINE || dn == 0.0 {
                break;
            }
            delta = d.iter().map(|v| v * radius / dn).collect();
        }
    }
    Ok(best)
}

/// [`estimate_l0_with`] for the labeled KL loss of `model` on `labeled`.
/// An empty labeled set gives a constant loss and an estimate of zero.
pub fn estimate_l0(
    model: &MlpClassifier,
    labeled: &LabeledBatch,
    n_probes: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if labeled.is_empty() {
        if n_probes == 0 {
            return Err(Error::Config("need at least one probe".into()));
        }
        return Ok(0.0);
    }
    let layout = model.layout().to_vec();
    let grad = |th: &[f64]| -> Result<Vec<f64>> {
        let m = model.with_params(ParamVector::new(th.to_vec(), layout.clone())?)?;
        Ok(m.loss_and_grad(&labeled.x, &labeled.y, LossKind::Kl)?.1.into_vec())
    };
    estimate_l0_with(grad, model.params().as_slice(), n_probes, radius, seed)
}

/// `1 / (4 M² L₀ · safety)`; infinite when either constant is zero.
pub fn lr_bound(m_hat: f64, l0_hat: f64, safety: f64) -> f64 {
    let d = 4.0 * m_hat * m_hat * l0_hat * safety;
    if d > 0.0 {
        1.0 / d
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrCondition {
    /// α²β.
    pub product: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Strict check of `α²β < 1 / (4 M² L₀ · safety)`.
pub fn check_lr_condition(alpha: f64, beta: f64, m_hat: f64, l0_hat: f64, safety: f64) -> LrCondition {
    let product = alpha * alpha * beta;
    let bound = lr_bound(m_hat, l0_hat, safety);
    LrCondition {
        product,
        bound,
        satisfied: product < bound,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    /// 4 α² M² L₀ · safety.
    pub bound: f64,
    pub m_hat: f64,
    pub l0_hat: f64,
    pub pairs: usize,
    pub pass: bool,
}

fn random_distributions<R: Rng>(rows: usize, k: usize, rng: &mut R) -> Result<Tensor> {
    let logits: Vec<f64> = (0..rows * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            3.0 * z
        })
        .collect();
    Tensor::matrix(rows, k, logits)?.softmax()
}

/// Difference step used for every brute-force ∇H.
pub const ORACLE_H: f64 = 1e-4;

/// Samples pseudo-label pairs and compares the secant ratio of ∇H against
/// `4 α² M² L₀ · safety`, with ∇H from [`hypergrad_oracle`].
pub fn pseudo_label_lipschitz_check(
    model: &MlpClassifier,
    unlabeled: &UnlabeledBatch,
    labeled: &LabeledBatch,
    alpha: f64,
    n_pairs: usize,
    seed: u64,
    safety: f64,
) -> Result<LipschitzReport> {
    if n_pairs == 0 {
        return Err(Error::Config("need at least one pair".into()));
    }
    let b = unlabeled.len();
    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    let mut radius: f64 = 0.0;
    for _ in 0..n_pairs {
        let y1 = random_distributions(b, k, &mut rng)?;
        let mut y2 = random_distributions(b, k, &mut rng)?;
        while y2.sub(&y1)?.max_abs() == 0.0 {
            y2 = random_distributions(b, k, &mut rng)?;
        }
        for y in [&y1, &y2] {
            let vs = meta::virtual_step(model, &unlabeled.x, y, alpha)?;
            radius = radius.max(vs.grad.norm() * alpha);
        }
        let g1 = hypergrad_oracle(model, &unlabeled.x, &y1, labeled, alpha, ORACLE_H)?;
        let g2 = hypergrad_oracle(model, &unlabeled.x, &y2, labeled, alpha, ORACLE_H)?;
        let ratio = g1.sub(&g2)?.norm() / y1.sub(&y2)?.norm();
        max_ratio = max_ratio.max(ratio);
    }
    let m = model.jacobian_norm_estimate(&unlabeled.x, Head::Probabilities, seed)?;
    let l0 = estimate_l0(model, labeled, 4, radius.max(1e-6), seed)?;
    let bound = 4.0 * alpha * alpha * m.value * m.value * l0 * safety;
    Ok(LipschitzReport {
        max_ratio,
        bound,
        m_hat: m.value,
        l0_hat: l0,
        pairs: n_pairs,
        pass: max_ratio <= bound,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub steps: usize,
    /// Steps where G rose by more than [`DESCENT_TOL`].
    pub violations: Vec<usize>,
    /// Largest `G_after − G_before` seen.
    pub worst_margin: f64,
    /// Steps with β > 0 and G exactly unchanged although ‖∇ỹ‖ > 1e-10.
    /// Reported, not counted as violations.
    pub equality_anomalies: Vec<usize>,
}

impl DescentReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Counts descent violations in a theorem-mode run.
pub fn descent_audit(series: &MetricsSeries) -> Result<DescentReport> {
    if !series.theorem_mode {
        return Err(Error::Contract(
            "descent audit needs a theorem-mode run: full labeled batch, plain SGD \
             and the enforced learning-rate condition"
                .into(),
        ));
    }
    let mut rep = DescentReport {
        steps: series.records.len(),
        violations: Vec::new(),
        worst_margin: f64::NEG_INFINITY,
        equality_anomalies: Vec::new(),
    };
    for r in &series.records {
        let margin = r.g_after - r.g_before;
        rep.worst_margin = rep.worst_margin.max(margin);
        if margin > DESCENT_TOL {
            rep.violations.push(r.step);
        } else if r.beta > 0.0 && margin == 0.0 && r.pseudo_grad_norm > 1e-10 {
            rep.equality_anomalies.push(r.step);
        }
    }
    Ok(rep)
}

/// `min_{t < upto} ‖∇G(θ_t)‖²` over the first `upto` records.
pub fn min_grad_norm_sq(records: &[StepRecord], upto: usize) -> f64 {
    records
        .iter()
        .take(upto)
        .map(|r| r.labeled_grad_norm * r.labeled_grad_norm)
        .fold(f64::INFINITY, f64::min)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flat summary of a verification session.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub safety: f64,
    pub m_hat: Option<f64>,
    pub l0_hat: Option<f64>,
    pub lr_bound: Option<f64>,
    pub descent_violations: Option<usize>,
    pub descent_worst_margin: Option<f64>,
    pub equality_gap: Option<f64>,
    pub gradcheck_max_rel_err: Option<f64>,
    pub hypergrad_max_rel_err: Option<f64>,
    pub first_order_max_rel_err: Option<f64>,
    pub lemma1_max_ratio: Option<f64>,
    pub lemma1_bound: Option<f64>,
    pub r_hat: Option<f64>,
    pub rate_short: Option<f64>,
    pub rate_long: Option<f64>,
    /// `(suite, passed, detail)` in run order.
    pub suites: Vec<(String, bool, String)>,
}

impl VerifyReport {
    pub fn new(safety: f64) -> Self {
        VerifyReport {
            safety,
            m_hat: None,
            l0_hat: None,
            lr_bound: None,
            descent_violations: None,
            descent_worst_margin: None,
            equality_gap: None,
            gradcheck_max_rel_err: None,
            hypergrad_max_rel_err: None,
            first_order_max_rel_err: None,
            lemma1_max_ratio: None,
            lemma1_bound: None,
            r_hat: None,
            rate_short: None,
            rate_long: None,
            suites: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|(_, ok, _)| *ok)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "estimates = empirical");
        let _ = writeln!(s, "safety_factor = {:?}", self.safety);
        let fields: [(&str, Option<f64>); 14] = [
            ("M_hat", self.m_hat),
            ("L0_hat", self.l0_hat),
            ("lr_bound", self.lr_bound),
            ("descent_violations", self.descent_violations.map(|v| v as f64)),
            ("descent_worst_margin", self.descent_worst_margin),
            ("equality_gap", self.equality_gap),
            ("gradcheck_max_rel_err", self.gradcheck_max_rel_err),
            ("hypergrad_max_rel_err", self.hypergrad_max_rel_err),
            ("first_order_max_rel_err", self.first_order_max_rel_err),
            ("lemma1_max_ratio", self.lemma1_max_ratio),
            ("lemma1_bound", self.lemma1_bound),
            ("R_hat", self.r_hat),
            ("rate_min_grad_sq_short", self.rate_short),
            ("rate_min_grad_sq_long", self.rate_long),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                if k == "descent_violations" {
                    let _ = writeln!(s, "{k} = {}", v as usize);
                } else {
                    let _ = writeln!(s, "{k} = {v:e}");
                }
            }
        }
        for (name, ok, detail) in &self.suites {
            let _ = writeln!(s, "suite.{name} = {}", if *ok { "pass" } else { "fail" });
            let _ = writeln!(s, "suite.{name}.detail = {detail}");
        }
        s
    }
}

pub const SUITES: [&str; 5] = ["gradcheck", "hypergrad", "lemma1", "descent", "rate-trend"];

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Step count for `descent` (default 500) and the long horizon of
    /// `rate-trend` (default 4000).
    pub steps: Option<usize>,
    /// Checkpointed model to check instead of fresh seeded ones.
    pub model: Option<MlpClassifier>,
    pub safety: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            steps: None,
            model: None,
            safety: 2.0,
        }
    }
}

/// Runs one named suite, appends its verdict to `report` and returns it.
pub fn run_suite(name: &str, opts: &SuiteOptions, report: &mut VerifyReport) -> Result<bool> {
    let (ok, detail) = match name {
        "gradcheck" => suite_gradcheck(opts, report)?,
        "hypergrad" => suite_hypergrad(opts, report)?,
        "lemma1" => suite_lipschitz(opts, report)?,
        "descent" => suite_descent(opts, report)?,
        "rate-trend" => suite_rate_trend(opts, report)?,
        other => {
            return Err(Error::Config(format!(
                "unknown suite '{other}' (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    report.suites.push((name.to_string(), ok, detail));
    Ok(ok)
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Thresholds shared by the suites and the acceptance tests.
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const HYPERGRAD_TOL: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-3;

fn suite_gradcheck(opts: &SuiteOptions, report: &mut VerifyReport) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let configs = if opts.model.is_some() { 10 } else { 50 };
    for c in 0..configs {
        let model = match &opts.model {
            Some(m) => m.clone(),
            None => {
                let d = rng.random_range(1..=4);
                let depth = rng.random_range(1..=2);
                let mut sizes = vec![d];
                for _ in 0..depth {
                    sizes.push(rng.random_range(2..=6));
                }
                sizes.push(rng.random_range(2..=4));
                let act = if c % 2 == 0 { Activation::Tanh } else { Activation::Relu };
                let mut m = MlpClassifier::new(&sizes, act, rng.random())?;
                // nonzero biases so every code path carries signal
                let p: Vec<f64> = m.params().as_slice().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
                m.set_params(ParamVector::new(p, m.layout().to_vec())?)?;
                m
            }
        };
        let b = rng.random_range(1..=5);
        let x = uniform_matrix(b, model.input_dim(), -2.0, 2.0, &mut rng)?;
        let y = random_distributions(b, model.num_classes(), &mut rng)?;
        for kind in [LossKind::Kl, LossKind::Mse] {
            worst = worst.max(gradcheck(&model, &x, &y, kind, GRADCHECK_H)?);
        }
    }
    report.gradcheck_max_rel_err = Some(worst);
    Ok((
        worst < GRADCHECK_TOL,
        format!("{configs} configurations, max relative error {worst:e} (limit {GRADCHECK_TOL:e})"),
    ))
}

/// A 2-8-2 tanh network with B = 4 labeled and unlabeled Gaussian inputs.
pub fn hypergrad_instance(seed: u64) -> Result<(MlpClassifier, UnlabeledBatch, LabeledBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MlpClassifier::new(&[2, 8, 2], Activation::Tanh, seed)?;
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let xu = Tensor::matrix(4, 2, normal(&mut rng, 8))?;
    let xl = Tensor::matrix(4, 2, normal(&mut rng, 8))?;
    let classes: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
    Ok((
        model,
        UnlabeledBatch {
            indices: (0..4).collect(),
            x: xu,
        },
        LabeledBatch {
            indices: (4..8).collect(),
            x: xl,
            y: one_hot(&classes, 2)?,
        },
    ))
}

const HYPERGRAD_ALPHA: f64 = 0.1;

fn suite_hypergrad(opts: &SuiteOptions, report: &mut VerifyReport) -> Result<(bool, String)> {
    let mut worst_exact: f64 = 0.0;
    let mut worst_fo: f64 = 0.0;
    for s in 0..100u64 {
        let (mut model, u, l) = hypergrad_instance(opts.seed.wrapping_add(s))?;
        if let Some(m) = &opts.model {
            if m.input_dim() != 2 || m.num_classes() != 2 {
                return Err(Error::Config("hypergrad suite needs a 2-input, 2-class model".into()));
            }
            model = m.clone();
        }
        let pseudo = meta::init_pseudo_labels(&model, &u)?;
        let exact = meta::exact_meta_gradient(&model, &u, &pseudo, &l, HYPERGRAD_ALPHA)?;
        let oracle = hypergrad_oracle(&model, &u.x, &pseudo.y_init, &l, HYPERGRAD_ALPHA, ORACLE_H)?;
        let fo = meta::first_order_meta_gradient(&model, &u, &l, HYPERGRAD_ALPHA, FirstOrderOptions::default())?;
        worst_exact = worst_exact.max(rel_err_inf(exact.y_grad.data(), oracle.data()));
        worst_fo = worst_fo.max(rel_err_inf(fo.y_grad.data(), exact.y_grad.data()));
    }
    report.hypergrad_max_rel_err = Some(worst_exact);
    report.first_order_max_rel_err = Some(worst_fo);
    Ok((
        worst_exact <= HYPERGRAD_TOL && worst_fo <= FIRST_ORDER_TOL,
        format!(
            "100 instances, exact vs oracle {worst_exact:e} (limit {HYPERGRAD_TOL:e}), \
             first-order vs exact {worst_fo:e} (limit {FIRST_ORDER_TOL:e})"
        ),
    ))
}

const LIPSCHITZ_ALPHA: f64 = 0.5;

fn suite_lipschitz(opts: &SuiteOptions, report: &mut VerifyReport) -> Result<(bool, String)> {
    let mut worst_ratio: f64 = 0.0;
    let mut tightest: f64 = 0.0;
    let mut all = true;
    for s in 0..10u64 {
        let (mut model, u, l) = hypergrad_instance(opts.seed.wrapping_add(1000 + s))?;
        if let Some(m) = &opts.model {
            model = m.clone();
        }
        let rep = pseudo_label_lipschitz_check(&model, &u, &l, LIPSCHITZ_ALPHA, 100, opts.seed + s, opts.safety)?;
        all &= rep.pass;
        worst_ratio = worst_ratio.max(rep.max_ratio);
        if rep.bound > 0.0 {
            tightest = tightest.max(rep.max_ratio / rep.bound);
        }
        report.m_hat = Some(report.m_hat.unwrap_or(0.0).max(rep.m_hat));
        report.l0_hat = Some(report.l0_hat.unwrap_or(0.0).max(rep.l0_hat));
        report.lemma1_bound = Some(rep.bound);
    }
    report.lemma1_max_ratio = Some(worst_ratio);
    Ok((
        all,
        format!("10 models x 100 pairs, max ratio {worst_ratio:e}, worst ratio/bound {tightest:.3}"),
    ))
}

/// Blobs and config used by the descent and rate-trend checks.
pub fn checked_descent_setup(seed: u64, steps: usize, include_labeled: bool) -> Result<(TrainConfig, crate::data::Dataset)> {
    let ds = gen_blobs(200, 2, 1.5, 1.0, seed)?;
    let ds = split_labels(&ds, 20, seed)?.with_labeled_in_unlabeled(include_labeled);
    let cfg = TrainConfig {
        hidden: vec![8],
        activation: Activation::Tanh,
        alpha: Schedule::constant(1.0),
        beta: None,
        batch_size_unlabeled: 32,
        batch_size_labeled: 32,
        total_steps: steps,
        seed,
        ..TrainConfig::default()
    }
    .into_theorem_mode();
    Ok((cfg, ds))
}

fn suite_descent(opts: &SuiteOptions, report: &mut VerifyReport) -> Result<(bool, String)> {
    let steps = opts.steps.unwrap_or(500);
    let (mut cfg, ds) = checked_descent_setup(opts.seed, steps, false)?;
    cfg.safety = opts.safety;
    let run = match &opts.model {
        Some(m) => trainer::fit_from(&cfg, &ds, m.clone())?,
        None => trainer::fit(&cfg, &ds)?,
    };
    if let Some(a) = &run.aborted {
        return Ok((false, format!("run aborted: {a}")));
    }
    let audit = descent_audit(&run.series())?;
    if let Some(e) = run.estimates.first() {
        report.m_hat = Some(e.m_hat);
        report.l0_hat = Some(e.l0_hat);
        report.lr_bound = Some(e.bound);
    }
    let labeled = ds.labeled_batch(&ds.labeled_indices())?;
    let resid = run.model.forward(&labeled.x)?.sub(&labeled.y)?;
    let r = (0..resid.rows())
        .map(|i| tensor::norm(resid.row(i)))
        .fold(0.0, f64::max);
    report.r_hat = Some(r);

    // control: β = 0 leaves pseudo-labels at the predictions, so nothing moves
    let mut control = cfg.clone();
    control.beta = Some(Schedule::constant(0.0));
    control.total_steps = steps.min(50);
    let crun = trainer::fit(&control, &ds)?;
    let gap = crun
        .records
        .iter()
        .map(|r| (r.g_after - r.g_before).abs())
        .fold(0.0, f64::max);
    report.equality_gap = Some(gap);
    report.descent_violations = Some(audit.violations.len());
    report.descent_worst_margin = Some(audit.worst_margin);
    let ok = audit.pass() && gap <= 1e-12;
    Ok((
        ok,
        format!(
            "{} steps, {} violations, worst margin {:e}, {} equality anomalies, beta=0 gap {gap:e}",
            audit.steps,
            audit.violations.len(),
            audit.worst_margin,
            audit.equality_anomalies.len()
        ),
    ))
}

fn suite_rate_trend(opts: &SuiteOptions, report: &mut VerifyReport) -> Result<(bool, String)> {
    let long = opts.steps.unwrap_or(4000);
    let short = (long / 8).max(1);
    let mut shorts = Vec::new();
    let mut longs = Vec::new();
    for s in 0..5u64 {
        let (mut cfg, ds) = checked_descent_setup(opts.seed.wrapping_add(s), long, true)?;
        cfg.safety = opts.safety;
        let run = trainer::fit(&cfg, &ds)?;
        if let Some(a) = &run.aborted {
            return Ok((false, format!("seed {s} aborted: {a}")));
        }
        shorts.push(min_grad_norm_sq(&run.records, short));
        longs.push(min_grad_norm_sq(&run.records, long));
    }
    let (ms, ml) = (median(&shorts), median(&longs));
    report.rate_short = Some(ms);
    report.rate_long = Some(ml);
    Ok((
        ml < ms,
        format!("median min |grad G|^2: {ms:e} at T={short}, {ml:e} at T={long}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_condition_cases() {
        assert!(check_lr_condition(0.0, 0.0, 3.0, 2.0, 2.0).satisfied);
        let c = check_lr_condition(0.1, 0.1, 1.0, 1.0, 1.0);
        assert!((c.product - 1e-3).abs() < 1e-18);
        assert_eq!(c.bound, 0.25);
        assert!(c.satisfied);
        let at = check_lr_condition(0.5, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(at.product, at.bound);
        assert!(!at.satisfied);
    }

    #[test]
    fn audit_flags_upticks_and_refuses_other_modes() {
        let rec = |step, gb: f64, ga: f64| StepRecord {
            step,
            g_before: gb,
            g_after: ga,
            consistency_loss: 0.0,
            pseudo_grad_norm: 1.0,
            param_grad_norm: 0.0,
            alpha: 0.1,
            beta: 0.1,
            descent_ok: ga <= gb,
            labeled_grad_norm: 0.0,
            degenerate: false,
        };
        let mut s = MetricsSeries {
            theorem_mode: true,
            records: vec![rec(0, 1.0, 0.9), rec(1, 0.9, 0.8), rec(2, 0.8, 0.7)],
        };
        assert!(descent_audit(&s).unwrap().violations.is_empty());
        s.records[1].g_after = 0.95;
        assert_eq!(descent_audit(&s).unwrap().violations, vec![1]);
        s.theorem_mode = false;
        assert!(matches!(descent_audit(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_vanishes_without_a_step() {
        let (m, u, l) = hypergrad_instance(3).unwrap();
        let y = m.forward(&u.x).unwrap();
        let g = hypergrad_oracle(&m, &u.x, &y, &l, 0.0, 1e-4).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
