//! Training loops.
//!
//! * [`train_step_exact`]: pseudo-labels at the current predictions, closed-form
//!   meta-gradient, pseudo-label step, then a parameter step on the
//!   consistency loss against the updated pseudo-labels.
//! * [`train_step_first_order`]: finite-difference meta-gradient, mixup of the
//!   labeled batch with the unlabeled batch and its updated pseudo-labels, and a
//!   parameter step on `KL(mixed) + w · MSE(consistency)`.
//! * [`train_step_labeled_only`]: the supervised baseline.
//!
//! Every step reports the labeled loss on its labeled batch before and after
//! the parameter update.

mod config;
mod optim;
mod sampler;

pub use config::{
    parse_kv, Algorithm, OptimizerChoice, OptimizerKind, Projection, Sampling, Schedule,
    ScheduleKind, TrainConfig,
};
pub use optim::Optimizer;
pub use sampler::BatchSampler;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment;
use crate::data::{Dataset, LabeledBatch, Split, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::eval::{self, SplitAccuracy};
use crate::losses::LossKind;
use crate::meta::{self, FirstOrderOptions};
use crate::model::{Head, MlpClassifier};
use crate::tensor::Tensor;
use crate::verify;

/// Allowed increase of the labeled loss before a step counts as ascent.
pub const DESCENT_TOL: f64 = 1e-10;

/// RNG streams derived from the run seed.
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_MIXUP: u64 = 3;
const STREAM_ESTIMATES: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Labeled loss on this step's labeled batch before the update.
    pub g_before: f64,
    /// Same batch, after the update.
    pub g_after: f64,
    pub consistency_loss: f64,
    /// Frobenius norm of ∇ỹ.
    pub pseudo_grad_norm: f64,
    /// Norm of the gradient handed to the optimizer.
    pub param_grad_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub descent_ok: bool,
    /// ‖∇θ G(θ_t)‖ on the labeled batch.
    pub labeled_grad_norm: f64,
    /// The labeled gradient vanished and the meta step was skipped.
    pub degenerate: bool,
}

pub const METRICS_HEADER: &str =
    "step,G_before,G_after,consistency_loss,pseudo_grad_norm,param_grad_norm,alpha,beta,descent_ok";

/// Writes the metrics CSV. Floats use shortest round-trip formatting.
pub fn write_metrics_csv<W: Write>(records: &[StepRecord], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            r.step,
            r.g_before,
            r.g_after,
            r.consistency_loss,
            r.pseudo_grad_norm,
            r.param_grad_norm,
            r.alpha,
            r.beta,
            r.descent_ok
        )?;
    }
    Ok(())
}

/// Parses a metrics CSV written by [`write_metrics_csv`]. Fields absent
/// from the file (`labeled_grad_norm`, `degenerate`) come back as NaN / false.
pub fn read_metrics_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Schema("metrics header does not match".into())),
    }
    let mut out = Vec::new();
    for (n, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let line = n as u64 + 1;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Schema(format!("line {line}: {} fields, expected 9", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("'{s}' is not a number"),
            })
        };
        out.push(StepRecord {
            step: f[0].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("'{}' is not a step index", f[0]),
            })?,
            g_before: num(f[1])?,
            g_after: num(f[2])?,
            consistency_loss: num(f[3])?,
            pseudo_grad_norm: num(f[4])?,
            param_grad_norm: num(f[5])?,
            alpha: num(f[6])?,
            beta: num(f[7])?,
            descent_ok: f[8].trim() == "true",
            labeled_grad_norm: f64::NAN,
            degenerate: false,
        });
    }
    Ok(out)
}

/// A run's step records plus whether they came from checked-descent mode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSeries {
    pub theorem_mode: bool,
    pub records: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub result: SplitAccuracy,
}

pub const EVAL_HEADER: &str = "step,split,accuracy,error_rate";

pub fn write_eval_csv<W: Write>(records: &[EvalRecord], mut out: W) -> Result<()> {
    writeln!(out, "{EVAL_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:?},{:?}",
            r.step,
            r.result.split.name(),
            r.result.accuracy,
            r.result.error_rate
        )?;
    }
    Ok(())
}

/// Mutable state of a run: the model, optimizer buffers and the mixup RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MlpClassifier,
    pub optimizer: Optimizer,
    pub step: usize,
    pub mix_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: MlpClassifier, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            optimizer: Optimizer::new(cfg.optimizer_kind()),
            step: 0,
            mix_rng: stream_rng(cfg.seed, STREAM_MIXUP),
        }
    }
}

/// Learning rates for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub alpha: f64,
    pub beta: f64,
}

/// Candidate model and optimizer state after a step; nothing is committed yet.
struct Pending {
    model: MlpClassifier,
    optimizer: Optimizer,
    mix_rng: Option<ChaCha8Rng>,
}

fn propose(state: &TrainState, grad: &crate::model::ParamVector, alpha: f64) -> Result<Pending> {
    let mut optimizer = state.optimizer.clone();
    let params = optimizer.step(state.model.params(), grad, alpha)?;
    Ok(Pending {
        model: state.model.with_params(params)?,
        optimizer,
        mix_rng: None,
    })
}

fn finish(
    state: &mut TrainState,
    next: Pending,
    labeled: &LabeledBatch,
    mut rec: StepRecord,
) -> Result<StepRecord> {
    rec.g_after = next.model.loss(&labeled.x, &labeled.y, LossKind::Kl)?;
    rec.descent_ok = rec.g_after <= rec.g_before + DESCENT_TOL;
    for v in [rec.consistency_loss, rec.pseudo_grad_norm, rec.param_grad_norm] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("step {} diagnostics", rec.step)));
        }
    }
    state.model = next.model;
    state.optimizer = next.optimizer;
    if let Some(rng) = next.mix_rng {
        state.mix_rng = rng;
    }
    state.step += 1;
    Ok(rec)
}

/// One step of the exact algorithm. The state is only modified on success.
pub fn train_step_exact(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &TrainConfig,
    rates: StepRates,
) -> Result<StepRecord> {
    let model = &state.model;
    let pseudo = meta::init_pseudo_labels(model, unlabeled)?;
    let mg = meta::exact_meta_gradient(model, unlabeled, &pseudo, labeled, rates.alpha)?;
    let g_before = mg.labeled_loss;
    let labeled_grad_norm = mg.labeled_grad.norm();
    let pseudo_grad_norm = mg.norm();
    let pseudo = pseudo.with_grad(mg.y_grad)?;
    let pseudo = meta::update_pseudo_labels(&pseudo, rates.beta, cfg.project())?;
    let y_hat = pseudo.y_updated.expect("set by update");
    let (cons, grad) = model.loss_and_grad(&unlabeled.x, &y_hat, LossKind::Mse)?;
    let grad = grad.scale(cfg.consistency_weight);
    let next = propose(state, &grad, rates.alpha)?;
    let rec = StepRecord {
        step: state.step,
        g_before,
        g_after: f64::NAN,
        consistency_loss: cons,
        pseudo_grad_norm,
        param_grad_norm: grad.norm(),
        alpha: rates.alpha,
        beta: rates.beta,
        descent_ok: false,
        labeled_grad_norm,
        degenerate: false,
    };
    finish(state, next, labeled, rec)
}

/// One step of the first-order algorithm with (optionally) mixup.
pub fn train_step_first_order(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: &TrainConfig,
    rates: StepRates,
) -> Result<StepRecord> {
    if cfg.mixup && labeled.len() != unlabeled.len() {
        return Err(Error::Contract(format!(
            "mixup pairs need equal batch sizes, got {} labeled and {} unlabeled",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let model = &state.model;
    let pseudo = meta::init_pseudo_labels(model, unlabeled)?;
    let mg = if cfg.meta {
        let opts = FirstOrderOptions {
            eps_rule: cfg.eps_rule,
            unscaled: cfg.unscaled_meta,
        };
        meta::first_order_meta_gradient(model, unlabeled, labeled, rates.alpha, opts)?
    } else {
        let (loss, g) = model.loss_and_grad(&labeled.x, &labeled.y, LossKind::Kl)?;
        meta::MetaGradient {
            y_grad: Tensor::zeros(pseudo.y_init.shape()),
            labeled_grad: g,
            labeled_loss: loss,
            eps: None,
            degenerate: false,
        }
    };
    let g_before = mg.labeled_loss;
    let labeled_grad_norm = mg.labeled_grad.norm();
    let pseudo_grad_norm = mg.norm();
    let degenerate = mg.degenerate;
    let pseudo = pseudo.with_grad(mg.y_grad)?;
    let pseudo = meta::update_pseudo_labels(&pseudo, rates.beta, cfg.project())?;
    let y_hat = pseudo.y_updated.expect("set by update");

    let mut rng = state.mix_rng.clone();
    let (x_in, y_in) = if cfg.mixup {
        let mb = augment::mixup(&labeled.x, &labeled.y, &unlabeled.x, &y_hat, cfg.gamma, &mut rng)?;
        (mb.x_in, mb.y_in)
    } else {
        (labeled.x.clone(), labeled.y.clone())
    };
    let (_, mut grad) = model.loss_and_grad(&x_in, &y_in, LossKind::Kl)?;
    let mut cons = 0.0;
    if cfg.consistency_weight != 0.0 {
        let (c, g2) = model.loss_and_grad(&unlabeled.x, &y_hat, LossKind::Mse)?;
        cons = c;
        grad = grad.axpy(cfg.consistency_weight, &g2)?;
    }
    let mut next = propose(state, &grad, rates.alpha)?;
    next.mix_rng = Some(rng);
    let rec = StepRecord {
        step: state.step,
        g_before,
        g_after: f64::NAN,
        consistency_loss: cons,
        pseudo_grad_norm,
        param_grad_norm: grad.norm(),
        alpha: rates.alpha,
        beta: rates.beta,
        descent_ok: false,
        labeled_grad_norm,
        degenerate,
    };
    finish(state, next, labeled, rec)
}

/// One supervised step on the labeled batch.
pub fn train_step_labeled_only(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    rates: StepRates,
) -> Result<StepRecord> {
    let (g_before, grad) = state
        .model
        .loss_and_grad(&labeled.x, &labeled.y, LossKind::Kl)?;
    let next = propose(state, &grad, rates.alpha)?;
    let rec = StepRecord {
        step: state.step,
        g_before,
        g_after: f64::NAN,
        consistency_loss: 0.0,
        pseudo_grad_norm: 0.0,
        param_grad_norm: grad.norm(),
        alpha: rates.alpha,
        beta: 0.0,
        descent_ok: false,
        labeled_grad_norm: grad.norm(),
        degenerate: false,
    };
    finish(state, next, labeled, rec)
}

/// Live estimates used to enforce the learning-rate condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyEstimate {
    pub step: usize,
    pub m_hat: f64,
    pub l0_hat: f64,
    /// Upper limit for α²β with the safety factor applied.
    pub bound: f64,
    pub m_converged: bool,
}

/// Result of [`fit`]. On a numerical abort `model` is the last finite state
/// and `aborted` carries the diagnostic.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: MlpClassifier,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub estimates: Vec<SafetyEstimate>,
    /// Human-readable notes (β adaptations, sampler wraparound).
    pub events: Vec<String>,
    pub aborted: Option<String>,
    pub theorem_mode: bool,
}

impl FitOutcome {
    pub fn series(&self) -> MetricsSeries {
        MetricsSeries {
            theorem_mode: self.theorem_mode,
            records: self.records.clone(),
        }
    }

    pub fn final_eval(&self, split: Split) -> Option<&SplitAccuracy> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.result.split == split)
            .map(|e| &e.result)
    }
}

/// Layer widths for a dataset: input width, hidden widths, class count.
pub fn layer_sizes(cfg: &TrainConfig, ds: &Dataset) -> Vec<usize> {
    let mut sizes = vec![ds.dim()];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(ds.num_classes());
    sizes
}

/// Number of unlabeled examples used for each Jacobian-norm estimate.
const ESTIMATE_SAMPLE: usize = 64;
const ESTIMATE_PROBES: usize = 3;
const ESTIMATE_RADIUS: f64 = 0.05;

fn estimate_constants(
    model: &MlpClassifier,
    ds: &Dataset,
    labeled: &LabeledBatch,
    pool: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<SafetyEstimate> {
    let sample: Vec<usize> = pool.iter().copied().take(ESTIMATE_SAMPLE).collect();
    let xs = ds.features().select_rows(&sample);
    let seed = cfg.seed ^ ((step as u64) << 20) ^ STREAM_ESTIMATES;
    let m = model.jacobian_norm_estimate(&xs, Head::Probabilities, seed)?;
    let l0 = verify::estimate_l0(model, labeled, ESTIMATE_PROBES, ESTIMATE_RADIUS, seed)?;
    Ok(SafetyEstimate {
        step,
        m_hat: m.value,
        l0_hat: l0,
        bound: verify::lr_bound(m.value, l0, cfg.safety),
        m_converged: m.converged,
    })
}

/// Runs `cfg.total_steps` steps from a freshly initialized model.
pub fn fit(cfg: &TrainConfig, ds: &Dataset) -> Result<FitOutcome> {
    let model = MlpClassifier::new(&layer_sizes(cfg, ds), cfg.activation, cfg.seed)?;
    fit_from(cfg, ds, model)
}

/// Runs `cfg.total_steps` steps starting from `model`.
pub fn fit_from(cfg: &TrainConfig, ds: &Dataset, model: MlpClassifier) -> Result<FitOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if model.input_dim() != ds.dim() || model.num_classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "model {:?} does not fit data with {} features and {} classes",
            model.layer_sizes(),
            ds.dim(),
            ds.num_classes()
        )));
    }
    let labeled_pool = ds.labeled_indices();
    if labeled_pool.is_empty() {
        return Err(Error::Config("no labeled examples".into()));
    }
    let unlabeled_pool = ds.unlabeled_pool();
    let needs_unlabeled = cfg.algorithm != Algorithm::LabeledOnly;
    if needs_unlabeled && unlabeled_pool.is_empty() {
        return Err(Error::Config("no unlabeled examples".into()));
    }

    let mut lab = BatchSampler::new(
        labeled_pool.clone(),
        cfg.batch_size_labeled,
        cfg.labeled_sampling,
        stream_rng(cfg.seed, STREAM_LABELED),
    )?;
    let mut unl = if needs_unlabeled {
        Some(BatchSampler::new(
            unlabeled_pool.clone(),
            cfg.batch_size_unlabeled,
            cfg.unlabeled_sampling,
            stream_rng(cfg.seed, STREAM_UNLABELED),
        )?)
    } else {
        None
    };

    let full_labeled = ds.labeled_batch(&labeled_pool)?;
    let mut state = TrainState::new(model, cfg);
    let mut out = FitOutcome {
        model: state.model.clone(),
        records: Vec::with_capacity(cfg.total_steps),
        evals: Vec::new(),
        estimates: Vec::new(),
        events: Vec::new(),
        aborted: None,
        theorem_mode: cfg.theorem_mode,
    };
    let mut bound: Option<f64> = None;
    let mut wrap_noted = false;

    for t in 0..cfg.total_steps {
        let alpha = cfg.alpha_at(t);
        let mut beta = cfg.beta_at(t);

        if cfg.theorem_mode && t % cfg.recheck_every == 0 {
            let est = estimate_constants(&state.model, ds, &full_labeled, &unlabeled_pool, cfg, t)?;
            if !est.m_converged {
                out.events
                    .push(format!("step {t}: Jacobian power iteration hit its cap"));
            }
            bound = Some(est.bound);
            out.estimates.push(est);
        }
        if let Some(b) = bound {
            if alpha * alpha * beta >= b {
                let capped = 0.5 * b / (alpha * alpha);
                if t % cfg.recheck_every == 0 {
                    out.events.push(format!(
                        "step {t}: beta lowered from {beta:e} to {capped:e} (bound {b:e})"
                    ));
                }
                beta = capped;
            }
        }

        let lidx = lab.next_batch();
        let labeled = ds.labeled_batch(&lidx)?;
        let rates = StepRates { alpha, beta };
        let result = match cfg.algorithm {
            Algorithm::LabeledOnly => train_step_labeled_only(&mut state, &labeled, rates),
            Algorithm::Exact | Algorithm::FirstOrderMixup => {
                let sampler = unl.as_mut().expect("unlabeled sampler exists");
                let uidx = sampler.next_batch();
                let unlabeled = ds.unlabeled_batch(&uidx)?;
                if cfg.algorithm == Algorithm::Exact {
                    train_step_exact(&mut state, &labeled, &unlabeled, cfg, rates)
                } else {
                    train_step_first_order(&mut state, &labeled, &unlabeled, cfg, rates)
                }
            }
        };
        match result {
            Ok(rec) => out.records.push(rec),
            Err(e) if e.is_numerical() => {
                out.aborted = Some(format!("step {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
        if !wrap_noted && (lab.wrapped() || unl.as_ref().is_some_and(|u| u.wrapped())) {
            out.events
                .push(format!("step {t}: batch larger than its split, sampler wrapped"));
            wrap_noted = true;
        }
        if cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0 && t + 1 < cfg.total_steps {
            for r in eval::evaluate(&state.model, ds)? {
                out.evals.push(EvalRecord { step: t + 1, result: r });
            }
        }
    }

    for r in eval::evaluate(&state.model, ds)? {
        out.evals.push(EvalRecord {
            step: state.step,
            result: r,
        });
    }
    out.model = state.model;
    Ok(out)
}
