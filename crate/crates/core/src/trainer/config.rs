use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// Closed-form meta step, consistency-only parameter update.
    Exact,
    /// Finite-difference meta step with mixup and a KL + MSE update.
    FirstOrderMixup,
    /// Supervised KL on the labeled split only.
    LabeledOnly,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Exact => "exact",
            Algorithm::FirstOrderMixup => "first-order-mixup",
            Algorithm::LabeledOnly => "labeled-only",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Algorithm::Exact),
            "first-order-mixup" => Ok(Algorithm::FirstOrderMixup),
            "labeled-only" => Ok(Algorithm::LabeledOnly),
            _ => Err(Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// One ×0.1 decay once 75% of the steps have run.
    StepDecay,
    /// Half-cosine from the base value towards zero.
    Cosine,
}

impl ScheduleKind {
    pub fn tag(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::StepDecay => "step",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "step" => Ok(ScheduleKind::StepDecay),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::Config(format!("unknown schedule '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
}

impl Schedule {
    pub fn constant(base: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base,
        }
    }

    pub fn value(&self, t: usize, total: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::StepDecay => {
                if 4 * t >= 3 * total {
                    self.base * 0.1
                } else {
                    self.base
                }
            }
            ScheduleKind::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * self.base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Plain,
    Momentum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    PlainSgd,
    MomentumSgd { momentum: f64, weight_decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// On when pseudo-labels feed a KL target through mixup, off otherwise.
    Auto,
    On,
    Off,
}

impl Projection {
    pub fn tag(self) -> &'static str {
        match self {
            Projection::Auto => "auto",
            Projection::On => "on",
            Projection::Off => "off",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// The whole split every step.
    Full,
    /// Shuffled epochs without replacement.
    Shuffle,
    /// Independent uniform draws.
    Replacement,
}

impl Sampling {
    pub fn tag(self) -> &'static str {
        match self {
            Sampling::Full => "full",
            Sampling::Shuffle => "shuffle",
            Sampling::Replacement => "replacement",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Sampling::Full),
            "shuffle" => Ok(Sampling::Shuffle),
            "replacement" => Ok(Sampling::Replacement),
            _ => Err(Error::Config(format!("unknown sampling mode '{s}'"))),
        }
    }
}

/// All training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub alpha: Schedule,
    /// `None` keeps β equal to α at every step.
    pub beta: Option<Schedule>,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub labeled_sampling: Sampling,
    pub unlabeled_sampling: Sampling,
    pub gamma: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub consistency_weight: f64,
    pub projection: Projection,
    pub eps_rule: f64,
    /// First-order meta-gradient with the 1/ε prefactor only.
    pub unscaled_meta: bool,
    /// Ablation switches for the first-order algorithm.
    pub meta: bool,
    pub mixup: bool,
    pub theorem_mode: bool,
    pub recheck_every: usize,
    pub safety: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::FirstOrderMixup,
            hidden: vec![16, 16],
            activation: Activation::Relu,
            alpha: Schedule {
                kind: ScheduleKind::StepDecay,
                base: 0.1,
            },
            beta: None,
            batch_size_labeled: 32,
            batch_size_unlabeled: 32,
            labeled_sampling: Sampling::Shuffle,
            unlabeled_sampling: Sampling::Shuffle,
            gamma: 1.0,
            optimizer: OptimizerChoice::Momentum,
            momentum: 0.9,
            weight_decay: 1e-4,
            total_steps: 2000,
            seed: 0,
            consistency_weight: 1.0,
            projection: Projection::Auto,
            eps_rule: 0.01,
            unscaled_meta: false,
            meta: true,
            mixup: true,
            theorem_mode: false,
            recheck_every: 50,
            safety: 2.0,
            eval_every: 0,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: '{v}' is not a count")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{v}' is not a boolean"))),
    }
}

impl TrainConfig {
    /// Checked-descent settings: exact algorithm, plain SGD, the full labeled
    /// set every step, unprojected pseudo-labels and unit consistency weight.
    pub fn into_theorem_mode(mut self) -> Self {
        self.theorem_mode = true;
        self.algorithm = Algorithm::Exact;
        self.optimizer = OptimizerChoice::Plain;
        self.labeled_sampling = Sampling::Full;
        self.projection = Projection::Off;
        self.consistency_weight = 1.0;
        self
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Plain => OptimizerKind::PlainSgd,
            OptimizerChoice::Momentum => OptimizerKind::MomentumSgd {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha.value(t, self.total_steps)
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta.unwrap_or(self.alpha).value(t, self.total_steps)
    }

    pub fn project(&self) -> bool {
        match self.projection {
            Projection::On => true,
            Projection::Off => false,
            Projection::Auto => self.algorithm == Algorithm::FirstOrderMixup && self.mixup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha.base > 0.0) || !self.alpha.base.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha.base));
        }
        if let Some(b) = self.beta {
            if !(b.base >= 0.0) || !b.base.is_finite() {
                return bad(format!("beta must be non-negative, got {}", b.base));
            }
        }
        if self.batch_size_labeled == 0 || self.batch_size_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.consistency_weight >= 0.0) {
            return bad("consistency weight must be non-negative".into());
        }
        if !(self.eps_rule > 0.0) {
            return bad("eps rule constant must be positive".into());
        }
        if !(self.safety >= 1.0) {
            return bad("safety factor must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.recheck_every == 0 {
            return bad("recheck interval must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.algorithm == Algorithm::FirstOrderMixup
            && self.mixup
            && self.batch_size_labeled != self.batch_size_unlabeled
        {
            return bad(format!(
                "mixup pairs examples, so batch sizes must match ({} vs {})",
                self.batch_size_labeled, self.batch_size_unlabeled
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// config does not own so callers can handle their own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key.trim() {
            "algorithm" => self.algorithm = Algorithm::from_tag(v)?,
            "hidden" => {
                self.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse_usize("hidden", s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "activation" => self.activation = Activation::from_tag(v)?,
            "alpha" => self.alpha.base = parse_f64("alpha", v)?,
            "alpha_schedule" => self.alpha.kind = ScheduleKind::from_tag(v)?,
            "beta" => {
                self.beta = if v == "alpha" {
                    None
                } else {
                    let kind = self.beta.map(|b| b.kind).unwrap_or(self.alpha.kind);
                    Some(Schedule {
                        kind,
                        base: parse_f64("beta", v)?,
                    })
                }
            }
            "beta_schedule" => {
                let kind = ScheduleKind::from_tag(v)?;
                let base = self.beta.map(|b| b.base).unwrap_or(self.alpha.base);
                self.beta = Some(Schedule { kind, base });
            }
            "batch_labeled" => self.batch_size_labeled = parse_usize(key, v)?,
            "batch_unlabeled" => self.batch_size_unlabeled = parse_usize(key, v)?,
            "labeled_sampling" => self.labeled_sampling = Sampling::from_tag(v)?,
            "unlabeled_sampling" => self.unlabeled_sampling = Sampling::from_tag(v)?,
            "gamma" => self.gamma = parse_f64(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "plain" | "sgd" => OptimizerChoice::Plain,
                    "momentum" => OptimizerChoice::Momentum,
                    _ => return Err(Error::Config(format!("unknown optimizer '{v}'"))),
                }
            }
            "momentum" => self.momentum = parse_f64(key, v)?,
            "weight_decay" => self.weight_decay = parse_f64(key, v)?,
            "steps" => self.total_steps = parse_usize(key, v)?,
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: '{v}' is not an integer")))?
            }
            "consistency_weight" => self.consistency_weight = parse_f64(key, v)?,
            "projection" => {
                self.projection = match v {
                    "auto" => Projection::Auto,
                    "on" => Projection::On,
                    "off" => Projection::Off,
                    _ => return Err(Error::Config(format!("unknown projection '{v}'"))),
                }
            }
            "eps_rule" => self.eps_rule = parse_f64(key, v)?,
            "unscaled_meta" => self.unscaled_meta = parse_bool(key, v)?,
            "meta" => self.meta = parse_bool(key, v)?,
            "mixup" => self.mixup = parse_bool(key, v)?,
            "theorem_mode" => {
                if parse_bool(key, v)? {
                    *self = std::mem::take(self).into_theorem_mode();
                } else {
                    self.theorem_mode = false;
                }
            }
            "recheck_every" => self.recheck_every = parse_usize(key, v)?,
            "safety" => self.safety = parse_f64(key, v)?,
            "eval_every" => self.eval_every = parse_usize(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting as `key = value` lines, in an order that `set` can
    /// replay to reconstruct this exact config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("algorithm", self.algorithm.tag().into());
        line(
            "hidden",
            if hidden.is_empty() {
                "none".into()
            } else {
                hidden.join(",")
            },
        );
        line("activation", self.activation.tag().into());
        line("alpha", format!("{:?}", self.alpha.base));
        line("alpha_schedule", self.alpha.kind.tag().into());
        match self.beta {
            None => line("beta", "alpha".into()),
            Some(b) => {
                line("beta", format!("{:?}", b.base));
                line("beta_schedule", b.kind.tag().into());
            }
        }
        line("batch_labeled", self.batch_size_labeled.to_string());
        line("batch_unlabeled", self.batch_size_unlabeled.to_string());
        line("labeled_sampling", self.labeled_sampling.tag().into());
        line("unlabeled_sampling", self.unlabeled_sampling.tag().into());
        line("gamma", format!("{:?}", self.gamma));
        line(
            "optimizer",
            match self.optimizer {
                OptimizerChoice::Plain => "plain",
                OptimizerChoice::Momentum => "momentum",
            }
            .into(),
        );
        line("momentum", format!("{:?}", self.momentum));
        line("weight_decay", format!("{:?}", self.weight_decay));
        line("steps", self.total_steps.to_string());
        line("seed", self.seed.to_string());
        line("consistency_weight", format!("{:?}", self.consistency_weight));
        line("projection", self.projection.tag().into());
        line("eps_rule", format!("{:?}", self.eps_rule));
        line("unscaled_meta", self.unscaled_meta.to_string());
        line("meta", self.meta.to_string());
        line("mixup", self.mixup.to_string());
        line("theorem_mode", self.theorem_mode.to_string());
        line("recheck_every", self.recheck_every.to_string());
        line("safety", format!("{:?}", self.safety));
        line("eval_every", self.eval_every.to_string());
        s
    }
}

/// Splits `key = value` text into pairs, skipping blank lines and `#`
/// comments. Errors carry 1-based line numbers.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n as u64 + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
