//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any of them fails. Pass criterion numbers (`3`, `7`, ...) as
//! arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use metassl::cli;
use metassl::data::{gen_two_moons, split_labels, Dataset, LabeledBatch, Split, Standardizer, UnlabeledBatch};
use metassl::losses::LossKind;
use metassl::meta;
use metassl::model::{Activation, MlpClassifier};
use metassl::tensor::Tensor;
use metassl::trainer::{fit, Algorithm, Schedule, ScheduleKind, TrainConfig};
use metassl::verify::{self, SuiteOptions, VerifyReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn suite(name: &str, steps: Option<usize>) -> (Verdict, VerifyReport) {
    let opts = SuiteOptions {
        steps,
        ..SuiteOptions::default()
    };
    let mut report = VerifyReport::new(opts.safety);
    let ok = verify::run_suite(name, &opts, &mut report).expect("suite runs");
    let detail = report.suites.last().map(|s| s.2.clone()).unwrap_or_default();
    (verdict(ok, detail), report)
}

fn c1_gradients() -> Verdict {
    suite("gradcheck", None).0
}

fn c2_zero_gradient_at_init() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_theta: f64 = 0.0;
    let mut least_y: f64 = f64::INFINITY;
    for s in 0..100u64 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(2..=4);
        let h = rng.random_range(2..=8);
        let act = if s % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let model = MlpClassifier::new(&[d, h, k], act, s).unwrap();
        let bu = rng.random_range(1..=8);
        let bl = rng.random_range(1..=8);
        let xu = Tensor::matrix(bu, d, (0..bu * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let xl = Tensor::matrix(bl, d, (0..bl * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let classes: Vec<usize> = (0..bl).map(|_| rng.random_range(0..k)).collect();
        let unlabeled = UnlabeledBatch {
            indices: (0..bu).collect(),
            x: xu,
        };
        let labeled = LabeledBatch {
            indices: (0..bl).collect(),
            x: xl,
            y: metassl::data::one_hot(&classes, k).unwrap(),
        };
        let pseudo = meta::init_pseudo_labels(&model, &unlabeled).unwrap();
        let (_, g) = model.loss_and_grad(&unlabeled.x, &pseudo.y_init, LossKind::Mse).unwrap();
        worst_theta = worst_theta.max(g.norm());
        let mg = meta::exact_meta_gradient(&model, &unlabeled, &pseudo, &labeled, 0.1).unwrap();
        least_y = least_y.min(mg.norm());
    }
    verdict(
        worst_theta <= 1e-12 && least_y > 1e-6,
        format!("100 instances, max |grad theta| {worst_theta:e}, min |grad y| {least_y:e}"),
    )
}

fn c3_hypergradient_triangle() -> Verdict {
    suite("hypergrad", None).0
}

fn c4_descent() -> Verdict {
    let (v, r) = suite("descent", Some(500));
    let extra = format!(
        "; M_hat {:.4}, L0_hat {:.4}",
        r.m_hat.unwrap_or(f64::NAN),
        r.l0_hat.unwrap_or(f64::NAN)
    );
    verdict(v.pass, v.detail + &extra)
}

fn c5_lipschitz() -> Verdict {
    suite("lemma1", None).0
}

fn c6_rate_trend() -> Verdict {
    suite("rate-trend", Some(4000)).0
}

/// Two-moons protocol: 1506 points per seed, 500 held out for testing,
/// 6 labels, the remaining 1000 unlabeled, features standardized.
fn moons(seed: u64) -> Dataset {
    let ds = gen_two_moons(1506, 0.1, seed).unwrap().hold_out_test(500, seed).unwrap();
    let mut ds = split_labels(&ds, 6, seed).unwrap();
    assert_eq!(ds.count(Split::Unlabeled), 1000);
    let st = Standardizer::fit(&ds).unwrap();
    ds.standardize(&st).unwrap();
    ds
}

fn moons_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![16, 16],
        activation: Activation::Tanh,
        alpha: Schedule {
            kind: ScheduleKind::StepDecay,
            base: 0.3,
        },
        total_steps: 4000,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, Debug)]
enum Variant {
    Full,
    LabeledOnly,
    MetaOnly,
    MixupOnly,
}

fn median_accuracy(v: Variant) -> (f64, Vec<f64>) {
    let mut accs = Vec::new();
    for seed in 0..10u64 {
        let ds = moons(seed);
        let mut cfg = moons_config(seed);
        match v {
            Variant::Full => {}
            Variant::LabeledOnly => cfg.algorithm = Algorithm::LabeledOnly,
            Variant::MetaOnly => cfg.mixup = false,
            Variant::MixupOnly => cfg.meta = false,
        }
        let out = fit(&cfg, &ds).unwrap();
        assert!(out.aborted.is_none(), "{v:?} seed {seed}: {:?}", out.aborted);
        accs.push(out.final_eval(Split::Test).unwrap().accuracy);
    }
    (verify::median(&accs), accs)
}

/// Margin (test accuracy, SSL minus labeled-only median) observed on the
/// first validated run of this protocol.
const PINNED_SSL_MARGIN: f64 = 0.068;
/// How far a rerun may drift from the pinned margin (a few test points,
/// to absorb platform differences in `exp` / `tanh`).
const MARGIN_DRIFT: f64 = 0.005;

fn c7_ssl_benefit() -> Verdict {
    let (full, fa) = median_accuracy(Variant::Full);
    let (lo, la) = median_accuracy(Variant::LabeledOnly);
    let margin = full - lo;
    let reproduced = (margin - PINNED_SSL_MARGIN).abs() <= MARGIN_DRIFT;
    verdict(
        margin >= 0.05 && reproduced,
        format!(
            "median test accuracy {full:.4} vs labeled-only {lo:.4}, margin {:.1} pp (pinned {:.1} pp); \
             ssl {fa:.3?}, labeled-only {la:.3?}",
            100.0 * margin,
            100.0 * PINNED_SSL_MARGIN
        ),
    )
}

fn c8_ablation_order() -> Verdict {
    let (full, _) = median_accuracy(Variant::Full);
    let (meta_only, _) = median_accuracy(Variant::MetaOnly);
    let (mix_only, _) = median_accuracy(Variant::MixupOnly);
    verdict(
        full >= meta_only && full >= mix_only,
        format!("meta+mixup {full:.4}, meta only {meta_only:.4}, mixup only {mix_only:.4}"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut v = vec!["metassl"];
    v.extend_from_slice(args);
    cli::run(v)
}

fn c9_replay() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("blobs.csv");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    assert_eq!(
        run_cli(&["gen-data", "--kind", "blobs", "--n", "300", "--noise", "0.8", "--seed", "4", "--test", "60", "--out", &p(&data)]),
        0
    );
    let runs: [(&str, Vec<&str>); 4] = [
        ("mixup", vec!["--steps", "300", "--labels", "10", "--seed", "1", "--batch-labeled", "16", "--batch-unlabeled", "16"]),
        ("exact", vec!["--algorithm", "exact", "--steps", "200", "--labels", "8", "--seed", "2"]),
        ("theorem", vec!["--theorem-mode", "--steps", "120", "--labels", "12", "--seed", "3", "--include-labeled"]),
        ("supervised", vec!["--algorithm", "labeled-only", "--steps", "200", "--labels", "20", "--seed", "5"]),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, extra) in runs {
        let out = d.join(name);
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        args.extend(extra);
        let code = run_cli(&args);
        let replay_dir = d.join(format!("{name}-replay"));
        let manifest = out.join(cli::MANIFEST_FILE);
        let rcode = run_cli(&["replay", "--manifest", manifest.to_str().unwrap(), "--out-dir", replay_dir.to_str().unwrap()]);
        let a = std::fs::read(out.join(cli::METRICS_FILE)).unwrap_or_default();
        let b = std::fs::read(replay_dir.join(cli::METRICS_FILE)).unwrap_or_default();
        let same = code == 0 && rcode == 0 && !a.is_empty() && a == b;
        ok &= same;
        notes.push(format!("{name} {}", if same { "identical" } else { "DIFFERS" }));
    }
    verdict(ok, notes.join(", "))
}

type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gradient correctness", Duration::from_secs(10), c1_gradients),
        (2, "zero parameter gradient at initialization", Duration::from_secs(1), c2_zero_gradient_at_init),
        (3, "hypergradient triangle", Duration::from_secs(30), c3_hypergradient_triangle),
        (4, "per-step descent", Duration::from_secs(60), c4_descent),
        (5, "pseudo-label Lipschitz bound", Duration::from_secs(60), c5_lipschitz),
        (6, "gradient-norm rate trend", Duration::from_secs(300), c6_rate_trend),
        (7, "semi-supervised benefit", Duration::from_secs(600), c7_ssl_benefit),
        (8, "ablation ordering", Duration::from_secs(1200), c8_ablation_order),
        (9, "manifest replay", Duration::from_secs(120), c9_replay),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} {name}: {} [{:.1} s of {} s]{} - {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { " over budget" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
