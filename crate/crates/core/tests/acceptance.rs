//! Acceptance suite. Each test prints one `ACCEPTANCE n PASS|FAIL` line to
//! stderr (bypassing output capture) and then asserts.
//!
//! Run with `cargo test --release -p weakstrong --test acceptance`.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use weakstrong::cli::{cmd_benchmark, gradcheck_matrix, BenchmarkTable, ExperimentConfig, EXAMPLE_CONFIG};
use weakstrong::evalmetrics::{holdout_split, kendall_tau_b, roc_auc, RunReport};
use weakstrong::model::{grad_check_report, Gradients, ModelConfig, ModelParams, relative_error};
use weakstrong::numerics::{Rng, Tensor2D};
use weakstrong::optim::{adam_step, AdamState, OptimizerKind};
use weakstrong::schemes::{
    confidence_by_concordance, sw_ws_iteration, train_run, weak_step_mil, Batch, EarlyStop, MilConfidence,
    SchemeConfig, Source, TrainData, WeakMode,
};
use weakstrong::shift::{coral, mmd2, stain_transfer, PenaltyOutput, ShiftConfig};
use weakstrong::synthdata::{blue_ratio_pixel, render_synthetic_patch, Bag, Dataset, StainParams};

// Pinned thresholds.
const GRAD_TOL: f64 = 1e-5;
const GRAD_TIME: Duration = Duration::from_secs(10);
const TRACE_TOL: f64 = 1e-12;
const MIL_ITERATIONS: usize = 500;
const MIL_BATCH: usize = 128;
const MIL_K: usize = 32;
const METRIC_CASES: usize = 200;
const METRIC_ITEMS: usize = 50;
const PENALTY_ZERO_TOL: f64 = 1e-12;
const PENALTY_GRAD_TOL: f64 = 1e-5;
const PENALTY_PAIRS: usize = 20;
const FD_STEP: f64 = 1e-4;
const ADAM_TOL: f64 = 1e-12;
const BLUE_RATIO_TOL: f64 = 0.01;
const SELF_TRANSFER_LEVELS: f64 = 1.0;
/// Required W∪S(SW-WS) − W∪S(plain) mean AUC; see the decisions ledger.
const SW_WS_MARGIN: f64 = 0.0;
const SWEEP_TIME: Duration = Duration::from_secs(300);
/// Required concordant − discordant mean confidence.
const CONFIDENCE_MARGIN: f64 = 0.1;
const BENCH_SEED: u64 = 1;

fn report(n: u32, pass: bool, what: &str) {
    let line = format!("ACCEPTANCE {n:>2} {} {what}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn default_config(output_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
    cfg.seed = BENCH_SEED;
    cfg.gen.seed = BENCH_SEED;
    cfg.output_dir = output_dir.to_path_buf();
    cfg
}

fn write_example(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("example.toml");
    std::fs::write(&p, EXAMPLE_CONFIG).unwrap();
    p
}

#[test]
fn acceptance_01_gradient_correctness() {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (i, cfg) in gradcheck_matrix().iter().enumerate() {
        for seed in 0..3 {
            let r = grad_check_report(cfg, 1000 * i as u64 + seed, None).unwrap();
            if r.max_relative_error > worst.0 {
                worst = (r.max_relative_error, format!("{:?}/{}", cfg.hidden_dims, r.worst_tensor().unwrap()));
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = worst.0 < GRAD_TOL && elapsed < GRAD_TIME;
    report(
        1,
        pass,
        &format!("gradcheck max rel err {:.2e} ({}), {:.2?}", worst.0, worst.1, elapsed),
    );
    assert!(pass);
}

#[test]
fn acceptance_02_algorithm_fidelity() {
    // Hand trace, scalar input, two-class logistic head, SGD η = 0.1:
    // strong (x = 1.5, y = 0) step, then weak (x = −0.7, y = 1) step weighted
    // by c = p̂(y | x) at the post-strong parameters.
    const C: f64 = 0.5752002244820488;
    const W: [f64; 2] = [0.36360797266750755, -0.26360797266750763];
    const B: [f64; 2] = [0.10656805926345381, 0.043431940736546194];

    let cfg = ModelConfig {
        input_dim: 1,
        hidden_dims: vec![],
        num_classes: 2,
        domain_head: false,
    };
    let mut p = ModelParams::zeros(&cfg).unwrap();
    p.head.weight = Tensor2D::from_vec(1, 2, vec![0.3, -0.2]).unwrap();
    p.head.bias = Tensor2D::from_vec(1, 2, vec![0.1, 0.05]).unwrap();
    let strong = Batch::new(Tensor2D::filled(1, 1, 1.5), vec![0], Source::Strong, vec![None]).unwrap();
    let weak = Batch::new(Tensor2D::filled(1, 1, -0.7), vec![1], Source::Weak, vec![Some(0)]).unwrap();
    let scheme = SchemeConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        ..SchemeConfig::new(true, WeakMode::SwWs)
    };
    let mut opt = scheme.make_optimizer(&p);
    let out = sw_ws_iteration(&mut p, &mut opt, Some(&strong), &weak, &scheme).unwrap();
    let mut err = (out.confidences[0] - C).abs();
    for k in 0..2 {
        err = err.max((p.head.weight.get(0, k) - W[k]).abs());
        err = err.max((p.head.bias.get(0, k) - B[k]).abs());
    }
    let pass = err < TRACE_TOL;
    report(2, pass, &format!("hand trace max abs deviation {err:.1e}"));
    assert!(pass);
}

fn default_train_data(seed: u64) -> (Dataset, Vec<usize>, Vec<usize>) {
    let cfg = default_config(Path::new("unused"));
    let ds = Dataset::generate(&cfg.gen).unwrap();
    let labels: Vec<usize> = ds.weak.iter().map(|b| b.weak_label.class_index()).collect();
    let (train, hold) = holdout_split(&labels, 0.2, seed);
    (ds, train, hold)
}

fn pick<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a Bag> {
    idx.iter().map(|&i| &ds.weak[i]).collect()
}

#[test]
fn acceptance_03_reduction_identity() {
    let cfg = default_config(Path::new("unused"));
    let (ds, train, hold) = default_train_data(cfg.seed);
    let data = TrainData::from_parts(&ds.strong, &pick(&ds, &train), &pick(&ds, &hold), ds.gen.input_dim).unwrap();
    // no early stop: every one of the 20 epochs runs
    let stop = EarlyStop {
        max_epochs: 20,
        patience: 21,
    };
    let plain = SchemeConfig {
        weak_mode: WeakMode::Plain,
        ..cfg.scheme.clone()
    };
    let forced = SchemeConfig {
        weak_mode: WeakMode::SwWs,
        force_unit_confidence: true,
        ..cfg.scheme.clone()
    };
    let a = train_run(&data, &cfg.model, &plain, &cfg.shift, &stop, cfg.seed).unwrap();
    let b = train_run(&data, &cfg.model, &forced, &cfg.shift, &stop, cfg.seed).unwrap();
    let ja = serde_json::to_string(&a.params).unwrap();
    let jb = serde_json::to_string(&b.params).unwrap();
    let pass = a.history.len() == 20 && ja == jb && a.history_csv() == b.history_csv();
    report(
        3,
        pass,
        &format!("c≡1 SW-WS vs plain, {} epochs, checkpoints identical: {}", a.history.len(), ja == jb),
    );
    assert!(pass);
}

#[test]
fn acceptance_04_mil_cardinality() {
    let cfg = ModelConfig::default();
    let mut rng = Rng::new(4);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    let scheme = SchemeConfig {
        learning_rate: 1e-3,
        ..SchemeConfig::new(false, WeakMode::MilWs)
    };
    let mut opt = scheme.make_optimizer(&params);
    let mut bad = 0;
    for _ in 0..MIL_ITERATIONS {
        let x = rng.normal(MIL_BATCH, cfg.input_dim, 0.0, 1.0).unwrap();
        let y = (0..MIL_BATCH).map(|_| rng.below(2)).collect();
        let batch = Batch::new(x, y, Source::Weak, vec![Some(0); MIL_BATCH]).unwrap();
        let out = weak_step_mil(&mut params, &mut opt, &batch, 0.25, MilConfidence::WeakLabel).unwrap();
        let mut oracle: Vec<usize> = (0..MIL_BATCH).collect();
        let c = &out.confidences;
        oracle.sort_by(|&i, &j| c[j].partial_cmp(&c[i]).unwrap().then(i.cmp(&j)));
        oracle.truncate(MIL_K);
        oracle.sort();
        if out.selected.len() != MIL_K || out.selected != oracle {
            bad += 1;
        }
    }
    let pass = bad == 0;
    report(4, pass, &format!("{MIL_ITERATIONS} iterations at |b_w|={MIL_BATCH}, {bad} deviating selections"));
    assert!(pass);
}

fn brute_auc(s: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn brute_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let (mut c, mut d, mut tx, mut ty, mut n) = (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            n += 1;
            let (sx, sy) = (x[i].partial_cmp(&x[j]).unwrap(), y[i].partial_cmp(&y[j]).unwrap());
            tx += i64::from(sx.is_eq());
            ty += i64::from(sy.is_eq());
            if !sx.is_eq() && !sy.is_eq() {
                if sx == sy {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
    }
    (c - d) as f64 / (((n - tx) * (n - ty)) as f64).sqrt()
}

#[test]
fn acceptance_05_metric_oracles() {
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let mut rng = Rng::new(5);
    let mut mismatches = 0;
    let mut cases = 0;
    while cases < METRIC_CASES {
        let s: Vec<f64> = (0..METRIC_ITEMS).map(|_| rng.below(12) as f64 / 11.0).collect();
        let pos: Vec<bool> = (0..METRIC_ITEMS).map(|_| rng.below(2) == 0).collect();
        let g: Vec<f64> = (0..METRIC_ITEMS).map(|_| rng.below(5) as f64).collect();
        if pos.iter().all(|&p| p) || pos.iter().all(|&p| !p) {
            continue;
        }
        cases += 1;
        mismatches += usize::from(roc_auc(&s, &pos).unwrap() != brute_auc(&s, &pos));
        mismatches += usize::from(kendall_tau_b(&s, &g).unwrap() != brute_tau_b(&s, &g));
    }
    let pass = worked == 0.75 && mismatches == 0;
    report(
        5,
        pass,
        &format!("worked AUC {worked}, {mismatches} inexact results over {METRIC_CASES} tied inputs"),
    );
    assert!(pass);
}

/// Worst relative error of the analytic source/target gradients of `f`
/// against central differences.
fn penalty_grad_error(fs: &Tensor2D, ft: &Tensor2D, f: impl Fn(&Tensor2D, &Tensor2D) -> PenaltyOutput) -> f64 {
    let out = f(fs, ft);
    let mut worst = 0.0f64;
    for (which, analytic) in [(0, &out.d_source), (1, &out.d_target)] {
        let mut a = fs.clone();
        let mut b = ft.clone();
        for i in 0..analytic.data().len() {
            let slot = |a: &mut Tensor2D, b: &mut Tensor2D, v: f64| {
                if which == 0 {
                    a.data_mut()[i] = v
                } else {
                    b.data_mut()[i] = v
                }
            };
            let orig = if which == 0 { fs.data()[i] } else { ft.data()[i] };
            slot(&mut a, &mut b, orig + FD_STEP);
            let up = f(&a, &b).value;
            slot(&mut a, &mut b, orig - FD_STEP);
            let down = f(&a, &b).value;
            slot(&mut a, &mut b, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            // entries whose derivative vanishes are compared absolutely
            let e = if analytic.data()[i].abs() + numeric.abs() < 1e-8 {
                0.0
            } else {
                relative_error(analytic.data()[i], numeric)
            };
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn acceptance_06_penalty_correctness() {
    let mut rng = Rng::new(6);
    let same = rng.normal(16, 6, 0.0, 1.0).unwrap();
    let zero = mmd2(&same, &same, 1.5).unwrap().value.abs().max(coral(&same, &same).unwrap().value.abs());
    let mut worst = 0.0f64;
    for _ in 0..PENALTY_PAIRS {
        let fs = rng.normal(10, 4, 0.0, 1.0).unwrap();
        let ft = rng.normal(12, 4, 0.5, 1.3).unwrap();
        worst = worst.max(penalty_grad_error(&fs, &ft, |a, b| mmd2(a, b, 1.7).unwrap()));
        worst = worst.max(penalty_grad_error(&fs, &ft, |a, b| coral(a, b).unwrap()));
    }
    let pass = zero <= PENALTY_ZERO_TOL && worst < PENALTY_GRAD_TOL;
    report(
        6,
        pass,
        &format!("identical-input penalty {zero:.1e}, gradient rel err {worst:.2e} over {PENALTY_PAIRS} pairs"),
    );
    assert!(pass);
}

fn scalar_model(theta: f64) -> ModelParams {
    let cfg = ModelConfig {
        input_dim: 1,
        hidden_dims: vec![],
        num_classes: 2,
        domain_head: false,
    };
    let mut p = ModelParams::zeros(&cfg).unwrap();
    p.head.weight.set(0, 0, theta);
    p
}

#[test]
fn acceptance_07_optimizer() {
    let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
    let gs = [0.5, -0.2, 0.8];
    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut p = scalar_model(theta);
    let mut st = AdamState::new(&p, lr);
    let mut err = 0.0f64;
    for (t, &g) in gs.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32 + 1));
        let vhat = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= lr * mhat / (vhat.sqrt() + eps);
        let mut grads = Gradients::zeros_like(&p);
        grads.head.weight.set(0, 0, g);
        adam_step(&mut p, &grads, &mut st).unwrap();
        err = err.max((p.head.weight.get(0, 0) - theta).abs());
    }
    let mut first_step_dev = 0.0f64;
    for g in [1e-4, -0.03, 1.0, -7.5, 1e3] {
        let mut q = scalar_model(0.0);
        let mut st = AdamState::new(&q, lr);
        let mut grads = Gradients::zeros_like(&q);
        grads.head.weight.set(0, 0, g);
        adam_step(&mut q, &grads, &mut st).unwrap();
        first_step_dev = first_step_dev.max((q.head.weight.get(0, 0).abs() - lr).abs() / lr);
    }
    let pass = err < ADAM_TOL && first_step_dev < 1e-3;
    report(
        7,
        pass,
        &format!("Adam trajectory err {err:.1e}, first-step |Δ|/η deviation {first_step_dev:.1e}"),
    );
    assert!(pass);
}

#[test]
fn acceptance_08_pipeline() {
    let values = [
        blue_ratio_pixel([0.0, 0.0, 0.0]),
        blue_ratio_pixel([0.0, 0.0, 255.0]),
        blue_ratio_pixel([255.0, 255.0, 255.0]),
    ];
    let br_ok = values[0] == 0.0 && values[1] == 25500.0 && (values[2] - 16.67).abs() < BLUE_RATIO_TOL;
    let mut rng = Rng::new(8);
    let mut dev = 0.0f64;
    for d in [0.2, 0.5, 0.8] {
        let img = render_synthetic_patch(&mut rng, d, &StainParams::default()).unwrap();
        let out = stain_transfer(&img, &img).unwrap();
        for (a, b) in out.image.data().iter().zip(img.data()) {
            dev = dev.max((a - b).abs());
        }
    }
    let pass = br_ok && dev <= SELF_TRANSFER_LEVELS;
    report(
        8,
        pass,
        &format!("blue ratio {:?}, stain self-transfer max deviation {dev:.3} levels", values),
    );
    assert!(pass);
}

fn mean_auc(reports: &[RunReport], name: &str) -> f64 {
    reports.iter().find(|r| r.name == name).unwrap().mean.auc
}

#[test]
fn acceptance_09_integration_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = default_config(tmp.path());
    let t = Instant::now();
    cmd_benchmark(&cfg, &write_example(tmp.path()), BenchmarkTable::Integration).unwrap();
    let elapsed = t.elapsed();
    let text = std::fs::read_to_string(tmp.path().join("integration/report.json")).unwrap();
    let reports: Vec<RunReport> = serde_json::from_str(&text).unwrap();
    let (w, ws, sw) = (
        mean_auc(&reports, "W-only"),
        mean_auc(&reports, "W∪S"),
        mean_auc(&reports, "W∪S (SW-WS)"),
    );
    let pass = sw - ws >= SW_WS_MARGIN && ws >= w && elapsed < SWEEP_TIME;
    report(
        9,
        pass,
        &format!(
            "mean AUC W∪S(SW-WS) {sw:.4} vs W∪S {ws:.4} (margin {SW_WS_MARGIN}) vs W-only {w:.4}; sweep {:.1?}",
            elapsed
        ),
    );
    assert!(pass, "ordering W∪S(SW-WS) ≥ W∪S ≥ W-only does not hold");
}

#[test]
fn acceptance_10_noise_attenuation() {
    let cfg = default_config(Path::new("unused"));
    let (ds, train, hold) = default_train_data(cfg.seed);
    let (train, hold) = (pick(&ds, &train), pick(&ds, &hold));
    let data = TrainData::from_parts(&ds.strong, &train, &hold, ds.gen.input_dim).unwrap();
    let out = train_run(&data, &cfg.model, &cfg.scheme, &cfg.shift, &cfg.stop(), cfg.seed).unwrap();
    assert_eq!(cfg.scheme.weak_mode, WeakMode::SwWs);
    let (disc, conc) = confidence_by_concordance(&out.params, &train).unwrap();
    let pass = conc - disc >= CONFIDENCE_MARGIN;
    report(
        10,
        pass,
        &format!("mean confidence discordant {disc:.3} vs concordant {conc:.3} (margin {CONFIDENCE_MARGIN})"),
    );
    assert!(pass);
}

#[test]
fn acceptance_11_benchmark_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = default_config(tmp.path());
    let config_path = write_example(tmp.path());
    let mut runs = Vec::new();
    for _ in 0..2 {
        // a clean directory each time, so nothing is resumed
        let _ = std::fs::remove_dir_all(tmp.path().join("integration"));
        cmd_benchmark(&cfg, &config_path, BenchmarkTable::Integration).unwrap();
        let dir = tmp.path().join("integration");
        let mut files: Vec<_> = walk(&dir).into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect();
        files.sort();
        runs.push(files);
    }
    let pass = runs[0] == runs[1] && runs[0].len() == 4 + 30;
    report(11, pass, &format!("{} output files, byte-identical on rerun: {}", runs[0].len(), runs[0] == runs[1]));
    assert!(pass);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// The shipped example config is the default generator and model; only the
/// training schedule differs from the library defaults.
#[test]
fn example_config_uses_default_generator() {
    let cfg = default_config(Path::new("x"));
    let gen = weakstrong::synthdata::GenConfig {
        seed: BENCH_SEED,
        ..Default::default()
    };
    assert_eq!(cfg.gen, gen);
    assert_eq!(cfg.model, ModelConfig::default());
    assert_eq!(cfg.shift, ShiftConfig::with_mode(weakstrong::shift::ShiftMode::StainTransfer));
}
