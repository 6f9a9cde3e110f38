//! Batch front-end: dataset generation, single training runs, benchmark
//! sweeps, the verification suite and gradient checks.

mod benchmark;
mod config;
mod verify;

pub use benchmark::{benchmark_rows, cmd_benchmark, BenchmarkRow, BenchmarkTable};
pub use config::{CvSection, ExperimentConfig, EXAMPLE_CONFIG, OUTPUT_DIR_ENV};
pub use verify::{gradcheck_matrix, run_checks, CheckOutcome};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::{accuracy, holdout_split, slide_score};
use crate::image::RgbImage;
use crate::model::{grad_check_report, GradFault, ModelConfig, GRAD_CHECK_STEP};
use crate::numerics::Rng;
use crate::schemes::{train_run, TrainData};
use crate::shift::{color_jitter, stain_transfer};
use crate::synthdata::{
    export_csv, load_dataset, render_synthetic_patch, save_dataset, select_top_patches, Bag, BinaryLabel, Dataset,
    StainParams,
};

pub const MANIFEST_FORMAT: &str = "weakstrong-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "weakstrong", version, about = "Weak + strong label training harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and save it.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file (default: <output_dir>/dataset.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a flat CSV of every instance.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Render synthetic H&E-like patches and their augmentations as PPM files.
        #[arg(long)]
        patch_dir: Option<PathBuf>,
    },
    /// Train one model on all bags (80/20 holdout split).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a six-row cross-validated sweep.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        table: BenchmarkTable,
    },
    /// Run the invariant and oracle suite.
    Verify {
        /// Test hook: corrupt one analytic gradient to prove the check bites.
        #[arg(long, hide = true)]
        inject_grad_bug: bool,
    },
    /// Finite-difference check of the classifier gradients.
    Gradcheck {
        /// Take the model architecture from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            config,
            out,
            csv,
            patch_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("dataset.json"));
            cmd_synth(&cfg, &config, &out, csv.as_deref(), patch_dir.as_deref())?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = cmd_train(&cfg, &config)?;
            println!(
                "best epoch {} of {}; holdout slide accuracy {:.3}; checkpoint {}",
                summary.best_epoch,
                summary.epochs_run,
                summary.holdout_slide_accuracy,
                cfg.output_dir.join("checkpoint.json").display()
            );
            Ok(0)
        }
        Command::Benchmark { config, table } => {
            let cfg = ExperimentConfig::load(&config)?;
            let text = cmd_benchmark(&cfg, &config, table)?;
            print!("{text}");
            Ok(0)
        }
        Command::Verify { inject_grad_bug } => {
            let outcomes = run_checks(inject_grad_bug);
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} check(s) failed")));
            }
            Ok(0)
        }
        Command::Gradcheck { config, seed } => {
            let model = match config {
                Some(p) => ExperimentConfig::load(&p)?.model,
                None => ModelConfig::default(),
            };
            cmd_gradcheck(&model, seed, None)
        }
    }
}

/// Prints per-tensor relative errors; exit 4 when any exceeds the tolerance.
pub fn cmd_gradcheck(model: &ModelConfig, seed: u64, fault: Option<&GradFault>) -> Result<i32> {
    let report = grad_check_report(model, seed, fault)?;
    println!("central differences, h = {GRAD_CHECK_STEP:e}");
    for (name, err) in &report.per_tensor {
        println!("{name:<20} {err:.3e}");
    }
    if report.max_relative_error >= GRAD_TOLERANCE {
        return Err(Error::Verification(format!(
            "max relative error {:.3e} in {}",
            report.max_relative_error,
            report.worst_tensor().unwrap_or("?")
        )));
    }
    println!("max relative error {:.3e} < {GRAD_TOLERANCE:e}", report.max_relative_error);
    Ok(0)
}

/// Reproduction record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// SHA-256 of every input file, by role.
    pub inputs: BTreeMap<String, String>,
    /// Command-specific facts (seeds, row hashes, outcomes).
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, inputs: BTreeMap<String, String>, details: serde_json::Value) -> Result<Self> {
        Ok(Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.science_hash()?,
            config: cfg.clone(),
            inputs,
            details,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_file(path, (text + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads `cfg.dataset` when set, otherwise generates from `cfg.gen`; records
/// input hashes.
pub fn obtain_dataset(cfg: &ExperimentConfig, config_path: &Path) -> Result<(Dataset, BTreeMap<String, String>)> {
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), file_sha256(config_path)?);
    let ds = match &cfg.dataset {
        Some(p) => {
            inputs.insert("dataset".to_string(), file_sha256(p)?);
            let ds = load_dataset(p)?;
            if ds.gen.input_dim != cfg.model.input_dim {
                return Err(Error::Config(format!(
                    "dataset has input_dim {}, model expects {}",
                    ds.gen.input_dim, cfg.model.input_dim
                )));
            }
            ds
        }
        None => Dataset::generate(&cfg.gen)?,
    };
    Ok((ds, inputs))
}

pub fn cmd_synth(
    cfg: &ExperimentConfig,
    config_path: &Path,
    out: &Path,
    csv: Option<&Path>,
    patch_dir: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::generate(&cfg.gen)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&ds, out)?;
    if let Some(csv) = csv {
        export_csv(&ds, csv)?;
    }
    let mut details = serde_json::json!({
        "dataset": out.file_name().map(|s| s.to_string_lossy().to_string()),
        "weak_bags": ds.weak.len(),
        "strong_instances": ds.strong.len(),
    });
    if let Some(dir) = patch_dir {
        details["top_patches"] = serde_json::json!(dump_patches(cfg.seed, dir)?);
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), file_sha256(config_path)?);
    let manifest_path = out.with_extension("manifest.json");
    Manifest::new("synth", cfg, inputs, details)?.write(&manifest_path)
}

/// 64 candidate patches at random nuclei densities; writes every candidate,
/// a jittered and a stain-transferred copy of the best one, and returns the
/// top-16 indices by mean Blue Ratio.
fn dump_patches(seed: u64, dir: &Path) -> Result<Vec<usize>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = Rng::with_stream(seed, 0xDA7A);
    let stain = StainParams::default();
    let patches: Vec<RgbImage> = (0..64)
        .map(|_| {
            let d = rng.uniform();
            render_synthetic_patch(&mut rng, d, &stain)
        })
        .collect::<Result<_>>()?;
    for (i, p) in patches.iter().enumerate() {
        p.write_ppm(&dir.join(format!("patch_{i:02}.ppm")))?;
    }
    let top = select_top_patches(&patches, 16)?;
    let best = &patches[top[0]];
    color_jitter(best, &mut rng, 0.1)?.write_ppm(&dir.join("best_jitter.ppm"))?;
    let target_stain = StainParams {
        hematoxylin: [0.55, 0.75, 0.37],
        eosin: [0.15, 0.95, 0.27],
        ..StainParams::default()
    };
    let target = render_synthetic_patch(&mut rng, 0.6, &target_stain)?;
    target.write_ppm(&dir.join("stain_target.ppm"))?;
    stain_transfer(best, &target)?.image.write_ppm(&dir.join("best_stain_transfer.ppm"))?;
    Ok(top)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub holdout_slide_accuracy: f64,
    pub n_train_bags: usize,
    pub n_holdout_bags: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig, config_path: &Path) -> Result<TrainSummary> {
    let (ds, inputs) = obtain_dataset(cfg, config_path)?;
    let labels: Vec<usize> = ds.weak.iter().map(|b| b.weak_label.class_index()).collect();
    let (train_idx, hold_idx) = holdout_split(&labels, cfg.cv.holdout_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.weak[i]).collect::<Vec<&Bag>>();
    let (train, hold) = (pick(&train_idx), pick(&hold_idx));
    let data = TrainData::from_parts(&ds.strong, &train, &hold, ds.gen.input_dim)?;
    let out = train_run(&data, &cfg.model, &cfg.scheme, &cfg.shift, &cfg.stop(), cfg.seed)?;

    let scores = hold.iter().map(|b| slide_score(&out.params, b)).collect::<Result<Vec<_>>>()?;
    let positive: Vec<bool> = hold.iter().map(|b| b.weak_label == BinaryLabel::High).collect();
    let summary = TrainSummary {
        best_epoch: out.best_epoch,
        epochs_run: out.history.len(),
        stopped_early: out.stopped_early,
        holdout_slide_accuracy: if hold.is_empty() { f64::NAN } else { accuracy(&scores, &positive, 0.5)? },
        n_train_bags: train.len(),
        n_holdout_bags: hold.len(),
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    out.params.save(&cfg.output_dir.join("checkpoint.json"))?;
    out.write_history(&cfg.output_dir.join("history.csv"))?;
    let details = serde_json::json!({
        "summary": summary,
        "outputs": ["checkpoint.json", "history.csv"],
    });
    Manifest::new("train", cfg, inputs, details)?.write(&cfg.output_dir.join("manifest.json"))?;
    Ok(summary)
}
