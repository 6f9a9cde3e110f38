//! Six-row cross-validated sweeps with per-fold resume files.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{obtain_dataset, write_file, ExperimentConfig, Manifest};
use crate::error::{Error, Result};
use crate::evalmetrics::{config_hash, format_table, run_fold, FoldResult, RunReport, TrainFit};
use crate::schemes::{SchemeConfig, WeakMode};
use crate::shift::{ShiftConfig, ShiftMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkTable {
    /// Strong data only, six covariate-shift treatments.
    Shift,
    /// Weak and strong data combinations, with stain transfer.
    Integration,
}

impl BenchmarkTable {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkTable::Shift => "shift",
            BenchmarkTable::Integration => "integration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub scheme: SchemeConfig,
    pub shift: ShiftConfig,
}

/// Rows in table order. Hyperparameters not varied by the table (batch sizes,
/// learning rate, penalty weight...) come from the config.
pub fn benchmark_rows(cfg: &ExperimentConfig, table: BenchmarkTable) -> Vec<BenchmarkRow> {
    let row = |name: &str, use_strong: bool, weak_mode: WeakMode, mode: ShiftMode| BenchmarkRow {
        name: name.into(),
        scheme: SchemeConfig {
            use_strong,
            weak_mode,
            ..cfg.scheme.clone()
        },
        shift: ShiftConfig { mode, ..cfg.shift.clone() },
    };
    match table {
        BenchmarkTable::Shift => [
            ("w/o color augm.", ShiftMode::None),
            ("w/ color augm.", ShiftMode::ColorJitter),
            ("stain transfer", ShiftMode::StainTransfer),
            ("MMD", ShiftMode::Mmd),
            ("CORAL", ShiftMode::Coral),
            ("adversarial", ShiftMode::Adversarial),
        ]
        .into_iter()
        .map(|(n, m)| row(n, true, WeakMode::Off, m))
        .collect(),
        BenchmarkTable::Integration => [
            ("W-only", false, WeakMode::Plain),
            ("W-only (MIL-WS)", false, WeakMode::MilWs),
            ("W-only (SW-WS)", false, WeakMode::SwWs),
            ("W∪S", true, WeakMode::Plain),
            ("W∪S (MIL-WS)", true, WeakMode::MilWs),
            ("W∪S (SW-WS)", true, WeakMode::SwWs),
        ]
        .into_iter()
        .map(|(n, s, w)| row(n, s, w, ShiftMode::StainTransfer))
        .collect(),
    }
}

/// Completed (row, fold) unit, stored so an interrupted sweep can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FoldRecord {
    row_hash: String,
    result: FoldResult,
}

fn row_hash(science_hash: &str, row: &BenchmarkRow, dataset_hash: Option<&String>) -> Result<String> {
    config_hash(&serde_json::json!({
        "experiment": science_hash,
        "dataset": dataset_hash,
        "row": row,
    }))
}

fn load_record(path: &Path, expected_hash: &str) -> Option<FoldResult> {
    let text = std::fs::read_to_string(path).ok()?;
    let rec: FoldRecord = serde_json::from_str(&text).ok()?;
    (rec.row_hash == expected_hash).then_some(rec.result)
}

/// Runs (or resumes) the sweep and writes `table.txt`, `folds.csv`,
/// `report.json` and `manifest.json` under `<output_dir>/<table>/`. Returns
/// the formatted table.
pub fn cmd_benchmark(cfg: &ExperimentConfig, config_path: &Path, table: BenchmarkTable) -> Result<String> {
    let (ds, inputs) = obtain_dataset(cfg, config_path)?;
    let rows = benchmark_rows(cfg, table);
    let protocol = cfg.protocol();
    protocol.validate()?;
    let science = cfg.science_hash()?;
    let hashes = rows
        .iter()
        .map(|r| row_hash(&science, r, inputs.get("dataset")))
        .collect::<Result<Vec<_>>>()?;
    let out_dir = cfg.output_dir.join(table.name());
    let fold_dir = out_dir.join("folds");
    std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;

    let units: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..protocol.folds).map(move |f| (r, f))).collect();
    let writer = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<FoldResult> = pool.install(|| {
        units
            .par_iter()
            .map(|&(r, f)| {
                let path = fold_dir.join(format!("row{r}_fold{f}.json"));
                if let Some(done) = load_record(&path, &hashes[r]) {
                    return Ok(done);
                }
                let fit = TrainFit {
                    model: cfg.model.clone(),
                    scheme: rows[r].scheme.clone(),
                    shift: rows[r].shift.clone(),
                    stop: cfg.stop(),
                };
                let result = run_fold(&ds, &protocol, f, &fit)
                    .map_err(|e| annotate(e, &rows[r].name, f))?;
                let rec = FoldRecord {
                    row_hash: hashes[r].clone(),
                    result: result.clone(),
                };
                let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Format(e.to_string()))?;
                let _guard = writer.lock().unwrap_or_else(|p| p.into_inner());
                write_file(&path, (text + "\n").as_bytes())?;
                Ok(result)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut reports = Vec::with_capacity(rows.len());
    for (r, chunk) in results.chunks(protocol.folds).enumerate() {
        reports.push(RunReport::from_folds(&rows[r].name, &hashes[r], cfg.seed, chunk.to_vec())?);
    }
    let title = match table {
        BenchmarkTable::Shift => "Shift reduction (strong only)",
        BenchmarkTable::Integration => "Data integration",
    };
    let text = format_table(title, &reports);
    let mut csv = String::from("row,name,fold,seed,auc,accuracy,kendall_tau\n");
    for (r, rep) in reports.iter().enumerate() {
        for line in rep.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{r},{line}");
        }
    }
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&out_dir.join("table.txt"), text.as_bytes())?;
    write_file(&out_dir.join("folds.csv"), csv.as_bytes())?;
    write_file(&out_dir.join("report.json"), (json + "\n").as_bytes())?;
    let details = serde_json::json!({
        "table": table,
        "folds": protocol.folds,
        "fold_seeds": reports[0].folds.iter().map(|f| f.seed).collect::<Vec<_>>(),
        "rows": rows.iter().zip(&hashes).map(|(r, h)| serde_json::json!({"name": r.name, "hash": h})).collect::<Vec<_>>(),
        "outputs": ["table.txt", "folds.csv", "report.json"],
    });
    Manifest::new("benchmark", cfg, inputs, details)?.write(&out_dir.join("manifest.json"))?;
    Ok(text)
}

fn annotate(e: Error, row: &str, fold: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{row}, fold {fold}: {m}")),
        Error::NonFinite(m) => Error::Numeric(format!("{row}, fold {fold}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::EXAMPLE_CONFIG;

    #[test]
    fn row_order_and_content() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
        let rows = benchmark_rows(&cfg, BenchmarkTable::Integration);
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["W-only", "W-only (MIL-WS)", "W-only (SW-WS)", "W∪S", "W∪S (MIL-WS)", "W∪S (SW-WS)"]
        );
        assert!(!rows[2].scheme.use_strong && rows[5].scheme.use_strong);
        assert_eq!(rows[1].scheme.weak_mode, WeakMode::MilWs);
        let rows = benchmark_rows(&cfg, BenchmarkTable::Shift);
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.scheme.use_strong && r.scheme.weak_mode == WeakMode::Off));
        assert_eq!(rows[5].shift.mode, ShiftMode::Adversarial);
    }

    #[test]
    fn row_hashes_differ() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
        let h = cfg.science_hash().unwrap();
        let rows = benchmark_rows(&cfg, BenchmarkTable::Shift);
        let a = row_hash(&h, &rows[0], None).unwrap();
        assert_ne!(a, row_hash(&h, &rows[1], None).unwrap());
        assert_ne!(a, row_hash(&h, &rows[0], Some(&"x".to_string())).unwrap());
    }
}
