use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mean_sd;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub accuracy: f64,
    pub kendall_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub metrics: Metrics,
    pub n_train_bags: usize,
    pub n_holdout_bags: usize,
    pub n_test_bags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean: Metrics,
    /// Sample (n−1) standard deviation across folds.
    pub stdev: Metrics,
}

impl RunReport {
    pub fn from_folds(name: &str, config_hash: &str, seed: u64, mut folds: Vec<FoldResult>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Parameter("report without folds".into()));
        }
        folds.sort_by_key(|f| f.fold);
        let pick = |f: fn(&Metrics) -> f64| mean_sd(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let (auc, acc, tau) = (pick(|m| m.auc), pick(|m| m.accuracy), pick(|m| m.kendall_tau));
        Ok(RunReport {
            name: name.into(),
            config_hash: config_hash.into(),
            seed,
            mean: Metrics {
                auc: auc.0,
                accuracy: acc.0,
                kendall_tau: tau.0,
            },
            stdev: Metrics {
                auc: auc.1,
                accuracy: acc.1,
                kendall_tau: tau.1,
            },
            folds,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report serialization: {e}")))
    }

    /// One line per fold plus mean and sd rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,fold,seed,auc,accuracy,kendall_tau\n");
        for f in &self.folds {
            let m = &f.metrics;
            let _ = writeln!(s, "{},{},{},{},{},{}", self.name, f.fold, f.seed, m.auc, m.accuracy, m.kendall_tau);
        }
        for (tag, m) in [("mean", &self.mean), ("sd", &self.stdev)] {
            let _ = writeln!(s, "{},{tag},,{},{},{}", self.name, m.auc, m.accuracy, m.kendall_tau);
        }
        s
    }
}

/// SHA-256 (hex) of the canonical JSON of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config).map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// `0.882 (± 0.024)`.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.3} (± {sd:.3})")
}

/// Plain-text table: one row per report with AUC, accuracy and Kendall tau.
pub fn format_table(title: &str, reports: &[RunReport]) -> String {
    let width = reports.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(title.chars().count());
    let mut s = format!(
        "{title:<width$}  {:<17}  {:<17}  {:<17}\n",
        "AUC", "Accuracy", "Kendall tau"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:<17}  {:<17}  {:<17}",
            r.name,
            format_mean_sd(r.mean.auc, r.stdev.auc),
            format_mean_sd(r.mean.accuracy, r.stdev.accuracy),
            format_mean_sd(r.mean.kendall_tau, r.stdev.kendall_tau),
        );
    }
    s
}
