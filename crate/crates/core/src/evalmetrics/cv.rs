use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, kendall_tau_b, roc_auc, slide_score, FoldResult, Metrics, RunReport};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Rng;
use crate::schemes::{train_run, EarlyStop, SchemeConfig, TrainData};
use crate::shift::ShiftConfig;
use crate::synthdata::{Bag, BinaryLabel, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvProtocol {
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Share of each fold's training bags set aside for early stopping.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Fold-level parallelism; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
}

fn default_folds() -> usize {
    5
}
fn default_holdout() -> f64 {
    0.2
}

impl CvProtocol {
    pub fn new(seed: u64) -> Self {
        CvProtocol {
            folds: default_folds(),
            holdout_fraction: default_holdout(),
            seed,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("cv.folds must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("cv.holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Bag indices of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffle, then one round-robin deal over all classes in turn,
/// so both fold sizes and per-class counts differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for i in members {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn stratified_holdout(candidates: &[usize], labels: &[usize], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = candidates.iter().copied().filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        let h = (fraction * members.len() as f64).round() as usize;
        holdout.extend_from_slice(&members[..h]);
        train.extend_from_slice(&members[h..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

/// Stratified train/holdout split of all bags, for single training runs.
pub fn holdout_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..labels.len()).collect();
    stratified_holdout(&all, labels, fraction, &mut Rng::with_stream(seed, 0xF01D))
}

pub fn cv_splits(labels: &[usize], protocol: &CvProtocol) -> Result<Vec<FoldSplit>> {
    protocol.validate()?;
    let mut rng = Rng::with_stream(protocol.seed, 0xF01D);
    let folds = stratified_folds(labels, protocol.folds, &mut rng)?;
    let splits: Vec<FoldSplit> = (0..protocol.folds)
        .map(|f| {
            let rest: Vec<usize> = (0..protocol.folds)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().copied())
                .collect();
            let (train, holdout) = stratified_holdout(&rest, labels, protocol.holdout_fraction, &mut rng);
            FoldSplit {
                fold: f,
                train,
                holdout,
                test: folds[f].clone(),
            }
        })
        .collect();
    for s in &splits {
        assert_no_leakage(s, labels.len())?;
    }
    Ok(splits)
}

/// Train, holdout and test must be disjoint and together cover every bag.
pub fn assert_no_leakage(split: &FoldSplit, n_bags: usize) -> Result<()> {
    let mut seen = vec![false; n_bags];
    for &i in split.train.iter().chain(&split.holdout).chain(&split.test) {
        if i >= n_bags || seen[i] {
            return Err(Error::Verification(format!("fold {}: bag index {i} leaks between splits", split.fold)));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Verification(format!("fold {}: splits do not cover every bag", split.fold)));
    }
    Ok(())
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    Rng::with_stream(seed, 1 + fold as u64).next_u64()
}

/// Anything that can score a slide.
pub trait SlideScorer {
    fn slide_score(&self, bag: &Bag) -> Result<f64>;
}

impl SlideScorer for ModelParams {
    fn slide_score(&self, bag: &Bag) -> Result<f64> {
        slide_score(self, bag)
    }
}

/// Produces a slide scorer from one fold's training material.
pub trait ModelFit: Sync {
    type Scorer: SlideScorer;
    fn fit(&self, data: &TrainData, seed: u64) -> Result<Self::Scorer>;
}

/// The standard fit: `train_run`, keeping the best-holdout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFit {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub shift: ShiftConfig,
    pub stop: EarlyStop,
}

impl ModelFit for TrainFit {
    type Scorer = ModelParams;
    fn fit(&self, data: &TrainData, seed: u64) -> Result<ModelParams> {
        Ok(train_run(data, &self.model, &self.scheme, &self.shift, &self.stop, seed)?.params)
    }
}

fn bag_labels(ds: &Dataset) -> Vec<usize> {
    ds.weak.iter().map(|b| b.weak_label.class_index()).collect()
}

/// Trains and scores one fold.
pub fn run_fold<F: ModelFit>(ds: &Dataset, protocol: &CvProtocol, fold: usize, fit: &F) -> Result<FoldResult> {
    let splits = cv_splits(&bag_labels(ds), protocol)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| Error::Parameter(format!("fold {fold} of {}", protocol.folds)))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.weak[i]).collect::<Vec<&Bag>>();
    let (train, holdout, test) = (pick(&split.train), pick(&split.holdout), pick(&split.test));
    let data = TrainData::from_parts(&ds.strong, &train, &holdout, ds.gen.input_dim)?;
    let seed = fold_seed(protocol.seed, fold);
    let scorer = fit.fit(&data, seed)?;

    let scores = test.iter().map(|b| scorer.slide_score(b)).collect::<Result<Vec<f64>>>()?;
    let positive: Vec<bool> = test.iter().map(|b| b.weak_label == BinaryLabel::High).collect();
    let groups: Vec<f64> = test.iter().map(|b| b.gleason_group.ordinal() as f64).collect();
    Ok(FoldResult {
        fold,
        seed,
        metrics: Metrics {
            auc: roc_auc(&scores, &positive)?,
            accuracy: accuracy(&scores, &positive, 0.5)?,
            kendall_tau: kendall_tau_b(&scores, &groups)?,
        },
        n_train_bags: train.len(),
        n_holdout_bags: holdout.len(),
        n_test_bags: test.len(),
    })
}

/// All folds, in parallel, each with its own derived seed.
pub fn cross_validate<F: ModelFit>(
    ds: &Dataset,
    protocol: &CvProtocol,
    fit: &F,
    name: &str,
    config_hash: &str,
) -> Result<RunReport> {
    protocol.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(protocol.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let folds = pool.install(|| {
        (0..protocol.folds)
            .into_par_iter()
            .map(|f| run_fold(ds, protocol, f, fit))
            .collect::<Result<Vec<_>>>()
    })?;
    RunReport::from_folds(name, config_hash, protocol.seed, folds)
}
