//! Slide-level evaluation: slide scores, ROC AUC, accuracy, Kendall tau-b and
//! the stratified cross-validation harness.

mod cv;
mod report;

pub use cv::{
    assert_no_leakage, cross_validate, cv_splits, fold_seed, holdout_split, run_fold, stratified_folds, CvProtocol, FoldSplit,
    ModelFit, SlideScorer, TrainFit,
};
pub use report::{config_hash, format_mean_sd, format_table, FoldResult, Metrics, RunReport};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::synthdata::{Bag, BinaryLabel};

/// Fraction of a bag's instances predicted high-grade.
pub fn slide_score(params: &ModelParams, bag: &Bag) -> Result<f64> {
    if bag.instances.is_empty() {
        return Err(Error::Parameter(format!("bag {} has no instances", bag.bag_id)));
    }
    let preds = forward(params, &bag.feature_matrix()?)?.predictions();
    let high = BinaryLabel::High.class_index();
    Ok(preds.iter().filter(|&&k| k == high).count() as f64 / preds.len() as f64)
}

/// Area under the ROC curve via the Mann–Whitney statistic; tied scores
/// across classes count one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction classified correctly when `score ≥ threshold` means positive.
pub fn accuracy(scores: &[f64], positive: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = scores.iter().zip(positive).filter(|(&s, &p)| (s >= threshold) == p).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Kendall's tau-b, which corrects for ties in either variable.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} vs {} observations", x.len(), y.len())));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + tie_x) as f64;
    let n1 = (concordant + discordant + tie_y) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::UndefinedMetric("Kendall tau of a constant sequence".into()));
    }
    Ok((concordant - discordant) as f64 / (n0 * n1).sqrt())
}

/// Sample mean and (n−1) standard deviation; the deviation is 0 for one value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_worked_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn accuracy_threshold_is_inclusive() {
        assert_eq!(accuracy(&[0.5, 0.49, 0.9, 0.1], &[true, false, false, false], 0.5).unwrap(), 0.75);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn tau_b_worked_examples() {
        // 10 pairs: 8 concordant, 2 discordant
        let t = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert!((t - 0.4).abs() < 1e-15, "{t}");
        // with ties: x = [1,1,2,3], y = [1,2,2,3]
        // pairs: (0,1) tie x; (0,2) C; (0,3) C; (1,2) tie y; (1,3) C; (2,3) C
        // C=4, D=0, n0 = 5, n1 = 5 → 4/5
        let t = kendall_tau_b(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((t - 0.8).abs() < 1e-15, "{t}");
        assert!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_sd_uses_sample_deviation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            v in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let fast = roc_auc(&scores, &pos).unwrap();
            prop_assert!((fast - pairwise_auc(&scores, &pos)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&fast));
            // flipping the scores mirrors the AUC
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&neg, &pos).unwrap() - (1.0 - fast)).abs() < 1e-12);
        }

        #[test]
        fn tau_b_symmetry_and_bounds(v in prop::collection::vec((0u8..5, 0u8..5), 3..30)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            if let Ok(t) = kendall_tau_b(&x, &y) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
                prop_assert!((kendall_tau_b(&y, &x).unwrap() - t).abs() < 1e-12);
                let neg: Vec<f64> = y.iter().map(|s| -s).collect();
                prop_assert!((kendall_tau_b(&x, &neg).unwrap() + t).abs() < 1e-12);
                // a monotone transform of x changes nothing
                let cubed: Vec<f64> = x.iter().map(|s| s * s * s + 2.0).collect();
                prop_assert!((kendall_tau_b(&cubed, &y).unwrap() - t).abs() < 1e-12);
            }
            if let Ok(t) = kendall_tau_b(&x, &x) {
                prop_assert!((t - 1.0).abs() < 1e-12);
            }
        }
    }
}
