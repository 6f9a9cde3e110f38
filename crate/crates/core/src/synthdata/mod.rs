//! Synthetic stand-in for slide (weak) and tissue-microarray (strong) data.
//!
//! Instances are Gaussian feature vectors conditioned on a Gleason pattern.
//! Weak bags draw a primary and secondary pattern, fill their instances at
//! fixed proportions and hand the bag's binary label to every instance, so a
//! 3+4 bag labelled low always contains pattern-4 instances whose true label
//! is high. Strong instances carry their own pattern's label but live behind
//! an affine covariate shift.

mod io;
mod patches;

pub use io::{export_csv, load_dataset, save_dataset, Dataset, DATASET_FORMAT, DATASET_VERSION};
pub use patches::{
    blue_ratio, blue_ratio_pixel, mean_blue_ratio, render_synthetic_patch, select_top_patches, ImageProjector,
    StainParams,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Benign,
    #[serde(rename = "3")]
    G3,
    #[serde(rename = "4")]
    G4,
    #[serde(rename = "5")]
    G5,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Benign, Pattern::G3, Pattern::G4, Pattern::G5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_grade(g: u8) -> Result<Pattern> {
        match g {
            3 => Ok(Pattern::G3),
            4 => Ok(Pattern::G4),
            5 => Ok(Pattern::G5),
            _ => Err(Error::Parameter(format!("Gleason pattern {g} outside 3..=5"))),
        }
    }

    /// Patch-level binary truth: high iff pattern 4 or 5.
    pub fn binary(self) -> BinaryLabel {
        match self {
            Pattern::G4 | Pattern::G5 => BinaryLabel::High,
            Pattern::Benign | Pattern::G3 => BinaryLabel::Low,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Benign => "benign",
            Pattern::G3 => "3",
            Pattern::G4 => "4",
            Pattern::G5 => "5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Low,
    High,
}

impl BinaryLabel {
    pub fn class_index(self) -> usize {
        match self {
            BinaryLabel::Low => 0,
            BinaryLabel::High => 1,
        }
    }

    pub fn from_class(k: usize) -> BinaryLabel {
        if k == 0 {
            BinaryLabel::Low
        } else {
            BinaryLabel::High
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Low => "low",
            BinaryLabel::High => "high",
        }
    }
}

/// Clinical grouping used for ranking: ≤6, 7=3+4, 7=4+3, 8, 9–10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GleasonGroup {
    #[serde(rename = "<=6")]
    AtMost6,
    #[serde(rename = "7=3+4")]
    Seven34,
    #[serde(rename = "7=4+3")]
    Seven43,
    #[serde(rename = "8")]
    Eight,
    #[serde(rename = "9-10")]
    NineTen,
}

impl GleasonGroup {
    pub const ALL: [GleasonGroup; 5] = [
        GleasonGroup::AtMost6,
        GleasonGroup::Seven34,
        GleasonGroup::Seven43,
        GleasonGroup::Eight,
        GleasonGroup::NineTen,
    ];

    pub fn of(primary: u8, secondary: u8) -> GleasonGroup {
        match (primary + secondary, primary) {
            (..=6, _) => GleasonGroup::AtMost6,
            (7, 3) => GleasonGroup::Seven34,
            (7, _) => GleasonGroup::Seven43,
            (8, _) => GleasonGroup::Eight,
            _ => GleasonGroup::NineTen,
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            GleasonGroup::AtMost6 => "<=6",
            GleasonGroup::Seven34 => "7=3+4",
            GleasonGroup::Seven43 => "7=4+3",
            GleasonGroup::Eight => "8",
            GleasonGroup::NineTen => "9-10",
        }
    }
}

/// Binary slide label from a Gleason score: low iff score ≤ 7.
pub fn weak_label_for_score(score: u8) -> BinaryLabel {
    if score <= 7 {
        BinaryLabel::Low
    } else {
        BinaryLabel::High
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    pub true_pattern: Pattern,
    pub strong_label: Option<BinaryLabel>,
    pub weak_label: Option<BinaryLabel>,
    pub bag_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: u64,
    pub instances: Vec<Instance>,
    pub primary_pattern: u8,
    pub secondary_pattern: u8,
    pub gleason_score: u8,
    pub gleason_group: GleasonGroup,
    pub weak_label: BinaryLabel,
}

impl Bag {
    /// Checks the score / label / group / membership invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Format(format!("bag {}: {m}", self.bag_id)));
        for p in [self.primary_pattern, self.secondary_pattern] {
            if !(3..=5).contains(&p) {
                return fail(format!("pattern {p} outside 3..=5"));
            }
        }
        if self.gleason_score != self.primary_pattern + self.secondary_pattern {
            return fail(format!("score {} is not the pattern sum", self.gleason_score));
        }
        if self.weak_label != weak_label_for_score(self.gleason_score) {
            return fail("weak label disagrees with score".into());
        }
        if self.gleason_group != GleasonGroup::of(self.primary_pattern, self.secondary_pattern) {
            return fail("group disagrees with patterns".into());
        }
        for inst in &self.instances {
            if inst.weak_label != Some(self.weak_label) || inst.bag_id != Some(self.bag_id) || inst.strong_label.is_some() {
                return fail("member instance labels disagree with bag".into());
            }
        }
        Ok(())
    }

    pub fn feature_matrix(&self) -> Result<Tensor2D> {
        Tensor2D::from_rows(&self.instances.iter().map(|i| i.features.as_slice()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_bags: usize,
    pub instances_per_bag: usize,
    #[serde(default = "default_n_strong")]
    pub n_strong: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_primary")]
    pub primary_fraction: f64,
    #[serde(default = "default_benign")]
    pub benign_fraction: f64,
    /// Relative frequency of the five Gleason groups among weak bags.
    #[serde(default = "default_group_weights")]
    pub group_weights: [f64; 5],
    /// Relative frequency of benign / 3 / 4 / 5 among strong instances.
    #[serde(default = "default_strong_weights")]
    pub strong_pattern_weights: [f64; 4],
    /// Distance between consecutive pattern means along the first feature axis.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_std")]
    pub pattern_std: f64,
    /// Explicit per-pattern means (benign, 3, 4, 5); overrides `separation`.
    #[serde(default)]
    pub pattern_means: Option<Vec<Vec<f64>>>,
    /// Per-bag random offset shared by all its instances (slide effect).
    #[serde(default = "default_bag_offset")]
    pub bag_offset_std: f64,
    /// Affine map x ↦ A·x + b applied to strong features; defaults when absent.
    #[serde(default)]
    pub shift_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub shift_offset: Option<Vec<f64>>,
    pub seed: u64,
}

fn default_n_strong() -> usize {
    1000
}
fn default_input_dim() -> usize {
    8
}
fn default_primary() -> f64 {
    0.6
}
fn default_benign() -> f64 {
    0.1
}
/// Case counts per group in the weakly-labelled cohort: 44, 125, 92, 65, 121.
fn default_group_weights() -> [f64; 5] {
    [44.0, 125.0, 92.0, 65.0, 121.0]
}
fn default_strong_weights() -> [f64; 4] {
    [0.2, 0.35, 0.25, 0.2]
}
fn default_separation() -> f64 {
    1.5
}
fn default_std() -> f64 {
    1.0
}
fn default_bag_offset() -> f64 {
    0.25
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_bags: 150,
            instances_per_bag: 40,
            n_strong: default_n_strong(),
            input_dim: default_input_dim(),
            primary_fraction: default_primary(),
            benign_fraction: default_benign(),
            group_weights: default_group_weights(),
            strong_pattern_weights: default_strong_weights(),
            separation: default_separation(),
            pattern_std: default_std(),
            pattern_means: None,
            bag_offset_std: default_bag_offset(),
            shift_matrix: None,
            shift_offset: None,
            seed: 0,
        }
    }
}

const WEAK_STREAM_BASE: u64 = 1 << 32;
const STRONG_STREAM: u64 = 7;

impl GenConfig {
    pub fn with_identity_shift(mut self) -> Self {
        self.shift_matrix = Some(
            (0..self.input_dim)
                .map(|i| (0..self.input_dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        );
        self.shift_offset = Some(vec![0.0; self.input_dim]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim;
        if d == 0 {
            return Err(Error::Config("gen.input_dim must be >= 1".into()));
        }
        if self.n_bags == 0 || self.instances_per_bag == 0 {
            return Err(Error::Config("gen.n_bags and gen.instances_per_bag must be >= 1".into()));
        }
        for (name, f) in [("primary_fraction", self.primary_fraction), ("benign_fraction", self.benign_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("gen.{name} must be in [0, 1], got {f}")));
            }
        }
        if self.primary_fraction + self.benign_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "gen.primary_fraction + gen.benign_fraction = {} exceeds 1",
                self.primary_fraction + self.benign_fraction
            )));
        }
        check_weights("gen.group_weights", &self.group_weights)?;
        check_weights("gen.strong_pattern_weights", &self.strong_pattern_weights)?;
        if !(self.pattern_std > 0.0) {
            return Err(Error::Config("gen.pattern_std must be > 0".into()));
        }
        if !(self.bag_offset_std >= 0.0) {
            return Err(Error::Config("gen.bag_offset_std must be >= 0".into()));
        }
        if let Some(m) = &self.pattern_means {
            if m.len() != 4 || m.iter().any(|r| r.len() != d) {
                return Err(Error::Config(format!("gen.pattern_means must be 4 rows of length {d}")));
            }
        }
        let (a, b) = self.resolved_shift();
        if a.len() != d || a.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("gen.shift_matrix must be {d}x{d}")));
        }
        if b.len() != d {
            return Err(Error::Config(format!("gen.shift_offset must have length {d}")));
        }
        let det = DMatrix::from_fn(d, d, |i, j| a[i][j]).determinant();
        if !(det.abs() > 1e-10) {
            return Err(Error::Config(format!("gen.shift_matrix is not invertible (det {det})")));
        }
        Ok(())
    }

    /// Per-pattern means (benign, 3, 4, 5). By default patterns sit on the
    /// first axis at −1, 0, 1, 2 separations; benign also moves along the
    /// second axis so it is not a mere extrapolation of pattern 3.
    pub fn resolved_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.pattern_means {
            return m.clone();
        }
        let d = self.input_dim;
        Pattern::ALL
            .iter()
            .map(|&p| {
                let mut m = vec![0.0; d];
                m[0] = self.separation * (p.index() as f64 - 1.0);
                if d > 1 && p == Pattern::Benign {
                    m[1] = self.separation;
                }
                m
            })
            .collect()
    }

    /// Default shift: per-axis scale alternating 1.3 / 0.8, a rotation mixing
    /// the first two axes by 20°, and a 0.5 offset on every axis.
    pub fn resolved_shift(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.input_dim;
        let a = self.shift_matrix.clone().unwrap_or_else(|| {
            let mut a: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| if i == j { if i % 2 == 0 { 1.3 } else { 0.8 } } else { 0.0 })
                        .collect()
                })
                .collect();
            if d > 1 {
                let (s, c) = 20f64.to_radians().sin_cos();
                let (a00, a11) = (a[0][0], a[1][1]);
                a[0][0] = c * a00;
                a[0][1] = -s * a11;
                a[1][0] = s * a00;
                a[1][1] = c * a11;
            }
            a
        });
        let b = self.shift_offset.clone().unwrap_or_else(|| vec![0.5; d]);
        (a, b)
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("{name} must be nonnegative with a positive sum")));
    }
    Ok(())
}

fn sample_categorical(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// (primary, secondary) for a group; scores 8 and 9–10 pick uniformly among
/// their pattern pairs.
fn sample_patterns(rng: &mut Rng, group: GleasonGroup) -> (u8, u8) {
    match group {
        GleasonGroup::AtMost6 => (3, 3),
        GleasonGroup::Seven34 => (3, 4),
        GleasonGroup::Seven43 => (4, 3),
        GleasonGroup::Eight => [(4, 4), (3, 5), (5, 3)][rng.below(3)],
        GleasonGroup::NineTen => [(4, 5), (5, 4), (5, 5)][rng.below(3)],
    }
}

fn sample_features(rng: &mut Rng, mean: &[f64], std: f64, offset: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(offset)
        .map(|(m, o)| m + o + std * rng.standard_normal())
        .collect()
}

/// Instance counts (benign, primary, secondary) for a bag of `n`.
pub fn bag_composition(cfg: &GenConfig, n: usize) -> (usize, usize, usize) {
    let n_benign = ((cfg.benign_fraction * n as f64).round() as usize).min(n);
    let n_primary = ((cfg.primary_fraction * n as f64).round() as usize).min(n - n_benign);
    (n_benign, n_primary, n - n_benign - n_primary)
}

pub fn generate_bag(cfg: &GenConfig, index: usize) -> Result<Bag> {
    let mut rng = Rng::with_stream(cfg.seed, WEAK_STREAM_BASE + index as u64);
    let group = GleasonGroup::ALL[sample_categorical(&mut rng, &cfg.group_weights)];
    let (primary, secondary) = sample_patterns(&mut rng, group);
    let score = primary + secondary;
    let weak = weak_label_for_score(score);
    let bag_id = index as u64;
    let means = cfg.resolved_means();
    let offset: Vec<f64> = (0..cfg.input_dim).map(|_| cfg.bag_offset_std * rng.standard_normal()).collect();

    let (n_benign, n_primary, n_secondary) = bag_composition(cfg, cfg.instances_per_bag);
    let mut patterns = Vec::with_capacity(cfg.instances_per_bag);
    patterns.extend(std::iter::repeat(Pattern::Benign).take(n_benign));
    patterns.extend(std::iter::repeat(Pattern::from_grade(primary)?).take(n_primary));
    patterns.extend(std::iter::repeat(Pattern::from_grade(secondary)?).take(n_secondary));
    rng.shuffle(&mut patterns);

    let instances = patterns
        .into_iter()
        .map(|p| Instance {
            features: sample_features(&mut rng, &means[p.index()], cfg.pattern_std, &offset),
            true_pattern: p,
            strong_label: None,
            weak_label: Some(weak),
            bag_id: Some(bag_id),
        })
        .collect();
    Ok(Bag {
        bag_id,
        instances,
        primary_pattern: primary,
        secondary_pattern: secondary,
        gleason_score: score,
        gleason_group: group,
        weak_label: weak,
    })
}

pub fn generate_weak_dataset(cfg: &GenConfig) -> Result<Vec<Bag>> {
    cfg.validate()?;
    (0..cfg.n_bags).map(|i| generate_bag(cfg, i)).collect()
}

pub fn generate_strong_dataset(cfg: &GenConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.seed, STRONG_STREAM);
    let means = cfg.resolved_means();
    let (a, b) = cfg.resolved_shift();
    let zero = vec![0.0; cfg.input_dim];
    (0..cfg.n_strong)
        .map(|_| {
            let p = Pattern::ALL[sample_categorical(&mut rng, &cfg.strong_pattern_weights)];
            let x = sample_features(&mut rng, &means[p.index()], cfg.pattern_std, &zero);
            let features = a
                .iter()
                .zip(&b)
                .map(|(row, bi)| row.iter().zip(&x).map(|(r, v)| r * v).sum::<f64>() + bi)
                .collect();
            Ok(Instance {
                features,
                true_pattern: p,
                strong_label: Some(p.binary()),
                weak_label: None,
                bag_id: None,
            })
        })
        .collect()
}
