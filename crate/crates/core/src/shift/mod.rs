//! Covariate-shift reduction: image augmentations (color jitter, stain
//! transfer), their feature-space counterparts used by the training loop, and
//! the domain-invariance penalties (MMD, CORAL, gradient reversal).
//!
//! Modes are incremental: each penalty mode also applies stain transfer, and
//! stain transfer also applies color jitter.

mod augment;
mod penalty;
mod stain;

pub use augment::{color_jitter, jitter_features, FeatureMoments};
pub use penalty::{
    adversarial_penalty, coral, domain_classifier_loss, median_bandwidth, mmd2, reverse_gradient, AdversarialOutput,
    Domain, PenaltyOutput,
};
pub use stain::{estimate_stain_stats, optical_density, stain_transfer, StainStats, StainTransfer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    None,
    ColorJitter,
    StainTransfer,
    Mmd,
    Coral,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "sigma")]
pub enum KernelBandwidth {
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    #[serde(default)]
    pub mode: ShiftMode,
    #[serde(default = "one")]
    pub penalty_weight: f64,
    #[serde(default)]
    pub kernel_bandwidth: KernelBandwidth,
    #[serde(default = "one")]
    pub grl_lambda: f64,
    /// Jitter strength s in [0, 1).
    #[serde(default = "default_jitter")]
    pub jitter_strength: f64,
}

fn one() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    0.1
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            mode: ShiftMode::None,
            penalty_weight: 1.0,
            kernel_bandwidth: KernelBandwidth::MedianHeuristic,
            grl_lambda: 1.0,
            jitter_strength: default_jitter(),
        }
    }
}

impl ShiftConfig {
    pub fn with_mode(mode: ShiftMode) -> Self {
        ShiftConfig {
            mode,
            ..ShiftConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_weight >= 0.0) || !self.penalty_weight.is_finite() {
            return Err(Error::Config(format!(
                "shift.penalty_weight must be >= 0, got {}",
                self.penalty_weight
            )));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "shift.jitter_strength must be in [0, 1), got {}",
                self.jitter_strength
            )));
        }
        if let KernelBandwidth::Fixed(s) = self.kernel_bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config(format!("shift.kernel_bandwidth sigma must be > 0, got {s}")));
            }
        }
        if !self.grl_lambda.is_finite() {
            return Err(Error::Config("shift.grl_lambda must be finite".into()));
        }
        Ok(())
    }

    pub fn uses_color_jitter(&self) -> bool {
        self.mode != ShiftMode::None
    }

    pub fn uses_stain_transfer(&self) -> bool {
        !matches!(self.mode, ShiftMode::None | ShiftMode::ColorJitter)
    }

    /// Whether the target (weak) batch features enter a penalty term.
    pub fn uses_penalty(&self) -> bool {
        matches!(self.mode, ShiftMode::Mmd | ShiftMode::Coral | ShiftMode::Adversarial)
    }

    pub fn needs_domain_head(&self) -> bool {
        self.mode == ShiftMode::Adversarial
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incremental_semantics() {
        let m = |mode| ShiftConfig::with_mode(mode);
        assert!(!m(ShiftMode::None).uses_color_jitter());
        assert!(m(ShiftMode::ColorJitter).uses_color_jitter());
        assert!(!m(ShiftMode::ColorJitter).uses_stain_transfer());
        for mode in [ShiftMode::StainTransfer, ShiftMode::Mmd, ShiftMode::Coral, ShiftMode::Adversarial] {
            assert!(m(mode).uses_color_jitter());
            assert!(m(mode).uses_stain_transfer());
        }
        assert!(!m(ShiftMode::StainTransfer).uses_penalty());
        assert!(m(ShiftMode::Coral).uses_penalty());
        assert!(m(ShiftMode::Adversarial).needs_domain_head());
    }

    #[test]
    fn validation() {
        let mut c = ShiftConfig::default();
        c.penalty_weight = -1.0;
        assert!(c.validate().is_err());
        let mut c = ShiftConfig::default();
        c.jitter_strength = 1.0;
        assert!(c.validate().is_err());
        let mut c = ShiftConfig::default();
        c.kernel_bandwidth = KernelBandwidth::Fixed(0.0);
        assert!(c.validate().is_err());
        assert!(ShiftConfig::default().validate().is_ok());
    }
}
