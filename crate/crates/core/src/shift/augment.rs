use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::{Rng, Tensor2D};

fn check_strength(strength: f64) -> Result<()> {
    if (0.0..1.0).contains(&strength) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("jitter strength {strength} outside [0, 1)")))
    }
}

/// Random per-channel affine color perturbation:
/// `c' = clamp(α_c·c + β_c)`, `α_c ~ U[1−s, 1+s]`, `β_c ~ U[−s·255/4, s·255/4]`.
pub fn color_jitter(img: &RgbImage, rng: &mut Rng, strength: f64) -> Result<RgbImage> {
    check_strength(strength)?;
    img.check_range()?;
    let shift = strength * 255.0 / 4.0;
    let alpha: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(1.0 - strength, 1.0 + strength));
    let beta: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-shift, shift));
    Ok(img.map_pixels(|p| std::array::from_fn(|c| (alpha[c] * p[c] + beta[c]).clamp(0.0, 255.0))))
}

/// Feature-space color jitter: each row (one patch) gets its own per-column
/// affine perturbation, `α ~ U[1−s, 1+s]`, `β ~ U[−s/4, s/4]` (features are
/// on a unit scale where pixels were on 255).
pub fn jitter_features(x: &Tensor2D, rng: &mut Rng, strength: f64) -> Result<Tensor2D> {
    check_strength(strength)?;
    let mut out = x.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    let shift = strength / 4.0;
    for r in 0..out.rows() {
        for v in out.row_mut(r) {
            let a = rng.uniform_range(1.0 - strength, 1.0 + strength);
            let b = rng.uniform_range(-shift, shift);
            *v = a * *v + b;
        }
    }
    Ok(out)
}

/// Per-column mean and standard deviation of a feature set, the feature-space
/// analogue of a slide's stain statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureMoments {
    pub fn of(x: &Tensor2D) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::Dimension("feature moments need at least 2 rows".into()));
        }
        let mean = x.col_mean()?.into_vec();
        let n = x.rows() as f64;
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((v, m), s) in x.row(r).iter().zip(&mean).zip(var.iter_mut()) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / (n - 1.0)).sqrt()).collect();
        Ok(FeatureMoments { mean, std })
    }

    /// Re-expresses `row` (drawn from `self`) in the moments of `target`.
    /// Columns with zero spread are shifted only.
    pub fn transfer_row(&self, row: &mut [f64], target: &FeatureMoments) {
        for (j, v) in row.iter_mut().enumerate() {
            let scale = if self.std[j] > 1e-12 { target.std[j] / self.std[j] } else { 1.0 };
            *v = (*v - self.mean[j]) * scale + target.mean[j];
        }
    }
}
