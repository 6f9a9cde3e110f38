//! Patch prioritization on synthetic H&E-like rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::numerics::{Rng, Tensor2D};

/// Blue Ratio of one pixel: `(100·B / (1+R+G)) · (256 / (1+R+G+B))`.
pub fn blue_ratio_pixel([r, g, b]: [f64; 3]) -> f64 {
    (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))
}

/// Per-pixel Blue Ratio map, row-major H×W.
pub fn blue_ratio(img: &RgbImage) -> Result<Tensor2D> {
    img.check_range()?;
    Tensor2D::from_vec(img.height(), img.width(), img.pixels().map(blue_ratio_pixel).collect())
}

/// Patch score: mean Blue Ratio over its pixels (0 for an empty patch).
pub fn mean_blue_ratio(img: &RgbImage) -> Result<f64> {
    img.check_range()?;
    if img.is_empty() {
        return Ok(0.0);
    }
    Ok(img.pixels().map(blue_ratio_pixel).sum::<f64>() / img.num_pixels() as f64)
}

/// Indices of the `n` patches with the highest mean Blue Ratio, best first;
/// ties go to the lower index. Returns every index when `n` exceeds the count.
pub fn select_top_patches(patches: &[RgbImage], n: usize) -> Result<Vec<usize>> {
    if patches.is_empty() {
        return Err(Error::Parameter("no patches to select from".into()));
    }
    if n == 0 {
        return Err(Error::Parameter("top-patch count must be >= 1".into()));
    }
    let scores = patches.iter().map(mean_blue_ratio).collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..patches.len()).collect();
    // stable sort keeps ascending index order among equal scores
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n);
    Ok(idx)
}

/// Optical-density colors and layout of a rendered patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    /// Unit OD vector of the nuclear (hematoxylin-like) stain.
    pub hematoxylin: [f64; 3],
    /// Unit OD vector of the cytoplasm (eosin-like) stain.
    pub eosin: [f64; 3],
    pub background_hematoxylin: f64,
    pub background_eosin: f64,
    /// Peak hematoxylin concentration at a nucleus center.
    pub nucleus_concentration: f64,
    pub nucleus_radius: f64,
    pub size: usize,
    /// Nuclei count at density 1.
    pub max_nuclei: usize,
}

impl Default for StainParams {
    fn default() -> Self {
        let unit = |v: [f64; 3]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.map(|x| x / n)
        };
        StainParams {
            hematoxylin: unit([0.65, 0.70, 0.29]),
            eosin: unit([0.07, 0.99, 0.11]),
            background_hematoxylin: 0.05,
            background_eosin: 0.6,
            nucleus_concentration: 1.2,
            nucleus_radius: 2.0,
            size: 32,
            max_nuclei: 40,
        }
    }
}

/// Tissue-toned background with Gaussian "nuclei" in the hematoxylin color;
/// nuclei count is `round(density · max_nuclei)`. Blob positions are drawn in
/// a fixed order, so for one seed a denser patch contains every nucleus of a
/// sparser one.
pub fn render_synthetic_patch(rng: &mut Rng, density: f64, stain: &StainParams) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Parameter(format!("nuclei density {density} outside [0, 1]")));
    }
    let size = stain.size;
    let mut rng = rng.fork(0);
    let count = (density * stain.max_nuclei as f64).round() as usize;
    let centers: Vec<(f64, f64)> = (0..stain.max_nuclei)
        .map(|_| (rng.uniform() * size as f64, rng.uniform() * size as f64))
        .collect();
    let mut hema = vec![stain.background_hematoxylin; size * size];
    let inv = 1.0 / (2.0 * stain.nucleus_radius * stain.nucleus_radius);
    for &(cy, cx) in centers.iter().take(count) {
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                hema[y * size + x] += stain.nucleus_concentration * (-d2 * inv).exp();
            }
        }
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for h in hema {
        for c in 0..3 {
            let od = h * stain.hematoxylin[c] + stain.background_eosin * stain.eosin[c];
            data.push((256.0 * (-od).exp() - 1.0).clamp(0.0, 255.0));
        }
    }
    RgbImage::from_vec(size, size, data)
}

/// Flatten-and-project adapter from image patches to classifier inputs:
/// pixels scaled to [0, 1], then a fixed random Gaussian projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjector {
    pub projection: Tensor2D,
}

impl ImageProjector {
    pub fn new(height: usize, width: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let n = height * width * 3;
        Ok(ImageProjector {
            projection: rng.normal(n, out_dim, 0.0, 1.0 / (n as f64).sqrt())?,
        })
    }

    pub fn project(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let flat = Tensor2D::from_vec(1, img.data().len(), img.data().iter().map(|v| v / 255.0).collect())?;
        Ok(flat.matmul(&self.projection)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_pixel_values() {
        assert_eq!(blue_ratio_pixel([0.0, 0.0, 0.0]), 0.0);
        assert_eq!(blue_ratio_pixel([0.0, 0.0, 255.0]), 25500.0);
        let white = blue_ratio_pixel([255.0; 3]);
        assert!((white - 16.67).abs() < 0.01, "{white}");
        assert!((white - (25500.0 / 511.0) * (256.0 / 766.0)).abs() < 1e-12);
    }

    #[test]
    fn map_shape_and_range_check() {
        let img = RgbImage::filled(3, 5, [10.0, 20.0, 200.0]);
        assert_eq!(blue_ratio(&img).unwrap().shape(), (3, 5));
        assert!(mean_blue_ratio(&RgbImage::filled(0, 0, [0.0; 3])).unwrap() == 0.0);
    }

    #[test]
    fn mean_is_pixel_permutation_invariant() {
        let mut rng = Rng::new(5);
        let img = render_synthetic_patch(&mut rng, 0.5, &StainParams::default()).unwrap();
        let mut pixels: Vec<[f64; 3]> = img.pixels().collect();
        Rng::new(9).shuffle(&mut pixels);
        let shuffled = RgbImage::from_vec(img.height(), img.width(), pixels.concat()).unwrap();
        let (a, b) = (mean_blue_ratio(&img).unwrap(), mean_blue_ratio(&shuffled).unwrap());
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn blob_patch_ranks_first() {
        let gray = RgbImage::filled(8, 8, [150.0; 3]);
        let mut blob = gray.clone();
        for y in 2..6 {
            for x in 2..6 {
                blob.set_pixel(y, x, [60.0, 40.0, 200.0]);
            }
        }
        let patches = vec![gray.clone(), gray.clone(), blob, gray];
        assert_eq!(select_top_patches(&patches, 1).unwrap(), vec![2]);
        // n beyond the count returns everything, ties in index order
        assert_eq!(select_top_patches(&patches, 10).unwrap(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn top_patches_match_full_sort_oracle() {
        let mut rng = Rng::new(77);
        let stain = StainParams::default();
        let patches: Vec<RgbImage> = (0..20)
            .map(|_| {
                let d = rng.uniform();
                render_synthetic_patch(&mut rng, d, &stain).unwrap()
            })
            .collect();
        let mut scored: Vec<(f64, usize)> = patches.iter().map(|p| mean_blue_ratio(p).unwrap()).zip(0..).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = scored.iter().take(5).map(|s| s.1).collect();
        assert_eq!(select_top_patches(&patches, 5).unwrap(), oracle);
    }

    #[test]
    fn selection_errors() {
        assert!(select_top_patches(&[], 3).is_err());
        assert!(select_top_patches(&[RgbImage::filled(1, 1, [0.0; 3])], 0).is_err());
    }

    #[test]
    fn rendering_density_behaviour() {
        let stain = StainParams::default();
        let render = |d| render_synthetic_patch(&mut Rng::new(13), d, &stain).unwrap();
        let scores: Vec<f64> = [0.0, 0.3, 0.7].iter().map(|&d| mean_blue_ratio(&render(d)).unwrap()).collect();
        assert!(scores[0] < scores[1] && scores[1] < scores[2], "{scores:?}");
        assert_eq!(render(0.4), render(0.4));
        // density 0: uniform background, no blobs
        let empty = render(0.0);
        let first = empty.pixel(0, 0);
        assert!(empty.pixels().all(|p| p == first));
        assert!(render_synthetic_patch(&mut Rng::new(1), 1.5, &stain).is_err());
    }

    #[test]
    fn projector_output_width() {
        let mut rng = Rng::new(2);
        let proj = ImageProjector::new(32, 32, 8, &mut rng).unwrap();
        let img = render_synthetic_patch(&mut rng, 0.5, &StainParams::default()).unwrap();
        assert_eq!(proj.project(&img).unwrap().len(), 8);
    }
}
