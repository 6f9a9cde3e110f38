//! Stain color transfer in optical-density space.
//!
//! Each image gets a two-stain basis from the leading eigenvectors of its OD
//! covariance, with the stain directions picked at the 1st/99th percentile
//! angles of the OD cloud projected onto that plane. A third, residual
//! direction (the cross product) completes the basis so every pixel
//! decomposes exactly; only the two stain concentrations are rescaled to the
//! target's 99th percentiles before recomposing with the target basis.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Pixels whose OD falls below this in every channel are treated as background.
const OD_THRESHOLD: f64 = 0.15;
const MIN_TISSUE_PIXELS: usize = 16;
/// Second eigenvalue (relative to the first) below which the OD cloud is
/// considered rank deficient.
const RANK_TOL: f64 = 1e-8;

/// OD = −ln((I + 1) / 256) per channel.
pub fn optical_density(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| -((v + 1.0) / 256.0).ln())
}

fn from_optical_density(od: [f64; 3]) -> [f64; 3] {
    od.map(|d| (256.0 * (-d).exp() - 1.0).clamp(0.0, 255.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainStats {
    pub od_mean: [f64; 3],
    /// Unit-norm stain vectors, hematoxylin-like (larger red OD) first.
    pub basis: [[f64; 3]; 2],
    /// 1st and 99th percentile of each stain concentration.
    pub conc_p1: [f64; 2],
    pub conc_p99: [f64; 2],
}

impl StainStats {
    fn full_basis(&self) -> Matrix3<f64> {
        let h = Vector3::from(self.basis[0]);
        let e = Vector3::from(self.basis[1]);
        let r = h.cross(&e).normalize();
        Matrix3::from_columns(&[h, e, r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainTransfer {
    pub image: RgbImage,
    /// Set when either image's OD covariance was rank deficient and the
    /// per-channel OD mean/std matching was used instead.
    pub fallback: bool,
    pub source: Option<StainStats>,
    pub target: Option<StainStats>,
}

/// Linear-interpolated percentile of an ascending slice, `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn orient_nonnegative(v: Vector3<f64>) -> Vector3<f64> {
    if v.sum() < 0.0 {
        -v
    } else {
        v
    }
}

/// Estimates the stain basis of an image, or `None` when the OD covariance of
/// its tissue pixels is rank deficient (fewer than two stain directions).
pub fn estimate_stain_stats(img: &RgbImage) -> Result<Option<StainStats>> {
    if img.is_empty() {
        return Err(Error::Parameter("stain estimation on an empty image".into()));
    }
    img.check_range()?;
    let tissue: Vec<Vector3<f64>> = img
        .pixels()
        .map(|p| Vector3::from(optical_density(p)))
        .filter(|od| od.iter().any(|&d| d > OD_THRESHOLD))
        .collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Ok(None);
    }
    let n = tissue.len() as f64;
    let mean = tissue.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for od in &tissue {
        let d = od - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 1e-12) || l2 <= RANK_TOL * l1 {
        return Ok(None);
    }
    let e1 = orient_nonnegative(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = orient_nonnegative(eig.eigenvectors.column(order[1]).into_owned());

    let mut angles: Vec<f64> = tissue.iter().map(|od| od.dot(&e2).atan2(od.dot(&e1))).collect();
    angles.sort_by(f64::total_cmp);
    let (a_lo, a_hi) = (percentile(&angles, 1.0), percentile(&angles, 99.0));
    let v_lo = orient_nonnegative((e1 * a_lo.cos() + e2 * a_lo.sin()).normalize());
    let v_hi = orient_nonnegative((e1 * a_hi.cos() + e2 * a_hi.sin()).normalize());
    let (h, e) = if v_lo[0] > v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
    if h.cross(&e).norm() < 1e-9 {
        return Ok(None);
    }

    let mut stats = StainStats {
        od_mean: [mean[0], mean[1], mean[2]],
        basis: [[h[0], h[1], h[2]], [e[0], e[1], e[2]]],
        conc_p1: [0.0; 2],
        conc_p99: [0.0; 2],
    };
    let inv = stats
        .full_basis()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("stain basis is singular".into()))?;
    let mut conc: [Vec<f64>; 2] = [Vec::with_capacity(tissue.len()), Vec::with_capacity(tissue.len())];
    for od in &tissue {
        let c = inv * od;
        conc[0].push(c[0]);
        conc[1].push(c[1]);
    }
    for (k, c) in conc.iter_mut().enumerate() {
        c.sort_by(f64::total_cmp);
        stats.conc_p1[k] = percentile(c, 1.0);
        stats.conc_p99[k] = percentile(c, 99.0);
    }
    Ok(Some(stats))
}

fn channel_od_moments(img: &RgbImage) -> ([f64; 3], [f64; 3]) {
    let n = img.num_pixels() as f64;
    let mut mean = [0.0; 3];
    for p in img.pixels() {
        for (m, d) in mean.iter_mut().zip(optical_density(p)) {
            *m += d / n;
        }
    }
    let mut var = [0.0; 3];
    for p in img.pixels() {
        for ((v, d), m) in var.iter_mut().zip(optical_density(p)).zip(mean) {
            *v += (d - m).powi(2);
        }
    }
    let denom = (n - 1.0).max(1.0);
    (mean, var.map(|v| (v / denom).sqrt()))
}

fn fallback_transfer(src: &RgbImage, target: &RgbImage) -> RgbImage {
    let (ms, ss) = channel_od_moments(src);
    let (mt, st) = channel_od_moments(target);
    src.map_pixels(|p| {
        let od = optical_density(p);
        from_optical_density(std::array::from_fn(|c| {
            let scale = if ss[c] > 1e-12 { st[c] / ss[c] } else { 1.0 };
            (od[c] - ms[c]) * scale + mt[c]
        }))
    })
}

/// Transfers the stain colors of `target` onto `src`.
pub fn stain_transfer(src: &RgbImage, target: &RgbImage) -> Result<StainTransfer> {
    if src.is_empty() || target.is_empty() {
        return Err(Error::Parameter("stain transfer needs nonempty images".into()));
    }
    for (name, img) in [("source", src), ("target", target)] {
        if img.data().iter().all(|&v| v >= 255.0) {
            return Err(Error::Parameter(format!("{name} image is all white")));
        }
    }
    let (s_stats, t_stats) = (estimate_stain_stats(src)?, estimate_stain_stats(target)?);
    let (s, t) = match (s_stats, t_stats) {
        (Some(s), Some(t)) => (s, t),
        (s, t) => {
            return Ok(StainTransfer {
                image: fallback_transfer(src, target),
                fallback: true,
                source: s,
                target: t,
            })
        }
    };
    let inv_src = s
        .full_basis()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("source stain basis is singular".into()))?;
    let tgt_basis = t.full_basis();
    let scale: [f64; 2] = std::array::from_fn(|k| {
        if s.conc_p99[k].abs() > 1e-12 {
            t.conc_p99[k] / s.conc_p99[k]
        } else {
            1.0
        }
    });
    let image = src.map_pixels(|p| {
        let mut c = inv_src * Vector3::from(optical_density(p));
        c[0] *= scale[0];
        c[1] *= scale[1];
        let od = tgt_basis * c;
        from_optical_density([od[0], od[1], od[2]])
    });
    Ok(StainTransfer {
        image,
        fallback: false,
        source: Some(s),
        target: Some(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    }

    /// Image composed from two known stain vectors: a third of the pixels pure
    /// stain A, a third pure stain B, the rest mixtures.
    fn two_stain_image(a: [f64; 3], b: [f64; 3], seed: u64) -> RgbImage {
        let mut rng = Rng::new(seed);
        let mut img = RgbImage::filled(40, 40, [0.0; 3]);
        for y in 0..40 {
            for x in 0..40 {
                let kind = rng.below(3);
                let ca = if kind == 1 { 0.0 } else { rng.uniform_range(0.3, 1.5) };
                let cb = if kind == 0 { 0.0 } else { rng.uniform_range(0.3, 1.5) };
                let od = std::array::from_fn(|c| ca * a[c] + cb * b[c]);
                img.set_pixel(y, x, from_optical_density(od));
            }
        }
        img
    }

    fn angle_deg(u: [f64; 3], v: [f64; 3]) -> f64 {
        let d: f64 = (0..3).map(|i| u[i] * v[i]).sum();
        d.clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn od_of_white_is_zero_and_round_trips() {
        assert_eq!(optical_density([255.0; 3]), [0.0; 3]);
        let p = [12.0, 200.5, 77.0];
        let back = from_optical_density(optical_density(p));
        for c in 0..3 {
            assert!((back[c] - p[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn recovers_known_stain_basis() {
        let h = unit([0.65, 0.70, 0.29]);
        let e = unit([0.07, 0.99, 0.11]);
        let img = two_stain_image(h, e, 17);
        let stats = estimate_stain_stats(&img).unwrap().expect("two stains present");
        assert!(angle_deg(stats.basis[0], h) < 3.0, "{:?}", stats.basis);
        assert!(angle_deg(stats.basis[1], e) < 3.0, "{:?}", stats.basis);
        for v in stats.basis {
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(v.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn self_transfer_is_identity_within_one_level() {
        let img = two_stain_image(unit([0.65, 0.70, 0.29]), unit([0.07, 0.99, 0.11]), 4);
        let out = stain_transfer(&img, &img).unwrap();
        assert!(!out.fallback);
        for (a, b) in out.image.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0);
        }
    }

    #[test]
    fn transfer_moves_source_towards_target_colors() {
        let src = two_stain_image(unit([0.65, 0.70, 0.29]), unit([0.07, 0.99, 0.11]), 1);
        let tgt = two_stain_image(unit([0.40, 0.80, 0.45]), unit([0.20, 0.90, 0.30]), 2);
        let out = stain_transfer(&src, &tgt).unwrap();
        assert!(!out.fallback);
        assert!(out.image.check_range().is_ok());
        let mean = |img: &RgbImage| {
            let mut m = [0.0; 3];
            for p in img.pixels() {
                for c in 0..3 {
                    m[c] += p[c] / img.num_pixels() as f64;
                }
            }
            m
        };
        let (ms, mt, mo) = (mean(&src), mean(&tgt), mean(&out.image));
        let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        assert!(dist(mo, mt) < dist(ms, mt));
    }

    #[test]
    fn uniform_gray_falls_back() {
        let gray = RgbImage::filled(8, 8, [128.0; 3]);
        let tgt = two_stain_image(unit([0.65, 0.70, 0.29]), unit([0.07, 0.99, 0.11]), 3);
        let out = stain_transfer(&gray, &tgt).unwrap();
        assert!(out.fallback);
        assert!(out.source.is_none());
        assert!(out.image.check_range().is_ok());
    }

    #[test]
    fn rejects_empty_and_white() {
        let white = RgbImage::filled(4, 4, [255.0; 3]);
        let gray = RgbImage::filled(4, 4, [100.0; 3]);
        assert!(stain_transfer(&white, &gray).is_err());
        assert!(stain_transfer(&gray, &white).is_err());
        assert!(stain_transfer(&RgbImage::filled(0, 0, [0.0; 3]), &gray).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert!((percentile(&v, 99.0) - 3.96).abs() < 1e-12);
    }
}
