use crate::error::{Error, Result};
use crate::model::{cross_entropy, Dense};
use crate::numerics::Tensor2D;

/// A scalar penalty with its gradients w.r.t. the source and target features.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOutput {
    pub value: f64,
    pub d_source: Tensor2D,
    pub d_target: Tensor2D,
}

fn check_dims(fs: &Tensor2D, ft: &Tensor2D) -> Result<()> {
    if fs.cols() != ft.cols() {
        return Err(Error::Dimension(format!(
            "source features have {} columns, target {}",
            fs.cols(),
            ft.cols()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median Euclidean distance over all distinct pairs of the pooled rows;
/// 1.0 when that median is zero.
pub fn median_bandwidth(fs: &Tensor2D, ft: &Tensor2D) -> Result<f64> {
    check_dims(fs, ft)?;
    let rows: Vec<&[f64]> = (0..fs.rows()).map(|r| fs.row(r)).chain((0..ft.rows()).map(|r| ft.row(r))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Accumulates Σ_j k(a_i, b_j) and Σ_j ∂k(a_i, b_j)/∂a_i for every row of `a`.
fn kernel_block(a: &Tensor2D, b: &Tensor2D, inv_two_sigma2: f64) -> (f64, Tensor2D) {
    let mut total = 0.0;
    let mut grad = Tensor2D::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let bj = b.row(j);
            let k = (-sq_dist(ai, bj) * inv_two_sigma2).exp();
            total += k;
            // ∂k/∂a = −k·(a − b)/σ²
            for (g, (x, y)) in grad.row_mut(i).iter_mut().zip(ai.iter().zip(bj)) {
                *g -= 2.0 * inv_two_sigma2 * k * (x - y);
            }
        }
    }
    (total, grad)
}

/// Biased (V-statistic) squared MMD with an RBF kernel of bandwidth `sigma`:
/// `mean k(s,s') + mean k(t,t') − 2·mean k(s,t)`. `sigma` is a constant for
/// differentiation.
pub fn mmd2(fs: &Tensor2D, ft: &Tensor2D, sigma: f64) -> Result<PenaltyOutput> {
    check_dims(fs, ft)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("MMD bandwidth must be > 0, got {sigma}")));
    }
    if fs.rows() == 0 || ft.rows() == 0 {
        return Err(Error::Dimension("MMD needs nonempty feature sets".into()));
    }
    let c = 1.0 / (2.0 * sigma * sigma);
    let (n, m) = (fs.rows() as f64, ft.rows() as f64);
    let (kss, gss) = kernel_block(fs, fs, c);
    let (ktt, gtt) = kernel_block(ft, ft, c);
    let (kst, gst) = kernel_block(fs, ft, c);
    let (_, gts) = kernel_block(ft, fs, c);
    let value = kss / (n * n) + ktt / (m * m) - 2.0 * kst / (n * m);
    // each symmetric pair (i, j) appears twice in the ss / tt sums
    let d_source = gss.scale(2.0 / (n * n))?.sub(&gst.scale(2.0 / (n * m))?)?;
    let d_target = gtt.scale(2.0 / (m * m))?.sub(&gts.scale(2.0 / (n * m))?)?;
    Ok(PenaltyOutput {
        value,
        d_source,
        d_target,
    })
}

fn centered(x: &Tensor2D) -> Result<Tensor2D> {
    let mean = x.col_mean()?;
    x.add_row(&mean.scale(-1.0)?)
}

/// CORAL: `‖C_s − C_t‖²_F / (4d²)` with unbiased sample covariances.
pub fn coral(fs: &Tensor2D, ft: &Tensor2D) -> Result<PenaltyOutput> {
    check_dims(fs, ft)?;
    if fs.rows() < 2 || ft.rows() < 2 {
        return Err(Error::Dimension(format!(
            "CORAL needs >= 2 rows per batch, got {} and {}",
            fs.rows(),
            ft.rows()
        )));
    }
    let d = fs.cols() as f64;
    let (xs, xt) = (centered(fs)?, centered(ft)?);
    let (ns, nt) = (fs.rows() as f64, ft.rows() as f64);
    let cs = xs.transpose().matmul(&xs)?.scale(1.0 / (ns - 1.0))?;
    let ct = xt.transpose().matmul(&xt)?.scale(1.0 / (nt - 1.0))?;
    let diff = cs.sub(&ct)?;
    let value = diff.frobenius_sq() / (4.0 * d * d);
    // ∂/∂X_s = Xc_s·(C_s − C_t) / (d²(n_s − 1)); centering is absorbed since
    // the columns of Xc sum to zero.
    let d_source = xs.matmul(&diff)?.scale(1.0 / (d * d * (ns - 1.0)))?;
    let d_target = xt.matmul(&diff)?.scale(-1.0 / (d * d * (nt - 1.0)))?;
    Ok(PenaltyOutput {
        value,
        d_source,
        d_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutput {
    pub domain_loss: f64,
    /// Gradient reaching the features, already reversed and scaled.
    pub feature_grads: Tensor2D,
    pub head_grads: Dense,
    /// Fraction of rows the domain head classifies correctly.
    pub domain_accuracy: f64,
}

/// Two-class domain classifier on `features`: mean cross-entropy, ordinary
/// head gradients and the (non-reversed) gradient w.r.t. the features.
pub fn domain_classifier_loss(
    features: &Tensor2D,
    domains: &[Domain],
    head: &Dense,
) -> Result<(f64, Tensor2D, Dense, f64)> {
    if domains.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} domain labels for {} feature rows",
            domains.len(),
            features.rows()
        )));
    }
    if head.weight.shape() != (features.cols(), 2) {
        return Err(Error::Dimension(format!(
            "domain head weight {:?} for {} features",
            head.weight.shape(),
            features.cols()
        )));
    }
    let probs = head.apply(features)?.softmax_rows()?;
    let labels: Vec<usize> = domains.iter().map(|d| d.index()).collect();
    let (loss, dlogits) = cross_entropy(&probs, &labels, &vec![1.0; labels.len()])?;
    let head_grads = Dense {
        weight: features.transpose().matmul(&dlogits)?,
        bias: dlogits.col_sum(),
    };
    let d_features = dlogits.matmul(&head.weight.transpose())?;
    let correct = (0..probs.rows())
        .filter(|&r| (probs.get(r, 1) > probs.get(r, 0)) == (labels[r] == 1))
        .count();
    Ok((loss, d_features, head_grads, correct as f64 / probs.rows().max(1) as f64))
}

/// Backward of the gradient-reversal layer: identity forward, `−λ·g` backward.
pub fn reverse_gradient(g: &Tensor2D, grl_lambda: f64) -> Result<Tensor2D> {
    g.scale(-grl_lambda)
}

pub fn adversarial_penalty(
    features: &Tensor2D,
    domains: &[Domain],
    head: &Dense,
    grl_lambda: f64,
) -> Result<AdversarialOutput> {
    let (domain_loss, d_features, head_grads, domain_accuracy) = domain_classifier_loss(features, domains, head)?;
    Ok(AdversarialOutput {
        domain_loss,
        feature_grads: reverse_gradient(&d_features, grl_lambda)?,
        head_grads,
        domain_accuracy,
    })
}
