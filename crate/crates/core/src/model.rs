//! Feed-forward classifier: ReLU hidden stack, affine class head, softmax.
//!
//! The last hidden activation is exposed as the feature layer that the
//! domain-adaptation penalties act on. Backpropagation is written out by hand
//! and checked against central finite differences by [`grad_check`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stable_ln, Rng, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "weakstrong-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub domain_head: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

fn default_classes() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 8,
            hidden_dims: default_hidden(),
            num_classes: default_classes(),
            domain_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be >= 1".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::Config(format!("model.hidden_dims[{i}] must be >= 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Width of the feature layer (input width when there are no hidden layers).
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// Affine layer `x·W + b` with `W` stored as (fan_in × fan_out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor2D,
    pub bias: Tensor2D,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Tensor2D::zeros(fan_in, fan_out),
            bias: Tensor2D::zeros(1, fan_out),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Dense {
            weight: rng.normal(fan_in, fan_out, 0.0, (2.0 / fan_in as f64).sqrt())?,
            bias: Tensor2D::zeros(1, fan_out),
        })
    }

    pub fn apply(&self, x: &Tensor2D) -> Result<Tensor2D> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    fn zeros_like(&self) -> Self {
        Dense::zeros(self.weight.rows(), self.weight.cols())
    }
}

/// Parameters θ: hidden stack, class head and the optional domain head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub hidden: Vec<Dense>,
    pub head: Dense,
    pub domain_head: Option<Dense>,
}

/// Same structure as [`ModelParams`], holding ∂loss/∂θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<Dense>,
    pub head: Dense,
    pub domain_head: Option<Dense>,
}

/// Canonical names of the parameter tensors, in iteration order.
fn tensor_names(n_hidden: usize, domain: bool) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..n_hidden {
        names.push(format!("hidden{i}.weight"));
        names.push(format!("hidden{i}.bias"));
    }
    names.push("head.weight".into());
    names.push("head.bias".into());
    if domain {
        names.push("domain_head.weight".into());
        names.push("domain_head.bias".into());
    }
    names
}

fn collect_tensors<'a>(hidden: &'a [Dense], head: &'a Dense, domain: Option<&'a Dense>) -> Vec<&'a Tensor2D> {
    hidden
        .iter()
        .chain(std::iter::once(head))
        .chain(domain)
        .flat_map(|d| [&d.weight, &d.bias])
        .collect()
}

fn collect_tensors_mut<'a>(
    hidden: &'a mut [Dense],
    head: &'a mut Dense,
    domain: Option<&'a mut Dense>,
) -> Vec<&'a mut Tensor2D> {
    hidden
        .iter_mut()
        .chain(std::iter::once(head))
        .chain(domain)
        .flat_map(|d| [&mut d.weight, &mut d.bias])
        .collect()
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        let mut fan_in = config.input_dim;
        for &h in &config.hidden_dims {
            hidden.push(Dense::he_init(fan_in, h, rng)?);
            fan_in = h;
        }
        let head = Dense::he_init(fan_in, config.num_classes, rng)?;
        let domain_head = if config.domain_head {
            Some(Dense::he_init(fan_in, 2, rng)?)
        } else {
            None
        };
        Ok(ModelParams {
            config: config.clone(),
            hidden,
            head,
            domain_head,
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::new();
        let mut fan_in = config.input_dim;
        for &h in &config.hidden_dims {
            hidden.push(Dense::zeros(fan_in, h));
            fan_in = h;
        }
        Ok(ModelParams {
            config: config.clone(),
            hidden,
            head: Dense::zeros(fan_in, config.num_classes),
            domain_head: config.domain_head.then(|| Dense::zeros(fan_in, 2)),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor2D> {
        collect_tensors(&self.hidden, &self.head, self.domain_head.as_ref())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        collect_tensors_mut(&mut self.hidden, &mut self.head, self.domain_head.as_mut())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        tensor_names(self.hidden.len(), self.domain_head.is_some())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// Checks that the layer shapes chain from `input_dim` to `num_classes`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.hidden.len() != self.config.hidden_dims.len() {
            return Err(Error::Dimension(format!(
                "{} hidden layers but config lists {}",
                self.hidden.len(),
                self.config.hidden_dims.len()
            )));
        }
        let mut fan_in = self.config.input_dim;
        let layers = self
            .hidden
            .iter()
            .zip(&self.config.hidden_dims)
            .map(|(d, &h)| (d, h))
            .chain(std::iter::once((&self.head, self.config.num_classes)))
            .chain(self.domain_head.iter().map(|d| (d, 2)));
        for (i, (d, out)) in layers.enumerate() {
            let expect_in = if i > self.hidden.len() {
                self.config.feature_dim()
            } else {
                fan_in
            };
            if d.weight.shape() != (expect_in, out) || d.bias.shape() != (1, out) {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} bias {:?}, expected ({expect_in}, {out})",
                    d.weight.shape(),
                    d.bias.shape()
                )));
            }
            fan_in = out;
        }
        if self.domain_head.is_some() != self.config.domain_head {
            return Err(Error::Dimension("domain head presence disagrees with config".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string_pretty(&ckpt)
            .map_err(|e| Error::Format(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("checkpoint parse: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            hidden: params.hidden.iter().map(Dense::zeros_like).collect(),
            head: params.head.zeros_like(),
            domain_head: params.domain_head.as_ref().map(Dense::zeros_like),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2D> {
        collect_tensors(&self.hidden, &self.head, self.domain_head.as_ref())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        collect_tensors_mut(&mut self.hidden, &mut self.head, self.domain_head.as_mut())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        tensor_names(self.hidden.len(), self.domain_head.is_some())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Dimension("gradient structures differ".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Result<Gradients> {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = t.scale(s)?;
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor2D,
    /// Pre-activations of each hidden layer.
    pub pre_activations: Vec<Tensor2D>,
    /// ReLU outputs of each hidden layer.
    pub activations: Vec<Tensor2D>,
    pub logits: Tensor2D,
    pub probs: Tensor2D,
}

impl ForwardTrace {
    /// Last hidden activation (the input itself for a model with no hidden layers).
    pub fn features(&self) -> &Tensor2D {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows(t: &Tensor2D) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn forward(params: &ModelParams, x: &Tensor2D) -> Result<ForwardTrace> {
    if x.cols() != params.config.input_dim {
        return Err(Error::Dimension(format!(
            "input has {} columns, model expects {}",
            x.cols(),
            params.config.input_dim
        )));
    }
    let mut pre_activations = Vec::with_capacity(params.hidden.len());
    let mut activations = Vec::with_capacity(params.hidden.len());
    let mut h = x.clone();
    for layer in &params.hidden {
        let z = layer.apply(&h)?;
        h = z.map(|v| v.max(0.0))?;
        pre_activations.push(z);
        activations.push(h.clone());
    }
    let logits = params.head.apply(&h)?;
    let probs = logits.softmax_rows()?;
    Ok(ForwardTrace {
        input: x.clone(),
        pre_activations,
        activations,
        logits,
        probs,
    })
}

/// Weighted mean cross-entropy and its gradient w.r.t. the logits.
///
/// `loss = (1/b) Σ wᵢ·(−ln pᵢ[yᵢ])`, `dlogitsᵢ = (wᵢ/b)·(pᵢ − onehot(yᵢ))`.
/// Weights are constants: nothing is differentiated through them.
pub fn cross_entropy(probs: &Tensor2D, labels: &[usize], weights: &[f64]) -> Result<(f64, Tensor2D)> {
    let (b, k) = probs.shape();
    if labels.len() != b || weights.len() != b {
        return Err(Error::Dimension(format!(
            "cross_entropy over {b} rows with {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if b == 0 {
        return Err(Error::Dimension("cross_entropy of an empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut d = Tensor2D::zeros(b, k);
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Parameter(format!("weight {w} at row {i} outside [0, 1]")));
        }
        let p = probs.row(i);
        loss += w * -stable_ln(p[y]);
        let scale = w * inv_b;
        let row = d.row_mut(i);
        for (c, (dv, &pv)) in row.iter_mut().zip(p).enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            *dv = scale * (pv - target);
        }
    }
    Ok((loss * inv_b, d))
}

pub fn backward(trace: &ForwardTrace, params: &ModelParams, dlogits: &Tensor2D) -> Result<Gradients> {
    backward_with_features(trace, params, dlogits, None)
}

/// Reverse pass with an optional extra gradient arriving at the feature layer
/// (from a domain-adaptation penalty).
pub fn backward_with_features(
    trace: &ForwardTrace,
    params: &ModelParams,
    dlogits: &Tensor2D,
    dfeatures: Option<&Tensor2D>,
) -> Result<Gradients> {
    let b = trace.batch_size();
    if dlogits.shape() != (b, params.config.num_classes) {
        return Err(Error::Dimension(format!(
            "dlogits {:?} for batch {b} and {} classes",
            dlogits.shape(),
            params.config.num_classes
        )));
    }
    if trace.activations.len() != params.hidden.len() {
        return Err(Error::Dimension(format!(
            "trace has {} hidden layers, params have {}",
            trace.activations.len(),
            params.hidden.len()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let features = trace.features();
    grads.head.weight = features.transpose().matmul(dlogits)?;
    grads.head.bias = dlogits.col_sum();

    let mut dh = dlogits.matmul(&params.head.weight.transpose())?;
    if let Some(extra) = dfeatures {
        dh.add_assign(extra)?;
    }
    for i in (0..params.hidden.len()).rev() {
        let z = &trace.pre_activations[i];
        let mask = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
        let dz = dh.mul(&mask)?;
        let input = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
        grads.hidden[i].weight = input.transpose().matmul(&dz)?;
        grads.hidden[i].bias = dz.col_sum();
        if i > 0 {
            dh = dz.matmul(&params.hidden[i].weight.transpose())?;
        }
    }
    Ok(grads)
}

/// Weighted loss of a batch; the objective that [`grad_check`] differentiates.
pub fn batch_loss(params: &ModelParams, x: &Tensor2D, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let trace = forward(params, x)?;
    Ok(cross_entropy(&trace.probs, labels, weights)?.0)
}

/// Deliberate corruption of one analytic gradient tensor, for checking that
/// [`grad_check_report`] catches and names a broken layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFault {
    pub tensor: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor, in canonical order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst_tensor(&self) -> Option<&str> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
const GRAD_CHECK_BATCH: usize = 4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Worst relative error between backprop and central differences on a random
/// model and batch.
pub fn grad_check(config: &ModelConfig, seed: u64) -> Result<f64> {
    Ok(grad_check_report(config, seed, None)?.max_relative_error)
}

pub fn grad_check_report(config: &ModelConfig, seed: u64, fault: Option<&GradFault>) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    // Nonzero biases keep pre-activations away from the ReLU kink.
    for d in params.hidden.iter_mut().chain(std::iter::once(&mut params.head)) {
        d.bias = rng.normal(1, d.bias.cols(), 0.0, 0.5)?;
    }
    let x = rng.normal(GRAD_CHECK_BATCH, config.input_dim, 0.0, 1.0)?;
    let labels: Vec<usize> = (0..GRAD_CHECK_BATCH).map(|_| rng.below(config.num_classes)).collect();
    let weights: Vec<f64> = (0..GRAD_CHECK_BATCH).map(|_| rng.uniform_range(0.2, 1.0)).collect();

    let trace = forward(&params, &x)?;
    let (_, dlogits) = cross_entropy(&trace.probs, &labels, &weights)?;
    let mut analytic = backward(&trace, &params, &dlogits)?;
    let names = params.tensor_names();
    if let Some(f) = fault {
        let idx = names
            .iter()
            .position(|n| *n == f.tensor)
            .ok_or_else(|| Error::Parameter(format!("unknown tensor {}", f.tensor)))?;
        let t = analytic.tensors_mut().swap_remove(idx);
        *t = t.scale(f.factor)?;
    }

    let analytic_flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut per_tensor = Vec::new();
    let mut worst = 0.0f64;
    // The domain head does not enter the classification loss.
    let n_checked = names.len() - if params.domain_head.is_some() { 2 } else { 0 };
    for (ti, name) in names.iter().enumerate().take(n_checked) {
        let mut tensor_worst = 0.0f64;
        for j in 0..analytic_flat[ti].len() {
            let orig = params.tensors()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = orig + GRAD_CHECK_STEP;
            let up = batch_loss(&params, &x, &labels, &weights)?;
            params.tensors_mut()[ti].data_mut()[j] = orig - GRAD_CHECK_STEP;
            let down = batch_loss(&params, &x, &labels, &weights)?;
            params.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            tensor_worst = tensor_worst.max(relative_error(analytic_flat[ti][j], numeric));
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        per_tensor,
    })
}
