//! Supervision schemes combining weak (bag-level) and strong (instance-level)
//! labels.
//!
//! One training iteration takes a strong batch (when strong data is used) and
//! a weak batch. The strong batch is back-propagated first; the weak batch is
//! then forwarded through the *updated* parameters and back-propagated with
//! one of three weightings:
//!
//! * plain: every example weight 1;
//! * MIL top-k: only the k examples most confident in their weak label;
//! * self-weighted: each example weighted by the model's own probability for
//!   its weak label, treated as a constant.

mod train;

pub use train::{
    confidence_by_concordance, predict_classes, train_run, validation_loss, EarlyStop, EpochRecord, TrainData,
    TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, backward_with_features, cross_entropy, forward, ForwardTrace, ModelParams};
use crate::numerics::Tensor2D;
use crate::optim::{MomentSharing, Optimizer, OptimizerKind, UpdateStream, DEFAULT_LEARNING_RATE};
use crate::shift::{adversarial_penalty, coral, median_bandwidth, mmd2, Domain, KernelBandwidth, ShiftConfig, ShiftMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Strong,
    Weak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor2D,
    pub y: Vec<usize>,
    pub source: Source,
    pub bag_ids: Vec<Option<u64>>,
}

impl Batch {
    pub fn new(x: Tensor2D, y: Vec<usize>, source: Source, bag_ids: Vec<Option<u64>>) -> Result<Self> {
        if y.len() != x.rows() || bag_ids.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "batch with {} rows, {} labels, {} bag ids",
                x.rows(),
                y.len(),
                bag_ids.len()
            )));
        }
        Ok(Batch { x, y, source, bag_ids })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn expect_source(&self, source: Source) -> Result<()> {
        if self.source != source {
            return Err(Error::Parameter(format!(
                "expected a {source:?} batch, got {:?}",
                self.source
            )));
        }
        if self.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakMode {
    /// Weak data is used only as unlabelled target-domain input.
    Off,
    Plain,
    MilWs,
    SwWs,
}

/// What "most confident" means when MIL-WS ranks a weak batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilConfidence {
    /// Probability of the example's weak label.
    #[default]
    WeakLabel,
    /// Largest class probability, whatever the class.
    MaxClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub use_strong: bool,
    pub weak_mode: WeakMode,
    #[serde(default = "default_strong_batch")]
    pub strong_batch: usize,
    #[serde(default = "default_weak_batch")]
    pub weak_batch: usize,
    #[serde(default = "default_mil_fraction")]
    pub mil_fraction: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub moment_sharing: MomentSharing,
    #[serde(default)]
    pub mil_confidence: MilConfidence,
    /// Test hook: replace every self-computed confidence by 1.
    #[serde(default)]
    pub force_unit_confidence: bool,
}

fn default_strong_batch() -> usize {
    32
}
fn default_weak_batch() -> usize {
    128
}
fn default_mil_fraction() -> f64 {
    0.25
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}

impl SchemeConfig {
    pub fn new(use_strong: bool, weak_mode: WeakMode) -> Self {
        SchemeConfig {
            use_strong,
            weak_mode,
            strong_batch: default_strong_batch(),
            weak_batch: default_weak_batch(),
            mil_fraction: default_mil_fraction(),
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            moment_sharing: MomentSharing::Shared,
            mil_confidence: MilConfidence::WeakLabel,
            force_unit_confidence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strong_batch == 0 || self.weak_batch == 0 {
            return Err(Error::Config("scheme batch sizes must be >= 1".into()));
        }
        if !(self.mil_fraction > 0.0 && self.mil_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "scheme.mil_fraction must be in (0, 1], got {}",
                self.mil_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("scheme.learning_rate must be > 0".into()));
        }
        if !self.use_strong && self.weak_mode == WeakMode::Off {
            return Err(Error::Config("scheme uses neither strong nor weak labels".into()));
        }
        Ok(())
    }

    pub fn make_optimizer(&self, params: &ModelParams) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate, self.moment_sharing, params)
    }
}

/// `cᵢ = Σ_k p̂ᵢ[k]·𝟙{yᵢ = k}`, the predicted probability of each weak label.
pub fn confidence_scores(probs: &Tensor2D, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != probs.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= probs.cols() {
                Err(Error::LabelOutOfRange {
                    label: y,
                    classes: probs.cols(),
                })
            } else {
                Ok(probs.get(i, y))
            }
        })
        .collect()
}

/// Number of examples MIL-WS keeps: `max(1, ⌊fraction·n⌋)`.
pub fn mil_k(batch_len: usize, fraction: f64) -> usize {
    ((fraction * batch_len as f64).floor() as usize).clamp(1, batch_len.max(1))
}

/// Indices of the `k` largest scores; equal scores keep ascending index order.
/// Returned in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn weighted_update(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    trace: &ForwardTrace,
    labels: &[usize],
    weights: &[f64],
    stream: UpdateStream,
) -> Result<f64> {
    let (loss, dlogits) = cross_entropy(&trace.probs, labels, weights)?;
    let grads = backward(trace, params, &dlogits)?;
    opt.step(params, &grads, stream)?;
    Ok(loss)
}

/// One optimizer step on the unweighted mean cross-entropy of a strong batch.
pub fn strong_step(params: &mut ModelParams, opt: &mut Optimizer, batch: &Batch) -> Result<f64> {
    batch.expect_source(Source::Strong)?;
    let trace = forward(params, &batch.x)?;
    weighted_update(params, opt, &trace, &batch.y, &vec![1.0; batch.len()], UpdateStream::Strong)
}

/// Strong step whose loss also carries `λ·penalty(f_strong, f_weak)`, with the
/// weak batch forwarded at the same (pre-update) parameters.
pub fn strong_step_with_penalty(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &Batch,
    target_x: &Tensor2D,
    shift: &ShiftConfig,
) -> Result<(f64, f64)> {
    batch.expect_source(Source::Strong)?;
    if !shift.uses_penalty() {
        return Ok((strong_step(params, opt, batch)?, 0.0));
    }
    let ts = forward(params, &batch.x)?;
    let tt = forward(params, target_x)?;
    let (task_loss, dlogits) = cross_entropy(&ts.probs, &batch.y, &vec![1.0; batch.len()])?;
    let lambda = shift.penalty_weight;
    let (fs, ft) = (ts.features(), tt.features());

    let (penalty, d_source, d_target, head_grads) = match shift.mode {
        ShiftMode::Mmd | ShiftMode::Coral => {
            let out = if shift.mode == ShiftMode::Mmd {
                let sigma = match shift.kernel_bandwidth {
                    KernelBandwidth::MedianHeuristic => median_bandwidth(fs, ft)?,
                    KernelBandwidth::Fixed(s) => s,
                };
                mmd2(fs, ft, sigma)?
            } else {
                coral(fs, ft)?
            };
            (out.value, out.d_source, out.d_target, None)
        }
        ShiftMode::Adversarial => {
            let head = params
                .domain_head
                .as_ref()
                .ok_or_else(|| Error::Config("adversarial shift needs model.domain_head = true".into()))?;
            let pooled = Tensor2D::from_vec(fs.rows() + ft.rows(), fs.cols(), [fs.data(), ft.data()].concat())?;
            let domains: Vec<Domain> = std::iter::repeat(Domain::Source)
                .take(fs.rows())
                .chain(std::iter::repeat(Domain::Target).take(ft.rows()))
                .collect();
            let out = adversarial_penalty(&pooled, &domains, head, shift.grl_lambda)?;
            let g = out.feature_grads;
            let split = fs.rows() * fs.cols();
            let d_source = Tensor2D::from_vec(fs.rows(), fs.cols(), g.data()[..split].to_vec())?;
            let d_target = Tensor2D::from_vec(ft.rows(), ft.cols(), g.data()[split..].to_vec())?;
            (out.domain_loss, d_source, d_target, Some(out.head_grads))
        }
        _ => unreachable!("uses_penalty covers only penalty modes"),
    };

    let mut grads = backward_with_features(&ts, params, &dlogits, Some(&d_source.scale(lambda)?))?;
    let zero_logits = Tensor2D::zeros(tt.batch_size(), params.config.num_classes);
    let target_grads = backward_with_features(&tt, params, &zero_logits, Some(&d_target.scale(lambda)?))?;
    grads.add_assign(&target_grads)?;
    if let (Some(hg), Some(slot)) = (head_grads, grads.domain_head.as_mut()) {
        slot.weight = hg.weight.scale(lambda)?;
        slot.bias = hg.bias.scale(lambda)?;
    }
    opt.step(params, &grads, UpdateStream::Strong)?;
    Ok((task_loss, penalty))
}

pub fn weak_step_plain(params: &mut ModelParams, opt: &mut Optimizer, batch: &Batch) -> Result<f64> {
    batch.expect_source(Source::Weak)?;
    let trace = forward(params, &batch.x)?;
    weighted_update(params, opt, &trace, &batch.y, &vec![1.0; batch.len()], UpdateStream::Weak)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilOutcome {
    pub loss: f64,
    pub selected: Vec<usize>,
    /// Ranking scores of the whole batch.
    pub confidences: Vec<f64>,
}

/// MIL-WS: mean loss over only the k most confident examples of the batch.
pub fn weak_step_mil(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &Batch,
    fraction: f64,
    ranking: MilConfidence,
) -> Result<MilOutcome> {
    batch.expect_source(Source::Weak)?;
    let trace = forward(params, &batch.x)?;
    let confidences = match ranking {
        MilConfidence::WeakLabel => confidence_scores(&trace.probs, &batch.y)?,
        MilConfidence::MaxClass => (0..trace.probs.rows())
            .map(|r| trace.probs.row(r).iter().copied().fold(0.0, f64::max))
            .collect(),
    };
    let k = mil_k(batch.len(), fraction);
    let selected = top_k_indices(&confidences, k);
    let sub = select_trace_rows(&trace, &selected);
    let labels: Vec<usize> = selected.iter().map(|&i| batch.y[i]).collect();
    let loss = weighted_update(params, opt, &sub, &labels, &vec![1.0; k], UpdateStream::Weak)?;
    Ok(MilOutcome {
        loss,
        selected,
        confidences,
    })
}

fn select_trace_rows(trace: &ForwardTrace, idx: &[usize]) -> ForwardTrace {
    ForwardTrace {
        input: trace.input.select_rows(idx),
        pre_activations: trace.pre_activations.iter().map(|t| t.select_rows(idx)).collect(),
        activations: trace.activations.iter().map(|t| t.select_rows(idx)).collect(),
        logits: trace.logits.select_rows(idx),
        probs: trace.probs.select_rows(idx),
    }
}

/// Confidence-weighted weak update: forward at the current parameters,
/// weights `cᵢ` (or 1 under the injection hook) held constant.
pub fn weak_step_self_weighted(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &Batch,
    force_unit_confidence: bool,
) -> Result<(f64, Vec<f64>)> {
    batch.expect_source(Source::Weak)?;
    let trace = forward(params, &batch.x)?;
    let confidences = confidence_scores(&trace.probs, &batch.y)?;
    let weights = if force_unit_confidence {
        vec![1.0; batch.len()]
    } else {
        confidences.clone()
    };
    let loss = weighted_update(params, opt, &trace, &batch.y, &weights, UpdateStream::Weak)?;
    Ok((loss, confidences))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub strong_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub weak_loss: Option<f64>,
    /// Probability of the weak label for every weak example, computed at the
    /// parameters the weak update started from.
    pub confidences: Vec<f64>,
    /// Examples kept by MIL-WS.
    pub selected: Option<Vec<usize>>,
}

/// One full self-weighted iteration: strong update θ₂ₜ→θ₂ₜ₊₁ (when a strong
/// batch is given), then the confidence-weighted weak update θ₂ₜ₊₁→θ₂ₜ₊₂.
pub fn sw_ws_iteration(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    strong: Option<&Batch>,
    weak: &Batch,
    scheme: &SchemeConfig,
) -> Result<IterationOutcome> {
    if scheme.weak_mode != WeakMode::SwWs {
        return Err(Error::Config("sw_ws_iteration called with a non SW-WS scheme".into()));
    }
    iteration(params, opt, strong, weak, scheme, &ShiftConfig::default())
}

/// One iteration of any scheme, including the shift penalty on the strong half.
pub fn iteration(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    strong: Option<&Batch>,
    weak: &Batch,
    scheme: &SchemeConfig,
    shift: &ShiftConfig,
) -> Result<IterationOutcome> {
    match (scheme.use_strong, strong) {
        (true, None) => return Err(Error::Config("scheme uses strong labels but no strong batch given".into())),
        (false, Some(_)) => return Err(Error::Config("strong batch supplied to a weak-only scheme".into())),
        _ => {}
    }
    let (strong_loss, penalty) = match strong {
        Some(bs) if shift.uses_penalty() => {
            let (l, p) = strong_step_with_penalty(params, opt, bs, &weak.x, shift)?;
            (Some(l), Some(p))
        }
        Some(bs) => (Some(strong_step(params, opt, bs)?), None),
        None => (None, None),
    };
    let mut out = IterationOutcome {
        strong_loss,
        penalty,
        weak_loss: None,
        confidences: Vec::new(),
        selected: None,
    };
    match scheme.weak_mode {
        WeakMode::Off => {}
        WeakMode::Plain => {
            weak.expect_source(Source::Weak)?;
            let trace = forward(params, &weak.x)?;
            out.confidences = confidence_scores(&trace.probs, &weak.y)?;
            let ones = vec![1.0; weak.len()];
            out.weak_loss = Some(weighted_update(params, opt, &trace, &weak.y, &ones, UpdateStream::Weak)?);
        }
        WeakMode::MilWs => {
            let m = weak_step_mil(params, opt, weak, scheme.mil_fraction, scheme.mil_confidence)?;
            let k = mil_k(weak.len(), scheme.mil_fraction);
            if m.selected.len() != k {
                return Err(Error::Numeric(format!(
                    "MIL selected {} examples, expected {k}",
                    m.selected.len()
                )));
            }
            out.weak_loss = Some(m.loss);
            out.confidences = match scheme.mil_confidence {
                MilConfidence::WeakLabel => m.confidences,
                MilConfidence::MaxClass => Vec::new(),
            };
            out.selected = Some(m.selected);
        }
        WeakMode::SwWs => {
            let (l, c) = weak_step_self_weighted(params, opt, weak, scheme.force_unit_confidence)?;
            out.weak_loss = Some(l);
            out.confidences = c;
        }
    }
    Ok(out)
}
