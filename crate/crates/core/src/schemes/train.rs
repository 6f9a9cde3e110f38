use std::fmt::Write as _;
use std::path::Path;

use super::{iteration, Batch, SchemeConfig, Source, WeakMode};
use crate::error::{Error, Result};
use crate::model::{batch_loss, forward, ModelConfig, ModelParams};
use crate::numerics::{Rng, Tensor2D};
use crate::shift::{jitter_features, FeatureMoments, ShiftConfig};
use crate::synthdata::{Bag, Instance};

/// Flattened training material for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub strong_x: Tensor2D,
    pub strong_y: Vec<usize>,
    pub weak_x: Tensor2D,
    pub weak_y: Vec<usize>,
    /// Bag id of every weak row.
    pub weak_bag: Vec<u64>,
    /// Early-stopping holdout, labelled with bag labels.
    pub val_x: Tensor2D,
    pub val_y: Vec<usize>,
}

fn stack(rows: &[&[f64]], dim: usize) -> Result<Tensor2D> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension(format!("instance of width {} where {dim} expected", r.len())));
    }
    Tensor2D::from_vec(rows.len(), dim, rows.concat())
}

fn flatten<'a>(bags: &[&'a Bag]) -> (Vec<&'a [f64]>, Vec<usize>, Vec<u64>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    for bag in bags {
        for inst in &bag.instances {
            rows.push(inst.features.as_slice());
            y.push(bag.weak_label.class_index());
            ids.push(bag.bag_id);
        }
    }
    (rows, y, ids)
}

impl TrainData {
    pub fn from_parts(strong: &[Instance], train_bags: &[&Bag], val_bags: &[&Bag], input_dim: usize) -> Result<Self> {
        let strong_rows: Vec<&[f64]> = strong.iter().map(|i| i.features.as_slice()).collect();
        let strong_y = strong
            .iter()
            .map(|i| {
                i.strong_label
                    .map(|l| l.class_index())
                    .ok_or_else(|| Error::Parameter("strong instance without a strong label".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (weak_rows, weak_y, weak_bag) = flatten(train_bags);
        let (val_rows, val_y, _) = flatten(val_bags);
        Ok(TrainData {
            strong_x: stack(&strong_rows, input_dim)?,
            strong_y,
            weak_x: stack(&weak_rows, input_dim)?,
            weak_y,
            weak_bag,
            val_x: stack(&val_rows, input_dim)?,
            val_y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            max_epochs: 20,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub strong_loss: Option<f64>,
    pub weak_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub val_loss: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without a holdout).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 0 means the initial parameters were never beaten.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("epoch,strong_loss,weak_loss,penalty,val_loss,mean_confidence\n");
        for r in &self.history {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                opt(r.strong_loss),
                opt(r.weak_loss),
                opt(r.penalty),
                opt(r.val_loss),
                opt(r.mean_confidence)
            );
        }
        s
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.history_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean unweighted cross-entropy on the holdout, `None` when it is empty.
pub fn validation_loss(params: &ModelParams, x: &Tensor2D, y: &[usize]) -> Result<Option<f64>> {
    if y.is_empty() {
        return Ok(None);
    }
    batch_loss(params, x, y, &vec![1.0; y.len()]).map(Some)
}

pub fn predict_classes(params: &ModelParams, x: &Tensor2D) -> Result<Vec<usize>> {
    Ok(forward(params, x)?.predictions())
}

/// Mean probability of the bag label over discordant instances (true pattern
/// on the other side of the binary split) and over concordant ones.
pub fn confidence_by_concordance(params: &ModelParams, bags: &[&Bag]) -> Result<(f64, f64)> {
    let (mut disc, mut conc) = ((0.0, 0usize), (0.0, 0usize));
    for bag in bags {
        let probs = forward(params, &bag.feature_matrix()?)?.probs;
        let k = bag.weak_label.class_index();
        for (r, inst) in bag.instances.iter().enumerate() {
            let slot = if inst.true_pattern.binary() == bag.weak_label {
                &mut conc
            } else {
                &mut disc
            };
            slot.0 += probs.get(r, k);
            slot.1 += 1;
        }
    }
    if disc.1 == 0 || conc.1 == 0 {
        return Err(Error::UndefinedMetric(
            "need both concordant and discordant instances".into(),
        ));
    }
    Ok((disc.0 / disc.1 as f64, conc.0 / conc.1 as f64))
}

/// Endless sampler over `n` items: reshuffles whenever a pass is used up.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut Rng) -> Self {
        Cycler {
            order: rng.permutation(n),
            pos: 0,
        }
    }

    fn take(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = rng.permutation(self.order.len());
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn numeric_abort(epoch: usize, it: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) | Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, iteration {it}: {m}")),
        other => other,
    }
}

/// Trains one model. An epoch is one pass over the weak training rows in
/// batches; strong batches cycle through their own reshuffled stream. After
/// each epoch the holdout loss is measured; training stops after `patience`
/// epochs without improvement and the best parameters are returned.
///
/// A domain head is added to the model when the shift mode needs one.
pub fn train_run(
    data: &TrainData,
    model: &ModelConfig,
    scheme: &SchemeConfig,
    shift: &ShiftConfig,
    stop: &EarlyStop,
    seed: u64,
) -> Result<TrainOutcome> {
    scheme.validate()?;
    shift.validate()?;
    let mut model = model.clone();
    model.domain_head |= shift.needs_domain_head();
    model.validate()?;
    let d = model.input_dim;
    for (name, x) in [("strong", &data.strong_x), ("weak", &data.weak_x), ("holdout", &data.val_x)] {
        if x.rows() > 0 && x.cols() != d {
            return Err(Error::Dimension(format!("{name} rows have width {}, model expects {d}", x.cols())));
        }
    }
    let n_weak = data.weak_y.len();
    if n_weak == 0 {
        return Err(Error::Parameter("no weak training rows".into()));
    }
    if scheme.use_strong && data.strong_y.is_empty() {
        return Err(Error::Parameter("scheme uses strong labels but the strong set is empty".into()));
    }
    if shift.uses_penalty() && !scheme.use_strong {
        return Err(Error::Config("a shift penalty needs strong (source) data".into()));
    }

    let mut params = ModelParams::init(&model, &mut Rng::with_stream(seed, 1))?;
    let mut order_rng = Rng::with_stream(seed, 2);
    let mut aug_rng = Rng::with_stream(seed, 3);
    let mut opt = scheme.make_optimizer(&params);

    let transfer = if scheme.use_strong && shift.uses_stain_transfer() {
        let source = FeatureMoments::of(&data.strong_x)?;
        let mut targets = Vec::new();
        let mut start = 0;
        while start < n_weak {
            let end = (start..n_weak).find(|&i| data.weak_bag[i] != data.weak_bag[start]).unwrap_or(n_weak);
            if end - start >= 2 {
                let idx: Vec<usize> = (start..end).collect();
                targets.push(FeatureMoments::of(&data.weak_x.select_rows(&idx))?);
            }
            start = end;
        }
        (!targets.is_empty()).then_some((source, targets))
    } else {
        None
    };

    let mut strong_cycle = scheme
        .use_strong
        .then(|| Cycler::new(data.strong_y.len(), &mut order_rng));
    let strong_k = scheme.strong_batch.min(data.strong_y.len());

    let mut best = (validation_loss(&params, &data.val_x, &data.val_y)?, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=stop.max_epochs {
        let perm = order_rng.permutation(n_weak);
        let (mut s_loss, mut w_loss, mut pen, mut conf) =
            (Running::default(), Running::default(), Running::default(), Running::default());
        for (it, chunk) in perm.chunks(scheme.weak_batch).enumerate() {
            let mut wx = data.weak_x.select_rows(chunk);
            if shift.uses_color_jitter() {
                wx = jitter_features(&wx, &mut aug_rng, shift.jitter_strength)?;
            }
            let weak = Batch::new(
                wx,
                chunk.iter().map(|&i| data.weak_y[i]).collect(),
                Source::Weak,
                chunk.iter().map(|&i| Some(data.weak_bag[i])).collect(),
            )?;
            let strong = match strong_cycle.as_mut() {
                Some(cycle) => {
                    let idx = cycle.take(strong_k, &mut order_rng);
                    let mut sx = data.strong_x.select_rows(&idx);
                    if let Some((source, targets)) = &transfer {
                        for r in 0..sx.rows() {
                            let t = &targets[aug_rng.below(targets.len())];
                            source.transfer_row(sx.row_mut(r), t);
                        }
                    }
                    if shift.uses_color_jitter() {
                        sx = jitter_features(&sx, &mut aug_rng, shift.jitter_strength)?;
                    }
                    let y = idx.iter().map(|&i| data.strong_y[i]).collect();
                    Some(Batch::new(sx, y, Source::Strong, vec![None; idx.len()])?)
                }
                None => None,
            };
            let out = iteration(&mut params, &mut opt, strong.as_ref(), &weak, scheme, shift)
                .map_err(|e| numeric_abort(epoch, it, e))?;
            for (slot, v) in [(&mut s_loss, out.strong_loss), (&mut w_loss, out.weak_loss), (&mut pen, out.penalty)] {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("epoch {epoch}, iteration {it}: loss is {v}")));
                    }
                    slot.push(v);
                }
            }
            out.confidences.iter().for_each(|&c| conf.push(c));
        }
        let val = validation_loss(&params, &data.val_x, &data.val_y).map_err(|e| numeric_abort(epoch, 0, e))?;
        history.push(EpochRecord {
            epoch,
            strong_loss: s_loss.mean(),
            weak_loss: if scheme.weak_mode == WeakMode::Off { None } else { w_loss.mean() },
            penalty: pen.mean(),
            val_loss: val,
            mean_confidence: conf.mean(),
        });
        match (val, best.0) {
            (Some(v), Some(b)) if v >= b => {
                since_best += 1;
                if since_best >= stop.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = (val, params.clone(), epoch);
                since_best = 0;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        history,
        best_epoch: best.2,
        stopped_early,
    })
}
