//! Parameter update rules: plain SGD and bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::numerics::Tensor2D;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Whether strong and weak updates share one set of Adam moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSharing {
    #[default]
    Shared,
    Split,
}

/// Which half of a training iteration an update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStream {
    Strong,
    Weak,
}

fn check_congruent(params: &[&Tensor2D], grads: &[&Tensor2D]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "tensor {i}: params {:?} vs grads {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// θ ← θ − η·g.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, learning_rate: f64) -> Result<()> {
    check_congruent(&params.tensors(), &grads.tensors())?;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= learning_rate * gv;
        }
    }
    ensure_finite(params, "sgd_step")
}

fn ensure_finite(params: &ModelParams, op: &str) -> Result<()> {
    if params.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor2D>,
    pub v: Vec<Tensor2D>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor2D> = params
            .tensors()
            .iter()
            .map(|t| Tensor2D::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let g_tensors = grads.tensors();
    check_congruent(&params.tensors(), &g_tensors)?;
    check_congruent(&params.tensors(), &state.m.iter().collect::<Vec<_>>())?;
    check_congruent(&params.tensors(), &state.v.iter().collect::<Vec<_>>())?;

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g_tensors)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + (1.0 - b1) * gj;
            vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
            let m_hat = md[j] / bc1;
            let v_hat = vd[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    ensure_finite(params, "adam_step")
}

/// The optimizer of one training run: SGD, or Adam with shared or split
/// moment state across the strong and weak updates.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adam { shared: AdamState, weak: Option<AdamState> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, sharing: MomentSharing, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                shared: AdamState::new(params, learning_rate),
                weak: (sharing == MomentSharing::Split).then(|| AdamState::new(params, learning_rate)),
            },
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, stream: UpdateStream) -> Result<()> {
        match self {
            Optimizer::Sgd { learning_rate } => sgd_step(params, grads, *learning_rate),
            Optimizer::Adam { shared, weak } => {
                let state = match (stream, weak.as_mut()) {
                    (UpdateStream::Weak, Some(w)) => w,
                    _ => shared,
                };
                adam_step(params, grads, state)
            }
        }
    }

    /// Total number of updates applied so far (sum over moment states).
    pub fn steps(&self) -> Option<u64> {
        match self {
            Optimizer::Sgd { .. } => None,
            Optimizer::Adam { shared, weak } => Some(shared.t + weak.as_ref().map_or(0, |w| w.t)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    /// Model with a single scalar trainable weight in head.weight[0][0]:
    /// input_dim 1, no hidden layers, 2 classes.
    fn scalar_params(theta: f64) -> ModelParams {
        let cfg = ModelConfig {
            input_dim: 1,
            hidden_dims: vec![],
            num_classes: 2,
            domain_head: false,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.head.weight.set(0, 0, theta);
        p
    }

    fn scalar_grads(p: &ModelParams, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(p);
        grads.head.weight.set(0, 0, g);
        grads
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = ModelParams::init(&ModelConfig::default(), &mut Rng::new(1)).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &Gradients::zeros_like(&before), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let mut p = scalar_params(1.0);
        let g = scalar_grads(&p, 0.5);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.head.weight.get(0, 0), 0.95);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let mut rng = Rng::new(4);
        let cfg = ModelConfig::default();
        let p0 = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut g1 = Gradients::zeros_like(&p0);
        let mut g2 = Gradients::zeros_like(&p0);
        for t in g1.tensors_mut().into_iter().chain(g2.tensors_mut()) {
            *t = rng.normal(t.rows(), t.cols(), 0.0, 1.0).unwrap();
        }
        let mut a = p0.clone();
        sgd_step(&mut a, &g1, 0.01).unwrap();
        sgd_step(&mut a, &g2, 0.01).unwrap();
        let mut sum = g1.clone();
        sum.add_assign(&g2).unwrap();
        let mut b = p0;
        sgd_step(&mut b, &sum, 0.01).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ModelParams::init(&ModelConfig::default(), &mut Rng::new(1)).unwrap();
        let other = ModelParams::init(
            &ModelConfig {
                hidden_dims: vec![4],
                ..ModelConfig::default()
            },
            &mut Rng::new(1),
        )
        .unwrap();
        let g = Gradients::zeros_like(&other);
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::Dimension(_))));
        let mut st = AdamState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::Dimension(_))));
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let mut p = scalar_params(0.0);
        let g = scalar_grads(&p, 0.5);
        let mut st = AdamState::new(&p, 1e-4);
        adam_step(&mut p, &g, &mut st).unwrap();
        let delta = p.head.weight.get(0, 0);
        let expect = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expect).abs() < 1e-18, "{delta} vs {expect}");
        assert!((delta + 9.9999998e-5).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = scalar_params(0.3);
        let g = scalar_grads(&p, 0.0);
        let mut st = AdamState::new(&p, 1e-4);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.head.weight.get(0, 0), 0.3);
    }

    #[test]
    fn adam_three_step_scalar_trajectory() {
        // standalone reference loop
        let gs = [0.5, -0.2, 0.8];
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for (i, g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            reference.push(theta);
        }

        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p, lr);
        for (g, r) in gs.iter().zip(reference) {
            let grads = scalar_grads(&p, *g);
            adam_step(&mut p, &grads, &mut st).unwrap();
            assert!((p.head.weight.get(0, 0) - r).abs() < 1e-12);
        }
        assert!(st.v.iter().all(|t| t.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn shared_optimizer_counts_both_streams() {
        let p0 = scalar_params(0.0);
        let g = scalar_grads(&p0, 0.1);
        let mut p = p0.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-4, MomentSharing::Shared, &p);
        opt.step(&mut p, &g, UpdateStream::Strong).unwrap();
        opt.step(&mut p, &g, UpdateStream::Weak).unwrap();
        match &opt {
            Optimizer::Adam { shared, weak } => {
                assert_eq!(shared.t, 2);
                assert!(weak.is_none());
            }
            _ => unreachable!(),
        }

        let mut p = p0;
        let mut split = Optimizer::new(OptimizerKind::Adam, 1e-4, MomentSharing::Split, &p);
        split.step(&mut p, &g, UpdateStream::Strong).unwrap();
        split.step(&mut p, &g, UpdateStream::Weak).unwrap();
        match &split {
            Optimizer::Adam { shared, weak } => {
                assert_eq!(shared.t, 1);
                assert_eq!(weak.as_ref().unwrap().t, 1);
            }
            _ => unreachable!(),
        }
        assert_eq!(split.steps(), Some(2));
    }

    proptest! {
        #[test]
        fn adam_first_step_magnitude_is_at_most_lr(g in -1e3f64..1e3, lr in 1e-6f64..1e-1) {
            prop_assume!(g != 0.0);
            let mut p = scalar_params(0.0);
            let mut st = AdamState::new(&p, lr);
            let grads = scalar_grads(&p, g);
            adam_step(&mut p, &grads, &mut st).unwrap();
            let step = p.head.weight.get(0, 0).abs();
            prop_assert!(step <= lr * (1.0 + 1e-12));
            // ≈ η unless |g| is comparable to ε
            prop_assert!(step >= lr * (1.0 - 1e-8 / g.abs()) * (1.0 - 1e-12));
        }
    }
}
