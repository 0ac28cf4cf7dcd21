//! Adam with decoupled weight decay, learning-rate schedules, and the
//! named parameter sets the training loops operate on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A named, ordered collection of trainable tensors. Order is the
/// binding order used when inserting leaves into a graph, and the
/// serialization order in checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> usize {
        tensor.requires_grad = true;
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            decay,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Clear all stored gradients.
    pub fn zero_grad(&mut self) {
        for e in self.entries.iter_mut() {
            e.tensor.grad = None;
        }
    }

    /// Scale every stored gradient so the global L2 norm is at most `clip`.
    pub fn clip_global_norm(&mut self, clip: f64) {
        let mut sq = 0.0;
        for e in self.entries.iter() {
            if let Some(g) = &e.tensor.grad {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > clip {
            let s = clip / norm;
            for e in self.entries.iter_mut() {
                if let Some(g) = &mut e.tensor.grad {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
}

/// Per-parameter Adam moment buffers plus the shared hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(numel: usize, weight_decay: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam update on a single parameter. `decay` selects
/// whether the state's decoupled weight decay applies.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    decay: bool,
    name: &str,
) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::shape("adam_step grad", param.shape(), &[grad.len()]));
    }
    if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGrad {
            param: format!("{name}[{bad}]"),
            step: state.step_count + 1,
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let wd = if decay { state.weight_decay } else { 0.0 };
    let data = param.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        let mut step = m_hat / (v_hat.sqrt() + state.epsilon);
        if wd > 0.0 {
            step += wd * data[i];
        }
        data[i] -= lr * step;
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`], consuming gradients stored on the
/// tensors by the training loop.
#[derive(Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Adam {
            states: params
                .iter()
                .map(|e| AdamState::new(e.tensor.numel(), weight_decay))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        for (i, state) in self.states.iter_mut().enumerate() {
            let entry = &mut params.entries[i];
            let Some(grad) = entry.tensor.grad.take() else {
                // Parameter did not participate in this step's loss.
                continue;
            };
            adam_step(&mut entry.tensor, &grad, state, lr, entry.decay, &entry.name)?;
        }
        Ok(())
    }
}

/// Learning-rate schedule kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScheduleKind {
    Constant,
    CosineAnneal,
    MultiStep { milestones: Vec<u64>, gamma: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_steps: u64) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            kind: ScheduleKind::Constant,
        }
    }

    pub fn cosine(base_lr: f64, total_steps: u64) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            kind: ScheduleKind::CosineAnneal,
        }
    }

    pub fn multi_step(base_lr: f64, total_steps: u64, milestones: Vec<u64>, gamma: f64) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            kind: ScheduleKind::MultiStep { milestones, gamma },
        }
    }
}

/// Learning rate at `step` in [0, total_steps].
pub fn schedule_lr(schedule: &LrSchedule, step: u64) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::contract(format!(
            "schedule step {step} out of range 0..={}",
            schedule.total_steps
        )));
    }
    Ok(match &schedule.kind {
        ScheduleKind::Constant => schedule.base_lr,
        ScheduleKind::CosineAnneal => {
            let frac = step as f64 / schedule.total_steps as f64;
            schedule.base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
        }
        ScheduleKind::MultiStep { milestones, gamma } => {
            let passed = milestones.iter().filter(|&&m| step >= m).count() as i32;
            schedule.base_lr * gamma.powi(passed)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::cosine(5e-4, 100);
        assert_eq!(schedule_lr(&s, 0).unwrap(), 5e-4);
        assert!(schedule_lr(&s, 100).unwrap().abs() < 1e-19);
        assert!((schedule_lr(&s, 50).unwrap() - 2.5e-4).abs() < 1e-19);
    }

    #[test]
    fn schedule_step_out_of_range() {
        let s = LrSchedule::cosine(1e-3, 10);
        assert!(schedule_lr(&s, 11).is_err());
    }

    #[test]
    fn multi_step_decays_by_gamma() {
        let s = LrSchedule::multi_step(1.0, 100, vec![10, 20, 90], 0.1);
        assert_eq!(schedule_lr(&s, 0).unwrap(), 1.0);
        assert!((schedule_lr(&s, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!((schedule_lr(&s, 19).unwrap() - 0.1).abs() < 1e-15);
        assert!((schedule_lr(&s, 25).unwrap() - 0.01).abs() < 1e-15);
        assert!((schedule_lr(&s, 95).unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3, 0.0);
        adam_step(&mut p, &[0.0, 0.0, 0.0], &mut st, 1e-3, true, "p").unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let mut st = AdamState::new(2, 0.0);
        let g = [0.3, -0.07];
        adam_step(&mut p, &g, &mut st, 0.01, false, "p").unwrap();
        // First step: m_hat = g, v_hat = g^2, so update ~ -lr * sign(g).
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p.data()[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_two_steps_match_hand_computation() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let g1 = 0.4;
        let g2 = -0.2;
        // Hand-rolled two-step reference.
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x: f64 = 2.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut st = AdamState::new(1, 0.0);
        adam_step(&mut p, &[g1], &mut st, lr, false, "p").unwrap();
        adam_step(&mut p, &[g2], &mut st, lr, false, "p").unwrap();
        assert!((p.data()[0] - x).abs() < 1e-12, "{} vs {}", p.data()[0], x);
    }

    fn b1_pow(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn adam_aborts_on_non_finite_grad_naming_param() {
        let mut params = ParamSet::new();
        params.push("head.weight", Tensor::zeros(vec![2]), true);
        let mut adam = Adam::new(&params, 0.0);
        params.tensor_mut(0).grad = Some(vec![0.1, f64::NAN]);
        let err = adam.step(&mut params, 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }

    #[test]
    fn weight_decay_only_on_flagged_entries() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        params.push("gamma", Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let mut adam = Adam::new(&params, 0.5);
        params.tensor_mut(0).grad = Some(vec![0.0]);
        params.tensor_mut(1).grad = Some(vec![0.0]);
        adam.step(&mut params, 0.1).unwrap();
        assert!(params.tensor(0).data()[0] < 1.0);
        assert_eq!(params.tensor(1).data()[0], 1.0);
    }

    #[test]
    fn clip_global_norm_scales_down() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::zeros(vec![2]), true);
        params.tensor_mut(0).grad = Some(vec![3.0, 4.0]);
        params.clip_global_norm(1.0);
        let g = params.tensor(0).grad.as_ref().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
