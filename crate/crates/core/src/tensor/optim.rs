//! Adam with per-element update masks.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, ParamStore};
use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated at 1-based step numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear warm-up to `peak` over `warmup` steps, then decay with `1/sqrt(step)`.
    InverseSqrt { peak: f64, warmup: u64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::InverseSqrt {
            peak: 2e-3,
            warmup: 400,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt { peak, warmup } => {
                let t = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                peak * (t / w).min((w / t).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Optimizer state bound to one parameter store.
///
/// `step` drives the learning-rate schedule and keeps counting across
/// [`AdamState::reset_moments`]; bias correction uses the number of steps since
/// the last reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moment_steps: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
            .collect();
        AdamState {
            config,
            step: 0,
            moment_steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Continue the schedule from an earlier run.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moment_steps(&self) -> u64 {
        self.moment_steps
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// Zero both moment tensors and restart bias correction.
    pub fn reset_moments(&mut self) {
        for v in self.first.values_mut().chain(self.second.values_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.moment_steps = 0;
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.step + 1)
    }

    /// Track a parameter added after construction (e.g. adapters).
    pub fn bind_new(&mut self, params: &ParamStore) {
        for (n, t) in params.iter() {
            if !self.first.contains_key(n) {
                self.first.insert(n.to_string(), vec![0.0; t.len()]);
                self.second.insert(n.to_string(), vec![0.0; t.len()]);
            }
        }
    }

    /// Error unless the moments track exactly the tensors of `params`.
    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        self.check_bound(params)?;
        if self.second.len() != self.first.len() || self.first.keys().ne(self.second.keys()) {
            return Err(Error::contract("first and second moments track different tensors"));
        }
        Ok(())
    }

    fn check_bound(&self, params: &ParamStore) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for ((n, m), (pn, pt)) in self.first.iter().zip(params.iter()) {
            if n != pn || m.len() != pt.len() {
                return Err(Error::shape(pn, format!("optimizer moment `{n}` does not match")));
            }
        }
        Ok(())
    }
}

/// One masked Adam update. Positions where `mask` is 0 keep their value and
/// both moments bit-for-bit; the step counter advances regardless.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    mask: &BinaryMask,
) -> Result<()> {
    state.check_bound(params)?;
    mask.check_congruent(params)?;
    if grads.len() != params.len() {
        return Err(Error::contract("gradient store does not match parameters"));
    }
    for ((pn, pt), (gn, gt)) in params.iter().zip(grads.iter()) {
        if pn != gn || pt.shape() != gt.shape() {
            return Err(Error::shape(pn, format!("gradient `{gn}` {:?} vs {:?}", gt.shape(), pt.shape())));
        }
    }

    state.step += 1;
    state.moment_steps += 1;
    let AdamConfig {
        schedule,
        beta1,
        beta2,
        eps,
    } = state.config;
    let lr = schedule.lr(state.step);
    let t = state.moment_steps as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (name, tensor) in params.iter_mut() {
        let bits = mask.bits(name).expect("congruent");
        let g = grads.get(name).expect("checked").data();
        let m = state.first.get_mut(name).expect("bound");
        let v = state.second.get_mut(name).expect("bound");
        let values = tensor.data_mut();
        for i in 0..values.len() {
            if !bits[i] {
                continue;
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale `grads` in place so that the global L2 norm over masked positions is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, mask: &BinaryMask, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (name, t) in grads.iter() {
        let bits = mask.bits(name).unwrap_or(&[]);
        sq += t
            .data()
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|(g, _)| g * g)
            .sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
