use std::f64::consts::PI;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fraction of the schedule spent warming up.
pub const ONECYCLE_WARMUP: f64 = 0.3;
/// Initial learning rate is `max_lr / ONECYCLE_DIV`.
pub const ONECYCLE_DIV: f64 = 25.0;
/// Final learning rate is `max_lr / ONECYCLE_FINAL_DIV`.
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

/// AdamW moments and hyper-parameters.
#[derive(Clone, Debug)]
pub struct OptimState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-parameter learning-rate multiplier; `0.0` freezes a parameter.
    lr_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; nothing was updated.
    Skipped { param: String },
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_scale: vec![1.0; params.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = scale;
    }

    pub fn lr_scale(&self, index: usize) -> f64 {
        self.lr_scale[index]
    }
}

/// One AdamW update with decoupled weight decay.
///
/// `w ← w − lr·wd·w`, then the bias-corrected Adam step. A non-finite gradient
/// anywhere skips the whole update (moments and step counter untouched).
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        params.get(id).check_same_shape(g, "adamw_step")?;
        if !g.is_finite() {
            return Ok(StepOutcome::Skipped {
                param: params.name(id).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);

    for (i, id) in params.ids().enumerate().collect::<Vec<_>>() {
        let lr = state.lr * state.lr_scale[i];
        if lr == 0.0 {
            continue;
        }
        let w = params.get_mut(id).data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..w.len() {
            w[j] -= lr * wd * w[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// One-cycle learning rate: cosine warmup from `max_lr/25` to `max_lr` over
/// the first 30 % of steps, then cosine anneal to `max_lr/1e4`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "onecycle step {step} beyond total {total_steps}"
        )));
    }
    let initial = max_lr / ONECYCLE_DIV;
    let last = max_lr / ONECYCLE_FINAL_DIV;
    if total_steps == 0 {
        return Ok(initial);
    }
    let warm = ONECYCLE_WARMUP * total_steps as f64;
    let s = step as f64;
    let cos_interp = |from: f64, to: f64, pct: f64| to + (from - to) / 2.0 * (1.0 + (PI * pct).cos());
    if s <= warm {
        let pct = if warm > 0.0 { s / warm } else { 1.0 };
        Ok(cos_interp(initial, max_lr, pct))
    } else {
        let pct = (s - warm) / (total_steps as f64 - warm);
        Ok(cos_interp(max_lr, last, pct))
    }
}
