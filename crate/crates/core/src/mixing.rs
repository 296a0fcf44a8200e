//! Beta-distributed mixing coefficients, the mixing operator, eligible-layer
//! selection and fractional one-hot soft labels.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::NUM_GRADES;

/// The α grid searched for every mixing method.
pub const ALPHA_GRID: [f64; 7] = [0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0];

/// One draw of the mixing coefficient and the layer to mix at.
///
/// `layer_k == 0` mixes raw inputs; `k > 0` mixes the output of encoder layer `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixDraw {
    pub lambda: f64,
    pub layer_k: usize,
    pub alpha: f64,
}

impl MixDraw {
    pub fn new(lambda: f64, layer_k: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(MixDraw {
            lambda,
            layer_k,
            alpha,
        })
    }

    pub fn sample<R: Rng + ?Sized>(alpha: f64, eligible: &[usize], rng: &mut R) -> Result<Self> {
        let lambda = sample_lambda(alpha, rng)?;
        let layer_k = select_mix_layer(eligible, rng)?;
        Ok(MixDraw {
            lambda,
            layer_k,
            alpha,
        })
    }

    /// `Mix_λ(t_i, t_ip1)`.
    pub fn t_mix(&self, t_i: f64, t_ip1: f64) -> f64 {
        mix_scalar(t_i, t_ip1, self.lambda)
    }
}

/// Draw `λ ~ Beta(α, α)` as `X / (X + Y)` with `X, Y ~ Gamma(α, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::contract(format!("Beta concentration {alpha} must be > 0")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    let x: f64 = gamma.sample(rng);
    let y: f64 = gamma.sample(rng);
    let total = x + y;
    if total <= 0.0 {
        // both draws underflowed; the two are exchangeable
        return Ok(if rng.random_bool(0.5) { 0.0 } else { 1.0 });
    }
    Ok((x / total).clamp(0.0, 1.0))
}

/// `Mix_λ(a, b) = λ·a + (1−λ)·b`.
///
/// Evaluated as an offset from the heavier endpoint so that `mix(a, a, λ) = a`
/// and `mix(a, b, λ) = mix(b, a, 1−λ)` hold bit-exactly. `λ < 0.5` is first
/// replaced by `1 − (1 − λ)`, the complement of the rounded `1 − λ`.
pub fn mix_scalar(a: f64, b: f64, lambda: f64) -> f64 {
    let lambda = if lambda < 0.5 { 1.0 - (1.0 - lambda) } else { lambda };
    if lambda > 0.5 {
        a + (1.0 - lambda) * (b - a)
    } else if lambda < 0.5 {
        b + lambda * (a - b)
    } else {
        0.5 * a + 0.5 * b
    }
}

/// `λ·a + (1−λ)·b` on plain tensors.
pub fn mix_tensors(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    a.zip_map(b, |x, y| mix_scalar(x, y, lambda))
}

/// `λ·a + (1−λ)·b` recorded on the tape, differentiable in both inputs.
pub fn mix(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var> {
    tape.value(a).check_same_shape(tape.value(b), "mix")?;
    let lambda = if lambda < 0.5 { 1.0 - (1.0 - lambda) } else { lambda };
    if lambda > 0.5 {
        let d = tape.sub(b, a)?;
        let d = tape.scale(d, 1.0 - lambda);
        tape.add(a, d)
    } else if lambda < 0.5 {
        let d = tape.sub(a, b)?;
        let d = tape.scale(d, lambda);
        tape.add(b, d)
    } else {
        let sa = tape.scale(a, 0.5);
        let sb = tape.scale(b, 0.5);
        tape.add(sa, sb)
    }
}

/// Row-wise mix with one coefficient per sample (`lambdas` has one entry per row).
pub fn mix_rows(tape: &mut Tape, a: Var, b: Var, lambdas: &[f64]) -> Result<Var> {
    tape.value(a).check_same_shape(tape.value(b), "mix_rows")?;
    let l = tape.constant(Tensor::column(lambdas));
    let one_minus: Vec<f64> = lambdas.iter().map(|x| 1.0 - x).collect();
    let r = tape.constant(Tensor::column(&one_minus));
    let sa = tape.mul_column(a, l)?;
    let sb = tape.mul_column(b, r)?;
    tape.add(sa, sb)
}

/// Uniform draw from the eligible layer set.
pub fn select_mix_layer<R: Rng + ?Sized>(eligible: &[usize], rng: &mut R) -> Result<usize> {
    if eligible.is_empty() {
        return Err(Error::contract("eligible layer set is empty"));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Probabilities over the five grades.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLabel(pub [f64; NUM_GRADES]);

impl SoftLabel {
    pub fn one_hot(grade: usize) -> Self {
        let mut p = [0.0; NUM_GRADES];
        p[grade.min(NUM_GRADES - 1)] = 1.0;
        SoftLabel(p)
    }

    pub fn probs(&self) -> &[f64; NUM_GRADES] {
        &self.0
    }
}

/// Fractional one-hot: weight `1 − frac` on `⌊v⌋` and `frac` on `⌈v⌉`.
///
/// Values outside `[0, 4]` are clamped with a warning.
pub fn soft_label(severity: f64) -> SoftLabel {
    let max = (NUM_GRADES - 1) as f64;
    let v = if severity.is_nan() {
        log::warn!("soft_label: NaN severity mapped to grade 0");
        0.0
    } else if !(0.0..=max).contains(&severity) {
        log::warn!("soft_label: severity {severity} clamped to [0, {max}]");
        severity.clamp(0.0, max)
    } else {
        severity
    };
    let lo = v.floor();
    let frac = v - lo;
    let mut p = [0.0; NUM_GRADES];
    let lo = lo as usize;
    if frac == 0.0 {
        p[lo] = 1.0;
    } else {
        p[lo] = 1.0 - frac;
        p[lo + 1] = frac;
    }
    SoftLabel(p)
}
