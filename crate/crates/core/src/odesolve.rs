//! Explicit Runge–Kutta integration of `dz/dt = u(t, z, θ)` and gradients of
//! the solution with respect to `z(t0)` and `θ`.
//!
//! Two gradient routes are provided:
//!
//! - [`adjoint_grad`] integrates the augmented adjoint system backwards in
//!   time (optimize-then-discretize, constant memory);
//! - [`solve_on_tape`] records every solver stage on a [`Tape`] so ordinary
//!   reverse-mode differentiation applies (discretize-then-optimize).

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Classic fixed-step fourth-order Runge–Kutta.
    Rk4,
    /// Dormand–Prince 5(4) with embedded error estimate.
    Dopri5,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Initial step for dopri5, fixed step for RK4. `None` selects automatically.
    pub h0: Option<f64>,
    /// Cap on attempted steps (accepted + rejected).
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol: 1e-5,
            atol: 1e-6,
            h0: None,
            max_steps: 10_000,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn rk4(step: f64) -> Self {
        SolverConfig {
            method: Method::Rk4,
            h0: Some(step),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::contract("rtol and atol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::contract("max_steps must be positive"));
        }
        if let Some(h) = self.h0 {
            if !(h > 0.0) {
                return Err(Error::contract(format!("initial step {h} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvpResult {
    /// State at the terminal time.
    pub z: Tensor,
    pub accepted: usize,
    pub rejected: usize,
    /// Times of the accepted step boundaries, starting at `t0` and ending at `t1`.
    pub knots: Vec<f64>,
}

/// Vector-Jacobian products of a vector field at one point.
#[derive(Clone, Debug)]
pub struct Vjp {
    /// `u(t, z, θ)` itself.
    pub value: Tensor,
    /// `aᵀ ∂u/∂z`.
    pub dz: Tensor,
    /// `aᵀ ∂u/∂θ`, one tensor per parameter.
    pub dtheta: Vec<Tensor>,
}

/// A parameterized vector field `u(t, z, θ)` that can be recorded on a tape.
pub trait OdeFunc {
    /// The parameters `θ`, in a fixed order.
    fn theta(&self) -> Vec<&Tensor>;

    /// Record `u(t, z, θ)` on the tape; `theta` holds handles in [`theta`](Self::theta) order.
    fn record(&self, tape: &mut Tape, t: f64, z: Var, theta: &[Var]) -> Result<Var>;

    fn eval(&self, t: f64, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let th: Vec<Var> = self.theta().into_iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.record(&mut tape, t, zv, &th)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(&self, t: f64, z: &Tensor, a: &Tensor) -> Result<Vjp> {
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let th: Vec<Var> = self.theta().into_iter().map(|p| tape.param(p.clone())).collect();
        let out = self.record(&mut tape, t, zv, &th)?;
        let g = tape.backward_seeded(&[(out, a.clone())])?;
        Ok(Vjp {
            value: tape.value(out).clone(),
            dz: g.wrt(&tape, zv),
            dtheta: th.iter().map(|&v| g.wrt(&tape, v)).collect(),
        })
    }
}

/// `u(t, z) = z · M` for row-batched states `z: [b × n]`, `θ = {M}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub m: Tensor,
}

impl LinearField {
    /// Field `dz/dt = A z` for column states, i.e. `M = Aᵀ` on row states.
    pub fn from_system_matrix(a: &Tensor) -> Result<Self> {
        Ok(LinearField { m: a.transpose()? })
    }
}

impl OdeFunc for LinearField {
    fn theta(&self) -> Vec<&Tensor> {
        vec![&self.m]
    }

    fn record(&self, tape: &mut Tape, _t: f64, z: Var, theta: &[Var]) -> Result<Var> {
        tape.matmul(z, theta[0])
    }

    fn eval(&self, _t: f64, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.m)
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last tableau row; FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// `B5 − B4`.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince step.
#[derive(Clone, Debug)]
pub struct Dopri5Step {
    /// Fifth-order solution at `t + h`.
    pub z: Tensor,
    /// RMS of the embedded error scaled by `atol + rtol·max(|z|, |z5|)`.
    pub err: f64,
    /// `u(t + h, z5)`, reusable as the next step's first stage.
    pub k_last: Tensor,
}

fn combine(z: &Tensor, h: f64, coeffs: &[f64], ks: &[Tensor]) -> Tensor {
    let mut out = z.clone();
    let o = out.data_mut();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c == 0.0 {
            continue;
        }
        let hc = h * c;
        for (x, kv) in o.iter_mut().zip(k.data()) {
            *x += hc * kv;
        }
    }
    out
}

fn dopri5_step_with<F>(f: &mut F, z: &Tensor, t: f64, h: f64, k1: Tensor, cfg: &SolverConfig) -> Result<Dopri5Step>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let mut ks: Vec<Tensor> = Vec::with_capacity(7);
    ks.push(k1);
    for s in 1..7 {
        let zs = combine(z, h, A[s], &ks);
        let k = f(t + C[s] * h, &zs)?;
        if k.shape() != z.shape() {
            return Err(Error::Shape {
                op: "vector field",
                left: z.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        ks.push(k);
    }
    // stage 7 was evaluated at z5 itself
    let z5 = combine(z, h, &A[6][..6], &ks[..6]);
    let n = z.len().max(1) as f64;
    let mut acc = 0.0;
    for i in 0..z.len() {
        let e: f64 = h * (0..7).map(|s| E[s] * ks[s].data()[i]).sum::<f64>();
        let sc = cfg.atol + cfg.rtol * z.data()[i].abs().max(z5.data()[i].abs());
        acc += (e / sc) * (e / sc);
    }
    Ok(Dopri5Step {
        z: z5,
        err: (acc / n).sqrt(),
        k_last: ks.pop().expect("seven stages"),
    })
}

/// A single Dormand–Prince step of size `h` from `(t, z)`.
pub fn step_dopri5<F: OdeFunc + ?Sized>(
    f: &F,
    z: &Tensor,
    t: f64,
    h: f64,
    cfg: &SolverConfig,
) -> Result<Dopri5Step> {
    if h == 0.0 {
        return Err(Error::contract("step size must be nonzero"));
    }
    let k1 = f.eval(t, z)?;
    let mut call = |t: f64, z: &Tensor| f.eval(t, z);
    let step = dopri5_step_with(&mut call, z, t, h, k1, cfg)?;
    if !step.z.is_finite() {
        return Err(Error::SolverFailure { last_t: t });
    }
    Ok(step)
}

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    (v.iter().zip(scale).map(|(x, s)| (x / s) * (x / s)).sum::<f64>() / n).sqrt()
}

/// Hairer's starting-step heuristic.
fn initial_step<F>(f: &mut F, z0: &Tensor, f0: &Tensor, t0: f64, span: f64, dir: f64, cfg: &SolverConfig) -> Result<f64>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let fallback = span / 100.0;
    let sc: Vec<f64> = z0.data().iter().map(|z| cfg.atol + cfg.rtol * z.abs()).collect();
    let d0 = rms_scaled(z0.data(), &sc);
    let d1 = rms_scaled(f0.data(), &sc);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let mut z1 = z0.clone();
    z1.axpy(dir * h0, f0)?;
    let f1 = f(t0 + dir * h0, &z1)?;
    let diff: Vec<f64> = f1.data().iter().zip(f0.data()).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &sc) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let h = (100.0 * h0).min(h1).min(span);
    Ok(if h.is_finite() && h > 0.0 { h } else { fallback })
}

/// Integrate a closure-defined field from `t0` to `t1` (either direction).
pub fn integrate<F>(mut f: F, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<IvpResult>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    if !z0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::contract(format!("non-finite horizon [{t0}, {t1}]")));
    }
    if t0 == t1 {
        return Ok(IvpResult {
            z: z0.clone(),
            accepted: 0,
            rejected: 0,
            knots: vec![t0],
        });
    }
    match cfg.method {
        Method::Rk4 => integrate_rk4(&mut f, z0, t0, t1, cfg),
        Method::Dopri5 => integrate_dopri5(&mut f, z0, t0, t1, cfg),
    }
}

fn rk4_grid(t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let span = (t1 - t0).abs();
    let h = cfg.h0.unwrap_or(span / 100.0);
    let n = (span / h).ceil().max(1.0) as usize;
    if n > cfg.max_steps {
        return Err(Error::Stiffness { t: t0, h });
    }
    let mut knots: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / n as f64).collect();
    knots.push(t1);
    Ok(knots)
}

fn integrate_rk4<F>(f: &mut F, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<IvpResult>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let knots = rk4_grid(t0, t1, cfg)?;
    let mut z = z0.clone();
    for w in knots.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k1 = f(t, &z)?;
        let k2 = f(t + h / 2.0, &combine(&z, h / 2.0, &[1.0], std::slice::from_ref(&k1)))?;
        let k3 = f(t + h / 2.0, &combine(&z, h / 2.0, &[1.0], std::slice::from_ref(&k2)))?;
        let k4 = f(t + h, &combine(&z, h, &[1.0], std::slice::from_ref(&k3)))?;
        z = combine(&z, h / 6.0, &[1.0, 2.0, 2.0, 1.0], &[k1, k2, k3, k4]);
        if !z.is_finite() {
            return Err(Error::SolverFailure { last_t: t });
        }
    }
    Ok(IvpResult {
        z,
        accepted: knots.len() - 1,
        rejected: 0,
        knots,
    })
}

fn integrate_dopri5<F>(f: &mut F, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<IvpResult>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    const BETA: f64 = 0.04;
    const EXPO: f64 = 0.2 - 0.75 * BETA;
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();

    let mut z = z0.clone();
    let mut t = t0;
    let mut k1 = f(t, &z)?;
    let mut h = match cfg.h0 {
        Some(h) => h.min(span),
        None => initial_step(f, &z, &k1, t0, span, dir, cfg)?,
    };
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut knots = vec![t0];

    loop {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::Stiffness { t, h });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        let h_try = if last { remaining } else { h };
        let step = dopri5_step_with(f, &z, t, dir * h_try, k1.clone(), cfg)?;
        if !step.z.is_finite() || !step.err.is_finite() {
            return Err(Error::SolverFailure { last_t: t });
        }
        if step.err <= 1.0 {
            accepted += 1;
            t = if last { t1 } else { t + dir * h_try };
            z = step.z;
            k1 = step.k_last;
            knots.push(t);
            if last {
                break;
            }
            let mut factor = cfg.safety * step.err.powf(-EXPO) * err_prev.powf(BETA);
            if !factor.is_finite() {
                factor = 5.0;
            }
            factor = factor.clamp(0.2, 5.0);
            if last_rejected {
                factor = factor.min(1.0);
            }
            err_prev = step.err.max(1e-4);
            h = h_try * factor;
            last_rejected = false;
        } else {
            rejected += 1;
            let factor = (cfg.safety * step.err.powf(-0.2)).clamp(0.2, 1.0);
            h = h_try * factor;
            last_rejected = true;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::Stiffness { t, h });
        }
    }
    Ok(IvpResult {
        z,
        accepted,
        rejected,
        knots,
    })
}

/// Solve the initial value problem `ż = u(t, z, θ)`, `z(t0) = z0`, to `t1`.
///
/// `t1 < t0` integrates backwards in time. `t0 == t1` returns `z0` unchanged.
pub fn solve_ivp<F: OdeFunc + ?Sized>(
    f: &F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<IvpResult> {
    integrate(|t, z| f.eval(t, z), z0, t0, t1, cfg)
}

/// Gradients returned by the adjoint method.
#[derive(Clone, Debug)]
pub struct AdjointGrads {
    pub dz0: Tensor,
    pub dtheta: Vec<Tensor>,
    /// Backward-pass solver statistics.
    pub accepted: usize,
    pub rejected: usize,
}

/// Adjoint sensitivities of a loss `L(z(t1))` given `dL/dz(t1)`.
///
/// Recomputes `z(t1)` by a forward solve, then integrates
/// `[z, a, g]` backwards from `t1` to `t0` with `a(t1) = dL/dz1`,
/// `ȧ = −aᵀ ∂u/∂z`, `ġ = −aᵀ ∂u/∂θ`, `g(t1) = 0`.
pub fn adjoint_grad<F: OdeFunc + ?Sized>(
    f: &F,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    dl_dz1: &Tensor,
    cfg: &SolverConfig,
) -> Result<AdjointGrads> {
    let forward = solve_ivp(f, z0, t0, t1, cfg)?;
    adjoint_grad_from(f, &forward.z, t0, t1, dl_dz1, cfg)
}

/// [`adjoint_grad`] starting from an already known terminal state `z1 = z(t1)`.
pub fn adjoint_grad_from<F: OdeFunc + ?Sized>(
    f: &F,
    z1: &Tensor,
    t0: f64,
    t1: f64,
    dl_dz1: &Tensor,
    cfg: &SolverConfig,
) -> Result<AdjointGrads> {
    z1.check_same_shape(dl_dz1, "adjoint seed")?;
    let theta_shapes: Vec<Vec<usize>> = f.theta().iter().map(|p| p.shape().to_vec()).collect();
    let n = z1.len();
    if t0 == t1 {
        return Ok(AdjointGrads {
            dz0: dl_dz1.clone(),
            dtheta: theta_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            accepted: 0,
            rejected: 0,
        });
    }
    let p: usize = theta_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut aug = Vec::with_capacity(2 * n + p);
    aug.extend_from_slice(z1.data());
    aug.extend_from_slice(dl_dz1.data());
    aug.resize(2 * n + p, 0.0);
    let aug0 = Tensor::new(vec![2 * n + p], aug)?;
    let zshape = z1.shape().to_vec();

    let field = |t: f64, s: &Tensor| -> Result<Tensor> {
        let d = s.data();
        let z = Tensor::new(zshape.clone(), d[..n].to_vec())?;
        let a = Tensor::new(zshape.clone(), d[n..2 * n].to_vec())?;
        let v = f.vjp(t, &z, &a)?;
        let mut out = Vec::with_capacity(d.len());
        out.extend_from_slice(v.value.data());
        out.extend(v.dz.data().iter().map(|x| -x));
        for g in &v.dtheta {
            out.extend(g.data().iter().map(|x| -x));
        }
        Tensor::new(vec![d.len()], out)
    };
    let back = integrate(field, &aug0, t1, t0, cfg)?;
    let d = back.z.data();
    let dz0 = Tensor::new(zshape.clone(), d[n..2 * n].to_vec())?;
    let mut dtheta = Vec::with_capacity(theta_shapes.len());
    let mut off = 2 * n;
    for s in theta_shapes {
        let len: usize = s.iter().product();
        dtheta.push(Tensor::new(s, d[off..off + len].to_vec())?);
        off += len;
    }
    Ok(AdjointGrads {
        dz0,
        dtheta,
        accepted: back.accepted,
        rejected: back.rejected,
    })
}

fn record_combine(tape: &mut Tape, z: Var, h: f64, coeffs: &[f64], ks: &[Var]) -> Result<Var> {
    let mut acc = z;
    for (c, &k) in coeffs.iter().zip(ks) {
        if *c == 0.0 {
            continue;
        }
        let s = tape.scale(k, h * c);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Record the numerical solution on the tape (discretize-then-differentiate).
///
/// RK4 uses its fixed grid; dopri5 first finds its accepted step sizes with an
/// untaped solve and then replays those fifth-order steps on the tape, treating
/// the step sizes as constants.
pub fn solve_on_tape<F: OdeFunc + ?Sized>(
    tape: &mut Tape,
    f: &F,
    z0: Var,
    theta: &[Var],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Var> {
    cfg.validate()?;
    if t0 == t1 {
        return Ok(z0);
    }
    let knots = match cfg.method {
        Method::Rk4 => rk4_grid(t0, t1, cfg)?,
        Method::Dopri5 => solve_ivp(f, tape.value(z0), t0, t1, cfg)?.knots,
    };
    let mut z = z0;
    for w in knots.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        z = match cfg.method {
            Method::Rk4 => {
                let k1 = f.record(tape, t, z, theta)?;
                let z2 = record_combine(tape, z, h / 2.0, &[1.0], &[k1])?;
                let k2 = f.record(tape, t + h / 2.0, z2, theta)?;
                let z3 = record_combine(tape, z, h / 2.0, &[1.0], &[k2])?;
                let k3 = f.record(tape, t + h / 2.0, z3, theta)?;
                let z4 = record_combine(tape, z, h, &[1.0], &[k3])?;
                let k4 = f.record(tape, t + h, z4, theta)?;
                record_combine(tape, z, h / 6.0, &[1.0, 2.0, 2.0, 1.0], &[k1, k2, k3, k4])?
            }
            Method::Dopri5 => {
                let mut ks = Vec::with_capacity(6);
                ks.push(f.record(tape, t, z, theta)?);
                for s in 1..6 {
                    let zs = record_combine(tape, z, h, A[s], &ks)?;
                    ks.push(f.record(tape, t + C[s] * h, zs, theta)?);
                }
                record_combine(tape, z, h, &B5[..6], &ks)?
            }
        };
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, FRAC_PI_2};

    fn scalar_field(a: f64) -> LinearField {
        LinearField {
            m: Tensor::from_rows(&[vec![a]]).unwrap(),
        }
    }

    fn rotation() -> LinearField {
        let a = Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        LinearField::from_system_matrix(&a).unwrap()
    }

    /// `u = tanh(tanh([z, t]·W1 + b1)·W2 + b2)`.
    struct TanhField {
        theta: Vec<Tensor>,
    }

    impl TanhField {
        fn random(dim: usize, hidden: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TanhField {
                theta: vec![
                    Tensor::randn(&[dim + 1, hidden], 0.6, &mut rng),
                    Tensor::randn(&[hidden], 0.3, &mut rng),
                    Tensor::randn(&[hidden, dim], 0.6, &mut rng),
                    Tensor::randn(&[dim], 0.3, &mut rng),
                ],
            }
        }
    }

    impl OdeFunc for TanhField {
        fn theta(&self) -> Vec<&Tensor> {
            self.theta.iter().collect()
        }

        fn record(&self, tape: &mut Tape, t: f64, z: Var, th: &[Var]) -> Result<Var> {
            let rows = tape.value(z).dims2()?.0;
            let tc = tape.constant(Tensor::full(&[rows, 1], t));
            let x = tape.concat_cols(z, tc)?;
            let h = tape.matmul(x, th[0])?;
            let h = tape.add_bias(h, th[1])?;
            let h = tape.act(Activation::Tanh, h);
            let o = tape.matmul(h, th[2])?;
            let o = tape.add_bias(o, th[3])?;
            Ok(tape.act(Activation::Tanh, o))
        }
    }

    #[test]
    fn zero_field_step_is_identity() {
        let z = Tensor::row(&[0.3, -1.2]);
        let f = LinearField { m: Tensor::zeros(&[2, 2]) };
        let s = step_dopri5(&f, &z, 0.0, 0.1, &SolverConfig::default()).unwrap();
        assert_eq!(s.z, z);
        assert_eq!(s.err, 0.0);
    }

    #[test]
    fn single_step_matches_exponential() {
        let s = step_dopri5(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 0.1, &SolverConfig::default()).unwrap();
        assert!((s.z.data()[0] - 0.1f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn local_error_estimate_is_fifth_order() {
        let cfg = SolverConfig::dopri5(1e-12, 1e-12);
        let f = scalar_field(1.0);
        let z = Tensor::row(&[1.0]);
        let hs = [0.2, 0.1, 0.05];
        let errs: Vec<f64> = hs.iter().map(|&h| step_dopri5(&f, &z, 0.0, h, &cfg).unwrap().err).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 5.0).abs() < 0.3, "order {order}");
        }
    }

    #[test]
    fn zero_step_is_rejected() {
        assert!(step_dopri5(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 0.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn exponential_growth() {
        let r = solve_ivp(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 1.0, &SolverConfig::dopri5(1e-7, 1e-9)).unwrap();
        assert!((r.z.data()[0] - E).abs() < 1e-6);
        assert_eq!(*r.knots.last().unwrap(), 1.0);
        assert_eq!(r.knots.len(), r.accepted + 1);
    }

    #[test]
    fn rotation_quarter_turn() {
        let r = solve_ivp(&rotation(), &Tensor::row(&[1.0, 0.0]), 0.0, FRAC_PI_2, &SolverConfig::default()).unwrap();
        assert!(r.z.data()[0].abs() < 1e-5);
        assert!((r.z.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_horizon_is_bit_identical() {
        let z0 = Tensor::row(&[0.1, 0.2, 0.3]);
        let f = LinearField { m: Tensor::identity(3) };
        let r = solve_ivp(&f, &z0, 0.7, 0.7, &SolverConfig::default()).unwrap();
        assert_eq!(r.z, z0);
    }

    #[test]
    fn rk4_fixed_grid() {
        let r = solve_ivp(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 1.0, &SolverConfig::rk4(0.01)).unwrap();
        assert_eq!(r.accepted, 100);
        assert!((r.z.data()[0] - E).abs() < 1e-9);
    }

    #[test]
    fn accuracy_improves_with_tolerance() {
        let errs: Vec<f64> = [1e-3, 1e-5, 1e-7, 1e-9]
            .iter()
            .map(|&tol| {
                let r = solve_ivp(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 1.0, &SolverConfig::dopri5(tol, tol)).unwrap();
                (r.z.data()[0] - E).abs()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn step_limit_reports_stiffness() {
        let cfg = SolverConfig {
            max_steps: 3,
            ..SolverConfig::dopri5(1e-10, 1e-10)
        };
        let err = solve_ivp(&scalar_field(-50.0), &Tensor::row(&[1.0]), 0.0, 10.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Stiffness { .. }), "{err}");
    }

    #[test]
    fn nonfinite_state_fails() {
        let r = integrate(|_, z: &Tensor| Ok(z.map(|_| f64::NAN)), &Tensor::row(&[1.0]), 0.0, 1.0, &SolverConfig::default());
        assert!(matches!(r, Err(Error::SolverFailure { .. })));
    }

    #[test]
    fn forward_then_backward_returns_start() {
        let f = TanhField::random(3, 8, 4);
        let z0 = Tensor::row(&[0.2, -0.4, 0.9]);
        let cfg = SolverConfig::dopri5(1e-10, 1e-10);
        let fwd = solve_ivp(&f, &z0, 0.0, 1.5, &cfg).unwrap();
        let back = solve_ivp(&f, &fwd.z, 1.5, 0.0, &cfg).unwrap();
        for (a, b) in back.z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_field_is_homogeneous() {
        let f = rotation();
        let z0 = Tensor::row(&[0.3, -0.8]);
        let cfg = SolverConfig::dopri5(1e-9, 1e-12);
        let a = solve_ivp(&f, &z0, 0.0, 2.0, &cfg).unwrap().z;
        let b = solve_ivp(&f, &z0.scale(3.5), 0.0, 2.0, &cfg).unwrap().z;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((3.5 * x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn adjoint_scalar_exponential() {
        let cfg = SolverConfig::dopri5(1e-9, 1e-12);
        let g = adjoint_grad(&scalar_field(1.0), &Tensor::row(&[1.0]), 0.0, 1.0, &Tensor::row(&[1.0]), &cfg).unwrap();
        assert!((g.dz0.data()[0] - E).abs() < 1e-6);
        assert!((g.dtheta[0].data()[0] - E).abs() < 1e-6);
    }

    /// `u ≡ 0` regardless of its (unused) parameter.
    struct NullField {
        theta: Tensor,
    }

    impl OdeFunc for NullField {
        fn theta(&self) -> Vec<&Tensor> {
            vec![&self.theta]
        }

        fn record(&self, tape: &mut Tape, _t: f64, z: Var, _th: &[Var]) -> Result<Var> {
            Ok(tape.scale(z, 0.0))
        }
    }

    #[test]
    fn adjoint_of_zero_field() {
        let f = NullField { theta: Tensor::row(&[1.0, 2.0, 3.0]) };
        let seed = Tensor::row(&[0.5, -2.0]);
        let g = adjoint_grad(&f, &Tensor::row(&[1.0, 1.0]), 0.0, 1.0, &seed, &SolverConfig::default()).unwrap();
        assert_eq!(g.dz0, seed);
        assert_eq!(g.dtheta[0], Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn adjoint_of_linear_field_at_zero_matrix() {
        // z and a stay constant, so dL/dM = (t1 - t0) · z0ᵀ a
        let f = LinearField { m: Tensor::zeros(&[2, 2]) };
        let z0 = Tensor::row(&[1.0, 3.0]);
        let seed = Tensor::row(&[0.5, -2.0]);
        let g = adjoint_grad(&f, &z0, 0.0, 2.0, &seed, &SolverConfig::default()).unwrap();
        assert_eq!(g.dz0, seed);
        let expect = z0.transpose().unwrap().matmul(&seed).unwrap().scale(2.0);
        assert!(g.dtheta[0].sub(&expect).unwrap().max_abs() < 1e-12);
    }

    fn loss_of(f: &TanhField, z0: &Tensor, w: &Tensor, cfg: &SolverConfig) -> f64 {
        solve_ivp(f, z0, 0.0, 1.2, cfg).unwrap().z.dot(w).unwrap()
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let cfg = SolverConfig::dopri5(1e-8, 1e-10);
        let mut f = TanhField::random(3, 6, 8);
        let z0 = Tensor::row(&[0.5, -0.3, 0.1]);
        let w = Tensor::row(&[1.0, -0.5, 2.0]);
        let g = adjoint_grad(&f, &z0, 0.0, 1.2, &w, &cfg).unwrap();
        let eps = 1e-5;
        for i in 0..3 {
            let mut zp = z0.clone();
            zp.data_mut()[i] += eps;
            let mut zm = z0.clone();
            zm.data_mut()[i] -= eps;
            let fd = (loss_of(&f, &zp, &w, &cfg) - loss_of(&f, &zm, &w, &cfg)) / (2.0 * eps);
            let an = g.dz0.data()[i];
            assert!((fd - an).abs() / fd.abs().max(1e-3) < 1e-3, "dz0[{i}] fd {fd} adjoint {an}");
        }
        for p in 0..4 {
            for j in [0usize, 1] {
                let orig = f.theta[p].data()[j];
                f.theta[p].data_mut()[j] = orig + eps;
                let lp = loss_of(&f, &z0, &w, &cfg);
                f.theta[p].data_mut()[j] = orig - eps;
                let lm = loss_of(&f, &z0, &w, &cfg);
                f.theta[p].data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = g.dtheta[p].data()[j];
                assert!((fd - an).abs() / fd.abs().max(1e-3) < 1e-3, "theta[{p}][{j}] fd {fd} adjoint {an}");
            }
        }
    }

    #[test]
    fn adjoint_agrees_with_backprop_through_rk4() {
        let f = TanhField::random(2, 5, 21);
        let z0 = Tensor::from_rows(&[vec![0.4, -0.7], vec![-0.1, 0.3]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.5, 0.25]]).unwrap();
        let adj = adjoint_grad(&f, &z0, 0.0, 1.0, &w, &SolverConfig::dopri5(1e-9, 1e-11)).unwrap();

        let mut tape = Tape::new();
        let zv = tape.param(z0.clone());
        let th: Vec<Var> = f.theta.iter().map(|p| tape.param(p.clone())).collect();
        let z1 = solve_on_tape(&mut tape, &f, zv, &th, 0.0, 1.0, &SolverConfig::rk4(0.01)).unwrap();
        let g = tape.backward_seeded(&[(z1, w.clone())]).unwrap();
        let rel = |a: &Tensor, b: &Tensor| a.sub(b).unwrap().norm() / b.norm().max(1e-12);
        assert!(rel(&adj.dz0, &g.wrt(&tape, zv)) < 1e-3);
        for (p, &v) in th.iter().enumerate() {
            assert!(rel(&adj.dtheta[p], &g.wrt(&tape, v)) < 1e-3, "param {p}");
        }
    }

    #[test]
    fn dopri5_replay_on_tape_matches_untaped_solve() {
        let f = TanhField::random(3, 4, 2);
        let z0 = Tensor::row(&[0.1, 0.2, -0.3]);
        let cfg = SolverConfig::default();
        let plain = solve_ivp(&f, &z0, 0.0, 0.8, &cfg).unwrap();
        let mut tape = Tape::new();
        let zv = tape.param(z0);
        let th: Vec<Var> = f.theta.iter().map(|p| tape.constant(p.clone())).collect();
        let z1 = solve_on_tape(&mut tape, &f, zv, &th, 0.0, 0.8, &cfg).unwrap();
        for (a, b) in tape.value(z1).data().iter().zip(plain.z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
