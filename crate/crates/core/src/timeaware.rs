//! Time-aware latent propagators: a Neural ODE and a time-modulated LSTM cell.
//!
//! Both take a batch of latents `z_ti: [b × D]` with a per-row start time and
//! target time (or elapsed time) and return the predicted latents `[b × D]`.

use std::f64::consts::E;

use rand::Rng;

use crate::diffcore::{Activation, Bound, Linear, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::odesolve::{adjoint_grad_from, solve_ivp, solve_on_tape, OdeFunc, SolverConfig};

/// How gradients flow through the ODE solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradMode {
    /// Backward augmented ODE, constant memory.
    Adjoint,
    /// Replay the solver steps on the tape.
    Backprop,
}

impl GradMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(GradMode::Adjoint),
            "backprop" => Ok(GradMode::Backprop),
            other => Err(Error::contract(format!("unknown gradient mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradMode::Adjoint => "adjoint",
            GradMode::Backprop => "backprop",
        }
    }
}

/// `u(t, z) = σ2(σ1([z, t]·W1 + b1)·W2 + b2)`, both activations `tanh` by default.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDynamics {
    pub l1: Linear,
    pub l2: Linear,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl NodeDynamics {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        latent_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        NodeDynamics {
            l1: Linear::new(params, "node.l1", latent_dim + 1, hidden_dim, rng),
            l2: Linear::new(params, "node.l2", hidden_dim, latent_dim, rng),
            latent_dim,
            hidden_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.l1.weight, self.l1.bias, self.l2.weight, self.l2.bias]
    }

    /// Zero the output layer so that `u ≡ 0`.
    pub fn zero_output(&self, params: &mut ParamSet) {
        for id in [self.l2.weight, self.l2.bias] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Record `u(t, z)` for a column of physical times `t: [b × 1]`.
    /// `theta` is `[W1, b1, W2, b2]`.
    pub fn record(&self, tape: &mut Tape, t: Var, z: Var, theta: &[Var]) -> Result<Var> {
        let x = tape.concat_cols(z, t)?;
        let h = tape.matmul(x, theta[0])?;
        let h = tape.add_bias(h, theta[1])?;
        let h = tape.act(self.hidden_activation, h);
        let o = tape.matmul(h, theta[2])?;
        let o = tape.add_bias(o, theta[3])?;
        Ok(tape.act(self.output_activation, o))
    }
}

/// The batch ODE in rescaled time `s ∈ [0, 1]`:
/// `dz_r/ds = Δ_r · u(t_r + s·Δ_r, z_r)` for every row `r`.
pub struct HorizonField<'a> {
    dynamics: &'a NodeDynamics,
    theta: Vec<&'a Tensor>,
    start: Vec<f64>,
    span: Tensor,
}

impl<'a> HorizonField<'a> {
    pub fn new(dynamics: &'a NodeDynamics, params: &'a ParamSet, t_i: &[f64], t_target: &[f64]) -> Result<Self> {
        if t_i.len() != t_target.len() {
            return Err(Error::contract(format!(
                "{} start times but {} target times",
                t_i.len(),
                t_target.len()
            )));
        }
        let mut span = Vec::with_capacity(t_i.len());
        for (r, (&a, &b)) in t_i.iter().zip(t_target).enumerate() {
            if !(b >= a) || !a.is_finite() || !b.is_finite() {
                return Err(Error::contract(format!("row {r}: target time {b} before start {a}")));
            }
            span.push(b - a);
        }
        Ok(HorizonField {
            dynamics,
            theta: dynamics.param_ids().iter().map(|&id| params.get(id)).collect(),
            start: t_i.to_vec(),
            span: Tensor::column(&span),
        })
    }

    fn is_trivial(&self) -> bool {
        self.span.data().iter().all(|&d| d == 0.0)
    }
}

impl OdeFunc for HorizonField<'_> {
    fn theta(&self) -> Vec<&Tensor> {
        self.theta.clone()
    }

    fn record(&self, tape: &mut Tape, s: f64, z: Var, theta: &[Var]) -> Result<Var> {
        let t: Vec<f64> = self
            .start
            .iter()
            .zip(self.span.data())
            .map(|(a, d)| a + s * d)
            .collect();
        let tv = tape.constant(Tensor::column(&t));
        let u = self.dynamics.record(tape, tv, z, theta)?;
        let span = tape.constant(self.span.clone());
        tape.mul_column(u, span)
    }
}

fn check_rows(z: &Tensor, rows: usize, dim: usize) -> Result<()> {
    let (b, d) = z.dims2()?;
    if b != rows || d != dim {
        return Err(Error::Shape {
            op: "time-aware input",
            left: vec![b, d],
            right: vec![rows, dim],
        });
    }
    Ok(())
}

/// Solve every row from `t_i[r]` to `t_target[r]`.
pub fn node_forward(
    dynamics: &NodeDynamics,
    params: &ParamSet,
    z: &Tensor,
    t_i: &[f64],
    t_target: &[f64],
    cfg: &SolverConfig,
) -> Result<Tensor> {
    let field = HorizonField::new(dynamics, params, t_i, t_target)?;
    check_rows(z, t_i.len(), dynamics.latent_dim)?;
    if field.is_trivial() {
        return Ok(z.clone());
    }
    Ok(solve_ivp(&field, z, 0.0, 1.0, cfg)?.z)
}

/// [`node_forward`] recorded on the tape, differentiable by ordinary backprop.
#[allow(clippy::too_many_arguments)]
pub fn node_forward_on_tape(
    tape: &mut Tape,
    dynamics: &NodeDynamics,
    params: &ParamSet,
    bound: &Bound,
    z: Var,
    t_i: &[f64],
    t_target: &[f64],
    cfg: &SolverConfig,
) -> Result<Var> {
    let field = HorizonField::new(dynamics, params, t_i, t_target)?;
    check_rows(tape.value(z), t_i.len(), dynamics.latent_dim)?;
    if field.is_trivial() {
        return Ok(z);
    }
    let theta: Vec<Var> = dynamics.param_ids().iter().map(|&id| bound.var(id)).collect();
    solve_on_tape(tape, &field, z, &theta, 0.0, 1.0, cfg)
}

/// Adjoint gradients of a loss through [`node_forward`].
#[derive(Clone, Debug)]
pub struct NodeGrads {
    pub dz0: Tensor,
    /// Gradients of the dynamics parameters, paired with their ids.
    pub dtheta: Vec<(ParamId, Tensor)>,
}

/// Pull `dL/dz1` back through the solve, given the forward result `z1`.
pub fn node_adjoint(
    dynamics: &NodeDynamics,
    params: &ParamSet,
    z1: &Tensor,
    t_i: &[f64],
    t_target: &[f64],
    dl_dz1: &Tensor,
    cfg: &SolverConfig,
) -> Result<NodeGrads> {
    let field = HorizonField::new(dynamics, params, t_i, t_target)?;
    let ids = dynamics.param_ids();
    if field.is_trivial() {
        return Ok(NodeGrads {
            dz0: dl_dz1.clone(),
            dtheta: ids.iter().map(|&id| (id, Tensor::zeros(params.get(id).shape()))).collect(),
        });
    }
    let g = adjoint_grad_from(&field, z1, 0.0, 1.0, dl_dz1, cfg)?;
    Ok(NodeGrads {
        dz0: g.dz0,
        dtheta: ids.into_iter().zip(g.dtheta).collect(),
    })
}

/// Elapsed-time discount `g(Δt) = 1 / ln(e + Δt)`.
pub fn decay(delta_t: f64) -> Result<f64> {
    if !(delta_t >= 0.0) {
        return Err(Error::contract(format!("elapsed time {delta_t} must be >= 0")));
    }
    Ok(1.0 / (E + delta_t).ln())
}

/// Time-aware LSTM cell with short-term memory decomposition.
///
/// From state `(h, C) = (z, z)` and input `z`:
///
/// ```text
/// C_S = tanh(C·W_d + b_d)
/// C*  = C − C_S + g(Δt)·C_S
/// f, i, o = σ([z, h]·W_{f,i,o} + b_{f,i,o}),  C̃ = tanh([z, h]·W_c + b_c)
/// C'  = f ⊙ C* + i ⊙ C̃,  h' = o ⊙ tanh(C')
/// out = h'·W_out + b_out
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct TLstmCell {
    pub decomp: Linear,
    pub forget: Linear,
    pub input: Linear,
    pub output: Linear,
    pub candidate: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl TLstmCell {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, dim: usize, rng: &mut R) -> Self {
        TLstmCell {
            decomp: Linear::new(params, "tlstm.decomp", dim, dim, rng),
            forget: Linear::new(params, "tlstm.forget", 2 * dim, dim, rng),
            input: Linear::new(params, "tlstm.input", 2 * dim, dim, rng),
            output: Linear::new(params, "tlstm.output", 2 * dim, dim, rng),
            candidate: Linear::new(params, "tlstm.candidate", 2 * dim, dim, rng),
            out: Linear::new(params, "tlstm.out", dim, dim, rng),
            dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.decomp, self.forget, self.input, self.output, self.candidate, self.out]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Propagate each row of `z` over its elapsed time `delta_t[r]`.
pub fn tlstm_forward(tape: &mut Tape, cell: &TLstmCell, bound: &Bound, z: Var, delta_t: &[f64]) -> Result<Var> {
    check_rows(tape.value(z), delta_t.len(), cell.dim)?;
    let g: Vec<f64> = delta_t.iter().map(|&d| decay(d)).collect::<Result<_>>()?;
    let (h, c) = (z, z);
    let cs = cell.decomp.forward(tape, bound, c)?;
    let cs = tape.tanh(cs);
    let gcol = tape.constant(Tensor::column(&g));
    let discounted = tape.mul_column(cs, gcol)?;
    let long = tape.sub(c, cs)?;
    let c_star = tape.add(long, discounted)?;

    let xh = tape.concat_cols(z, h)?;
    let f = cell.forget.forward(tape, bound, xh)?;
    let f = tape.sigmoid(f);
    let i = cell.input.forward(tape, bound, xh)?;
    let i = tape.sigmoid(i);
    let o = cell.output.forward(tape, bound, xh)?;
    let o = tape.sigmoid(o);
    let cand = cell.candidate.forward(tape, bound, xh)?;
    let cand = tape.tanh(cand);

    let keep = tape.mul(f, c_star)?;
    let write = tape.mul(i, cand)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    cell.out.forward(tape, bound, h_new)
}

/// Tape-free [`tlstm_forward`].
pub fn tlstm_apply(cell: &TLstmCell, params: &ParamSet, z: &Tensor, delta_t: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let zv = tape.constant(z.clone());
    let out = tlstm_forward(&mut tape, cell, &bound, zv, delta_t)?;
    Ok(tape.value(out).clone())
}
