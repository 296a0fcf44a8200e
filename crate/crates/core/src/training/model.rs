use rand::Rng;

use crate::diffcore::{Bound, Linear, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::timeaware::{NodeDynamics, TLstmCell};
use crate::NUM_GRADES;

use super::config::{LmtConfig, PropagatorKind};
use super::fit::HasParams;

/// MLP `g_{1:n}` of affine + relu layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, input_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = input_dim;
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(params, &format!("encoder.l{}", k + 1), d, w, rng));
            d = w;
        }
        Encoder { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.last().expect("non-empty encoder").out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k > self.depth() {
            return Err(Error::contract(format!("layer {k} beyond encoder depth {}", self.depth())));
        }
        Ok(())
    }

    /// `g_{1:k}(x)`; `k = 0` returns `x`.
    pub fn forward_to(&self, tape: &mut Tape, bound: &Bound, x: Var, k: usize) -> Result<Var> {
        self.check_layer(k)?;
        self.run(tape, bound, x, 0, k)
    }

    /// `g_{k+1:n}(h)`.
    pub fn resume(&self, tape: &mut Tape, bound: &Bound, h: Var, k: usize) -> Result<Var> {
        self.check_layer(k)?;
        self.run(tape, bound, h, k, self.depth())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.run(tape, bound, x, 0, self.depth())
    }

    fn run(&self, tape: &mut Tape, bound: &Bound, mut h: Var, from: usize, to: usize) -> Result<Var> {
        for layer in &self.layers[from..to] {
            h = layer.forward(tape, bound, h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Tape-free `g_{1:n}(x)`.
    pub fn apply(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.apply(params, &h)?.map(|v| if v > 0.0 { v } else { 0.0 });
        }
        Ok(h)
    }
}

/// Severity classifier `h1`, time regressor `h2` and next-visit classifier `h3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub h1: Linear,
    pub h2: Linear,
    pub h3: Linear,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, latent_dim: usize, rng: &mut R) -> Self {
        Heads {
            h1: Linear::new(params, "head.h1", latent_dim, NUM_GRADES, rng),
            h2: Linear::new(params, "head.h2", latent_dim, 1, rng),
            h3: Linear::new(params, "head.h3", latent_dim, NUM_GRADES, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Propagator {
    Node(NodeDynamics),
    TLstm(TLstmCell),
}

impl Propagator {
    pub fn kind(&self) -> PropagatorKind {
        match self {
            Propagator::Node(_) => PropagatorKind::Node,
            Propagator::TLstm(_) => PropagatorKind::TLstm,
        }
    }
}

/// Every trainable piece of one run, sharing a single parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub encoder: Encoder,
    pub heads: Heads,
    pub propagator: Propagator,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &LmtConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, input_dim, &cfg.encoder_widths, rng);
        let latent = encoder.latent_dim();
        let heads = Heads::new(&mut params, latent, rng);
        let propagator = match cfg.model {
            PropagatorKind::Node => Propagator::Node(NodeDynamics::new(&mut params, latent, cfg.node_hidden, rng)),
            PropagatorKind::TLstm => Propagator::TLstm(TLstmCell::new(&mut params, latent, rng)),
        };
        Model {
            params,
            encoder,
            heads,
            propagator,
        }
    }

    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("encoder.")
    }
}

impl HasParams for Model {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
