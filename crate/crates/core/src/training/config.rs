use std::fmt;

use crate::error::{Error, Result};
use crate::odesolve::{Method, SolverConfig};
use crate::progression::Profile;
use crate::timeaware::GradMode;

/// Which time-aware training setup to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setup {
    /// Propagate to the next exam time, supervise with its grade.
    S1,
    /// Propagate to `t_mix`, supervise with the interpolated severity.
    S2,
    /// `S2` plus the LMT loss on the same batch.
    S3,
}

impl Setup {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Ok(Setup::S1),
            "s2" | "2" => Ok(Setup::S2),
            "s3" | "3" => Ok(Setup::S3),
            other => Err(Error::contract(format!("unknown setup '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setup::S1 => "S1",
            Setup::S2 => "S2",
            Setup::S3 => "S3",
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PropagatorKind {
    Node,
    TLstm,
}

impl PropagatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "node" => Ok(PropagatorKind::Node),
            "tlstm" | "t-lstm" => Ok(PropagatorKind::TLstm),
            other => Err(Error::contract(format!("unknown model '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PropagatorKind::Node => "node",
            PropagatorKind::TLstm => "tlstm",
        }
    }
}

impl fmt::Display for PropagatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classification loss over the five grades.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassLoss {
    /// Per-grade sigmoid with binary cross-entropy, averaged over grades.
    Bce,
    /// Softmax cross-entropy against the soft target.
    Softmax,
}

impl ClassLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(ClassLoss::Bce),
            "softmax" => Ok(ClassLoss::Softmax),
            other => Err(Error::contract(format!("unknown loss '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLoss::Bce => "bce",
            ClassLoss::Softmax => "softmax",
        }
    }
}

/// Binary progression targets: future grade at or above a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    MildPlus,
    ModeratePlus,
    SeverePlus,
}

impl Task {
    pub fn threshold(self) -> u8 {
        match self {
            Task::MildPlus => 1,
            Task::ModeratePlus => 2,
            Task::SeverePlus => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mild+" | "mild" => Ok(Task::MildPlus),
            "moderate+" | "moderate" => Ok(Task::ModeratePlus),
            "severe+" | "severe" => Ok(Task::SeverePlus),
            other => Err(Error::contract(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::MildPlus => "mild+",
            Task::ModeratePlus => "moderate+",
            Task::SeverePlus => "severe+",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmtConfig {
    pub alpha: f64,
    pub profile: Profile,
    pub setup: Setup,
    pub model: PropagatorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: ClassLoss,
    pub grad_mode: GradMode,
    pub solver: SolverConfig,
    /// Encoder layer widths; the last one is the latent dimension.
    pub encoder_widths: Vec<usize>,
    pub node_hidden: usize,
    /// Draw λ per sample instead of once per batch.
    pub per_sample_mix: bool,
    /// Also allow mixing raw inputs (layer 0).
    pub mix_input: bool,
    pub probe_epochs: usize,
    pub finetune_lr_scale: f64,
    pub horizon_days: f64,
    /// Target of the next-visit AUC.
    pub next_visit_task: Task,
    /// Target of the downstream probe.
    pub probe_task: Task,
}

impl Default for LmtConfig {
    fn default() -> Self {
        LmtConfig {
            alpha: 1.0,
            profile: Profile::Linear,
            setup: Setup::S1,
            model: PropagatorKind::Node,
            epochs: 30,
            batch_size: 64,
            max_lr: 1e-3,
            weight_decay: 1e-4,
            seed: 1,
            loss: ClassLoss::Bce,
            grad_mode: GradMode::Adjoint,
            solver: SolverConfig::default(),
            encoder_widths: vec![128, 128, 64, 64],
            node_hidden: 64,
            per_sample_mix: false,
            mix_input: false,
            probe_epochs: 30,
            finetune_lr_scale: 0.1,
            horizon_days: 730.0,
            next_visit_task: Task::SeverePlus,
            probe_task: Task::MildPlus,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::contract(format!("invalid value '{v}' for {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::contract(format!("invalid value '{v}' for {key}"))),
    }
}

impl LmtConfig {
    pub const KEYS: [&'static str; 26] = [
        "alpha",
        "profile",
        "setup",
        "model",
        "epochs",
        "batch_size",
        "max_lr",
        "weight_decay",
        "seed",
        "loss",
        "grad_mode",
        "solver",
        "rtol",
        "atol",
        "rk4_step",
        "max_steps",
        "encoder_widths",
        "node_hidden",
        "per_sample_mix",
        "mix_input",
        "probe_epochs",
        "finetune_lr_scale",
        "horizon_days",
        "next_visit_task",
        "probe_task",
        "safety",
    ];

    /// Set one field from its textual form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = num(key, v)?,
            "profile" => self.profile = Profile::parse(v)?,
            "setup" => self.setup = Setup::parse(v)?,
            "model" => self.model = PropagatorKind::parse(v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "max_lr" => self.max_lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "loss" => self.loss = ClassLoss::parse(v)?,
            "grad_mode" => self.grad_mode = GradMode::parse(v)?,
            "solver" => {
                self.solver.method = match v {
                    "dopri5" => Method::Dopri5,
                    "rk4" => Method::Rk4,
                    other => return Err(Error::contract(format!("unknown solver '{other}'"))),
                }
            }
            "rtol" => self.solver.rtol = num(key, v)?,
            "atol" => self.solver.atol = num(key, v)?,
            "rk4_step" => self.solver.h0 = if v == "auto" { None } else { Some(num(key, v)?) },
            "max_steps" => self.solver.max_steps = num(key, v)?,
            "safety" => self.solver.safety = num(key, v)?,
            "encoder_widths" => {
                self.encoder_widths = v
                    .split(',')
                    .map(|w| num(key, w))
                    .collect::<Result<Vec<usize>>>()?
            }
            "node_hidden" => self.node_hidden = num(key, v)?,
            "per_sample_mix" => self.per_sample_mix = flag(key, v)?,
            "mix_input" => self.mix_input = flag(key, v)?,
            "probe_epochs" => self.probe_epochs = num(key, v)?,
            "finetune_lr_scale" => self.finetune_lr_scale = num(key, v)?,
            "horizon_days" => self.horizon_days = num(key, v)?,
            "next_visit_task" => self.next_visit_task = Task::parse(v)?,
            "probe_task" => self.probe_task = Task::parse(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        let v = [
            self.alpha.to_string(),
            self.profile.name().to_string(),
            self.setup.name().to_string(),
            self.model.name().to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.max_lr.to_string(),
            self.weight_decay.to_string(),
            self.seed.to_string(),
            self.loss.name().to_string(),
            self.grad_mode.name().to_string(),
            match self.solver.method {
                Method::Dopri5 => "dopri5".to_string(),
                Method::Rk4 => "rk4".to_string(),
            },
            self.solver.rtol.to_string(),
            self.solver.atol.to_string(),
            self.solver.h0.map_or("auto".to_string(), |h| h.to_string()),
            self.solver.max_steps.to_string(),
            widths.join(","),
            self.node_hidden.to_string(),
            self.per_sample_mix.to_string(),
            self.mix_input.to_string(),
            self.probe_epochs.to_string(),
            self.finetune_lr_scale.to_string(),
            self.horizon_days.to_string(),
            self.next_visit_task.name().to_string(),
            self.probe_task.name().to_string(),
            self.solver.safety.to_string(),
        ];
        Self::KEYS.iter().copied().zip(v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!("alpha {} must be positive", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if !(self.max_lr >= 0.0 && self.weight_decay >= 0.0 && self.finetune_lr_scale >= 0.0) {
            return Err(Error::contract("learning rates and weight decay must be non-negative"));
        }
        if self.encoder_widths.len() < 3 || self.encoder_widths.contains(&0) {
            return Err(Error::contract("encoder needs at least three non-empty layers"));
        }
        if self.node_hidden == 0 {
            return Err(Error::contract("node_hidden must be positive"));
        }
        if !(self.horizon_days > 0.0) {
            return Err(Error::contract("horizon_days must be positive"));
        }
        if self.model == PropagatorKind::TLstm && self.setup == Setup::S3 {
            return Err(Error::contract("the T-LSTM propagator supports setups S1 and S2 only"));
        }
        Ok(())
    }

    /// Eligible mixing layers: the last three encoder layers, plus 0 if `mix_input`.
    pub fn eligible_layers(&self) -> Vec<usize> {
        let n = self.encoder_widths.len();
        let mut s: Vec<usize> = if self.mix_input { vec![0] } else { Vec::new() };
        s.extend(n - 2..=n);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip_through_set() {
        let mut c = LmtConfig {
            alpha: 0.2,
            setup: Setup::S3,
            profile: Profile::Exponential,
            per_sample_mix: true,
            encoder_widths: vec![16, 8, 8, 4],
            ..LmtConfig::default()
        };
        c.solver.h0 = Some(0.1);
        let mut d = LmtConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(c, d);
        assert!(!d.set("bogus", "1").unwrap());
        assert!(d.set("epochs", "x").is_err());
    }

    #[test]
    fn validation() {
        assert!(LmtConfig::default().validate().is_ok());
        let bad = LmtConfig {
            model: PropagatorKind::TLstm,
            setup: Setup::S3,
            ..LmtConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LmtConfig { batch_size: 0, ..LmtConfig::default() }.validate().is_err());
        assert_eq!(LmtConfig::default().eligible_layers(), vec![2, 3, 4]);
    }
}
