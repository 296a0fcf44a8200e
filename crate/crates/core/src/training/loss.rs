use rand::Rng;

use crate::cohort::ConsecutivePair;
use crate::diffcore::{sigmoid, Activation, Bound, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mixing::{mix, mix_rows, mix_scalar, sample_lambda, select_mix_layer, soft_label, MixDraw, SoftLabel};
use crate::progression::{interpolate_fraction, Profile, SeverityGrade};
use crate::NUM_GRADES;

use super::config::ClassLoss;
use super::model::Model;

/// Consecutive pairs stacked row-wise; times in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_i: Tensor,
    pub x_ip1: Tensor,
    pub t_i: Vec<f64>,
    pub t_ip1: Vec<f64>,
    pub s_i: Vec<SeverityGrade>,
    pub s_ip1: Vec<SeverityGrade>,
    /// `(patient, eye, index)` of each pair, for diagnostics.
    pub ids: Vec<(u64, u64, usize)>,
}

impl PairBatch {
    pub fn new(pairs: &[&ConsecutivePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty pair batch"));
        }
        let rows = |f: fn(&ConsecutivePair) -> &Vec<f64>| -> Result<Tensor> {
            Tensor::from_rows(&pairs.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
        };
        Ok(PairBatch {
            x_i: rows(|p| &p.first.features)?,
            x_ip1: rows(|p| &p.second.features)?,
            t_i: pairs.iter().map(|p| p.first.time().value()).collect(),
            t_ip1: pairs.iter().map(|p| p.second.time().value()).collect(),
            s_i: pairs.iter().map(|p| p.first.grade).collect(),
            s_ip1: pairs.iter().map(|p| p.second.grade).collect(),
            ids: pairs.iter().map(|p| (p.patient, p.eye, p.index)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_i.is_empty()
    }
}

/// Mixing coefficients for a batch (one per row) and the layer to mix at.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDraw {
    pub lambdas: Vec<f64>,
    pub layer_k: usize,
}

impl BatchDraw {
    /// The same draw for every row.
    pub fn shared(draw: MixDraw, rows: usize) -> Self {
        BatchDraw {
            lambdas: vec![draw.lambda; rows],
            layer_k: draw.layer_k,
        }
    }

    /// One λ per batch, or one per row when `per_sample`; one layer per batch.
    pub fn sample<R: Rng + ?Sized>(
        alpha: f64,
        eligible: &[usize],
        rows: usize,
        per_sample: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if per_sample {
            let layer_k = select_mix_layer(eligible, rng)?;
            let lambdas = (0..rows).map(|_| sample_lambda(alpha, rng)).collect::<Result<_>>()?;
            Ok(BatchDraw { lambdas, layer_k })
        } else {
            Ok(Self::shared(MixDraw::sample(alpha, eligible, rng)?, rows))
        }
    }

    pub fn t_mix(&self, batch: &PairBatch) -> Vec<f64> {
        self.lambdas
            .iter()
            .zip(batch.t_i.iter().zip(&batch.t_ip1))
            .map(|(&l, (&a, &b))| mix_scalar(a, b, l))
            .collect()
    }

    /// `I(t_mix)` per row. The position within the interval is `1 − λ`.
    pub fn severities(&self, batch: &PairBatch, profile: Profile) -> Result<Vec<f64>> {
        self.lambdas
            .iter()
            .zip(batch.s_i.iter().zip(&batch.s_ip1))
            .map(|(&l, (&a, &b))| interpolate_fraction(profile, a, b, 1.0 - l))
            .collect()
    }

    fn is_shared(&self) -> bool {
        self.lambdas.windows(2).all(|w| w[0] == w[1])
    }

    fn describe(&self, batch: &PairBatch) -> String {
        format!(
            "lambda[0] = {}, layer k = {}, pairs {:?}",
            self.lambdas.first().copied().unwrap_or(f64::NAN),
            self.layer_k,
            &batch.ids[..batch.ids.len().min(4)]
        )
    }
}

/// Soft-label rows `[b × 5]`.
pub fn label_rows(labels: &[SoftLabel]) -> Result<Tensor> {
    Tensor::from_rows(&labels.iter().map(|l| l.probs().to_vec()).collect::<Vec<_>>())
}

pub fn one_hot_rows(grades: &[SeverityGrade]) -> Result<Tensor> {
    label_rows(&grades.iter().map(|g| SoftLabel::one_hot(g.value() as usize)).collect::<Vec<_>>())
}

/// Manifold Mix-up targets: `Mix_λ(onehot(s_i), onehot(s_ip1))` per row.
pub fn mixed_targets(batch: &PairBatch, draw: &BatchDraw) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = draw
        .lambdas
        .iter()
        .zip(batch.s_i.iter().zip(&batch.s_ip1))
        .map(|(&l, (a, b))| {
            let (pa, pb) = (SoftLabel::one_hot(a.value() as usize), SoftLabel::one_hot(b.value() as usize));
            (0..NUM_GRADES).map(|g| mix_scalar(pa.0[g], pb.0[g], l)).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// `g_{k+1:n}(Mix_λ(g_{1:k}(x_i), g_{1:k}(x_ip1)))`; `k = 0` mixes the inputs.
pub fn z_mix_forward(tape: &mut Tape, model: &Model, bound: &Bound, batch: &PairBatch, draw: &BatchDraw) -> Result<Var> {
    if draw.lambdas.len() != batch.len() {
        return Err(Error::contract(format!(
            "{} mixing coefficients for {} pairs",
            draw.lambdas.len(),
            batch.len()
        )));
    }
    let k = draw.layer_k;
    let xa = tape.constant(batch.x_i.clone());
    let xb = tape.constant(batch.x_ip1.clone());
    let ha = model.encoder.forward_to(tape, bound, xa, k)?;
    let hb = model.encoder.forward_to(tape, bound, xb, k)?;
    let hm = if draw.is_shared() {
        mix(tape, ha, hb, draw.lambdas[0])?
    } else {
        mix_rows(tape, ha, hb, &draw.lambdas)?
    };
    model.encoder.resume(tape, bound, hm, k)
}

/// `ℓ(logits, targets)` with targets `[b × 5]` in `[0, 1]`.
pub fn class_loss(tape: &mut Tape, kind: ClassLoss, logits: Var, targets: Var) -> Result<Var> {
    match kind {
        ClassLoss::Bce => {
            let p = tape.sigmoid(logits);
            tape.bce_soft(p, targets)
        }
        ClassLoss::Softmax => tape.soft_cross_entropy(logits, targets),
    }
}

/// Tape-free [`class_loss`].
pub fn class_loss_value(kind: ClassLoss, logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let t = tape.constant(targets.clone());
    let out = class_loss(&mut tape, kind, l, t)?;
    tape.value(out).item()
}

/// Batch mean of `(t_mix − t̂)²`; `t_hat` is `[b × 1]`.
pub fn time_consistency(tape: &mut Tape, t_mix: &[f64], t_hat: Var) -> Result<Var> {
    let (rows, cols) = tape.value(t_hat).dims2()?;
    if cols != 1 || rows != t_mix.len() {
        return Err(Error::Shape {
            op: "time_consistency",
            left: vec![rows, cols],
            right: vec![t_mix.len(), 1],
        });
    }
    let target = tape.constant(Tensor::column(t_mix));
    tape.mse(t_hat, target)
}

/// `ℓ(h1(z_mix), I(t_mix)) + ‖t_mix − h2(z_mix)‖²`.
pub fn lmt_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    batch: &PairBatch,
    draw: &BatchDraw,
    profile: Profile,
    kind: ClassLoss,
) -> Result<Var> {
    let z = z_mix_forward(tape, model, bound, batch, draw)?;
    let sev = draw.severities(batch, profile)?;
    let targets = label_rows(&sev.iter().map(|&s| soft_label(s)).collect::<Vec<_>>())?;
    let targets = tape.constant(targets);
    let logits = model.heads.h1.forward(tape, bound, z)?;
    let cls = class_loss(tape, kind, logits, targets)?;
    let t_hat = model.heads.h2.forward(tape, bound, z)?;
    let tl = time_consistency(tape, &draw.t_mix(batch), t_hat)?;
    let total = tape.add(cls, tl)?;
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite(format!("LMT loss; {}", draw.describe(batch))));
    }
    Ok(total)
}

/// Probability mass on grades `>= threshold` from one row of logits.
pub fn severity_mass(kind: ClassLoss, logits: &[f64], threshold: u8) -> f64 {
    let probs: Vec<f64> = match kind {
        ClassLoss::Bce => logits.iter().map(|&l| sigmoid(l)).collect(),
        ClassLoss::Softmax => Activation::Softmax.apply(&Tensor::row(logits)).into_data(),
    };
    let total: f64 = probs.iter().sum();
    let upper: f64 = probs[threshold as usize..].iter().sum();
    if total > 0.0 {
        upper / total
    } else {
        0.0
    }
}
