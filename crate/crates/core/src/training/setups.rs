use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{extract_pairs, Cohort, ConsecutivePair, Split};
use crate::diffcore::{accumulate_grads, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::mixing::soft_label;
use crate::timeaware::{node_adjoint, node_forward, node_forward_on_tape, tlstm_apply, tlstm_forward, GradMode};

use super::config::{LmtConfig, Setup, Task};
use super::fit::{fit, FitConfig, History};
use super::loss::{class_loss, class_loss_value, label_rows, lmt_loss, one_hot_rows, severity_mass, BatchDraw, PairBatch};
use super::model::{Model, Propagator};

/// Evaluation batch size; large batches only save overhead.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub history: History,
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn fit_config(cfg: &LmtConfig) -> FitConfig {
    FitConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        max_lr: cfg.max_lr,
        weight_decay: cfg.weight_decay,
    }
}

fn horizon_context(e: Error, batch: &PairBatch, targets: &[f64]) -> Error {
    let worst = batch
        .t_i
        .iter()
        .zip(targets)
        .enumerate()
        .max_by(|a, b| (a.1 .1 - a.1 .0).total_cmp(&(b.1 .1 - b.1 .0)));
    if let Some((r, (a, b))) = worst {
        log::error!("propagation failed; longest horizon {a:.4} -> {b:.4} for pair {:?}: {e}", batch.ids[r]);
    }
    e
}

/// Latent at `targets[r]` for every row of the batch, recorded on the tape.
///
/// In adjoint mode the solve happens off-tape: the returned variable is a
/// fresh leaf, and the caller must pull its gradient back with
/// [`node_adjoint`]. The extra tuple carries what that needs.
fn propagate(
    tape: &mut Tape,
    model: &Model,
    cfg: &LmtConfig,
    bound: &crate::diffcore::Bound,
    z: Var,
    batch: &PairBatch,
    targets: &[f64],
) -> Result<(Var, Option<Tensor>)> {
    match &model.propagator {
        Propagator::TLstm(cell) => {
            let dt: Vec<f64> = batch.t_i.iter().zip(targets).map(|(a, b)| b - a).collect();
            Ok((tlstm_forward(tape, cell, bound, z, &dt)?, None))
        }
        Propagator::Node(dynamics) => match cfg.grad_mode {
            GradMode::Backprop => {
                let out = node_forward_on_tape(tape, dynamics, &model.params, bound, z, &batch.t_i, targets, &cfg.solver)
                    .map_err(|e| horizon_context(e, batch, targets))?;
                Ok((out, None))
            }
            GradMode::Adjoint => {
                let z1 = node_forward(dynamics, &model.params, tape.value(z), &batch.t_i, targets, &cfg.solver)
                    .map_err(|e| horizon_context(e, batch, targets))?;
                let leaf = tape.param(z1.clone());
                Ok((leaf, Some(z1)))
            }
        },
    }
}

/// Loss and gradients of one training step of `cfg.setup`.
pub fn setup_step(model: &Model, cfg: &LmtConfig, batch: &PairBatch, draw: &BatchDraw) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind_all(&mut tape);
    let x = tape.constant(batch.x_i.clone());
    let z = model.encoder.forward(&mut tape, &bound, x)?;
    let (target_times, targets) = match cfg.setup {
        Setup::S1 => (batch.t_ip1.clone(), one_hot_rows(&batch.s_ip1)?),
        Setup::S2 | Setup::S3 => {
            let sev = draw.severities(batch, cfg.profile)?;
            let labels: Vec<_> = sev.iter().map(|&s| soft_label(s)).collect();
            (draw.t_mix(batch), label_rows(&labels)?)
        }
    };
    let (zp, adjoint_z1) = propagate(&mut tape, model, cfg, &bound, z, batch, &target_times)?;
    let logits = model.heads.h3.forward(&mut tape, &bound, zp)?;
    let tv = tape.constant(targets);
    let mut loss = class_loss(&mut tape, cfg.loss, logits, tv)?;
    if cfg.setup == Setup::S3 {
        let lmt = lmt_loss(&mut tape, model, &bound, batch, draw, cfg.profile, cfg.loss)?;
        loss = tape.add(loss, lmt)?;
    }
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} loss; lambda[0] = {}, pairs {:?}",
            cfg.setup,
            draw.lambdas[0],
            &batch.ids[..batch.ids.len().min(4)]
        )));
    }
    let g = tape.backward(loss)?;
    let mut grads = bound.grads(&tape, &g);
    if let (Some(z1), Propagator::Node(dynamics)) = (adjoint_z1, &model.propagator) {
        let dl_dz1 = g.wrt(&tape, zp);
        let adj = node_adjoint(dynamics, &model.params, &z1, &batch.t_i, &target_times, &dl_dz1, &cfg.solver)
            .map_err(|e| horizon_context(e, batch, &target_times))?;
        for (id, d) in &adj.dtheta {
            grads[id.index()].axpy(1.0, d)?;
        }
        let g2 = tape.backward_seeded(&[(z, adj.dz0)])?;
        accumulate_grads(&mut grads, &bound.grads(&tape, &g2))?;
    }
    Ok((value, grads))
}

/// `h3` logits after propagating each pair's first latent to `targets[r]`.
pub fn next_visit_logits(model: &Model, cfg: &LmtConfig, batch: &PairBatch, targets: &[f64]) -> Result<Tensor> {
    let z = model.encoder.apply(&model.params, &batch.x_i)?;
    let zp = match &model.propagator {
        Propagator::Node(d) => node_forward(d, &model.params, &z, &batch.t_i, targets, &cfg.solver)
            .map_err(|e| horizon_context(e, batch, targets))?,
        Propagator::TLstm(c) => {
            let dt: Vec<f64> = batch.t_i.iter().zip(targets).map(|(a, b)| b - a).collect();
            tlstm_apply(c, &model.params, &z, &dt)?
        }
    };
    model.heads.h3.apply(&model.params, &zp)
}

fn for_batches<F>(pairs: &[ConsecutivePair], mut f: F) -> Result<()>
where
    F: FnMut(&PairBatch) -> Result<()>,
{
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&ConsecutivePair> = chunk.iter().collect();
        f(&PairBatch::new(&refs)?)?;
    }
    Ok(())
}

/// Mean next-visit loss: propagate to the next exam, score against its grade.
pub fn validation_loss(model: &Model, cfg: &LmtConfig, pairs: &[ConsecutivePair]) -> Result<f64> {
    let mut total = 0.0;
    for_batches(pairs, |b| {
        let logits = next_visit_logits(model, cfg, b, &b.t_ip1)?;
        total += class_loss_value(cfg.loss, &logits, &one_hot_rows(&b.s_ip1)?)? * b.len() as f64;
        Ok(())
    })?;
    Ok(total / pairs.len().max(1) as f64)
}

/// AUC of the next exam reaching the task threshold.
pub fn evaluate_next_visit(model: &Model, cfg: &LmtConfig, pairs: &[ConsecutivePair], task: Task) -> Result<f64> {
    let th = task.threshold();
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for_batches(pairs, |b| {
        let logits = next_visit_logits(model, cfg, b, &b.t_ip1)?;
        for r in 0..b.len() {
            scores.push(severity_mass(cfg.loss, logits.row_slice(r), th));
            labels.push(b.s_ip1[r].value() >= th);
        }
        Ok(())
    })?;
    roc_auc(&scores, &labels)
}

/// Train encoder, heads and propagator under `cfg.setup`.
pub fn train_setup(cohort: &Cohort, cfg: &LmtConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let train = extract_pairs(cohort, Some(Split::Train));
    let val = extract_pairs(cohort, Some(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation splits"));
    }
    let mut model = Model::new(cohort.feature_dim(), cfg, &mut rng_for(cfg.seed, 0));
    let mut rng = rng_for(cfg.seed, 1);
    let eligible = cfg.eligible_layers();
    let scales = vec![1.0; model.params.len()];
    let history = fit(
        &mut model,
        &fit_config(cfg),
        &scales,
        train.len(),
        &mut rng,
        |m, idx, rng| {
            let refs: Vec<&ConsecutivePair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = PairBatch::new(&refs)?;
            let draw = BatchDraw::sample(cfg.alpha, &eligible, batch.len(), cfg.per_sample_mix, rng)?;
            setup_step(m, cfg, &batch, &draw)
        },
        |m| validation_loss(m, cfg, &val),
    )?;
    if let Some(f) = &history.failure {
        log::error!("{} / {} run diverged: {f}", cfg.setup, cfg.model);
    }
    Ok(TrainedModel { model, history })
}
