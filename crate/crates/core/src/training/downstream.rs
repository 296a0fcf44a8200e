use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{Cohort, Split};
use crate::diffcore::{Linear, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;

use super::config::{LmtConfig, Task};
use super::fit::{fit, FitConfig, HasParams, History};
use super::model::Encoder;
use super::setups::rng_for;

/// One exam and whether the eye reaches the task grade at its next exam.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamSample {
    pub features: Vec<f64>,
    pub label: bool,
    pub split: Split,
}

/// Exams below the task threshold whose next exam follows within `horizon_days`.
pub fn downstream_samples(cohort: &Cohort, task: Task, horizon_days: f64) -> Vec<DownstreamSample> {
    let th = task.threshold();
    let mut out = Vec::new();
    for p in &cohort.patients {
        for e in &p.eyes {
            for w in e.exams.windows(2) {
                if w[0].grade.value() < th && w[1].t_days - w[0].t_days <= horizon_days {
                    out.push(DownstreamSample {
                        features: w[0].features.clone(),
                        label: w[1].grade.value() >= th,
                        split: p.split,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownstreamMode {
    /// Only the new linear layer trains.
    Probe,
    /// Everything trains; the encoder at a reduced learning rate.
    FineTune,
}

#[derive(Clone, Debug)]
pub struct DownstreamResult {
    pub auc: f64,
    /// Encoder (as trained, i.e. untouched for a probe) followed by `probe.*`.
    pub params: ParamSet,
    pub history: History,
}

#[derive(Clone)]
struct ProbeModel {
    params: ParamSet,
}

impl HasParams for ProbeModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

fn rows(samples: &[&DownstreamSample]) -> Result<Tensor> {
    Tensor::from_rows(&samples.iter().map(|s| s.features.clone()).collect::<Vec<_>>())
}

fn scores(encoder: &Encoder, head: &Linear, params: &ParamSet, samples: &[&DownstreamSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let z = encoder.apply(params, &rows(chunk)?)?;
        out.extend_from_slice(head.apply(params, &z)?.data());
    }
    Ok(out)
}

fn bce(scores: &[f64], samples: &[&DownstreamSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column(scores));
    let p = tape.sigmoid(p);
    let t = tape.constant(Tensor::column(&samples.iter().map(|s| s.label as u8 as f64).collect::<Vec<_>>()));
    let l = tape.bce_soft(p, t)?;
    tape.value(l).item()
}

/// Train a fresh linear layer on top of `encoder` for `cfg.probe_task`.
///
/// `encoder_params` must contain the encoder's parameters by name. The probe
/// layer is added as `probe.weight` / `probe.bias`.
pub fn train_downstream(
    encoder: &Encoder,
    encoder_params: &ParamSet,
    cohort: &Cohort,
    cfg: &LmtConfig,
    mode: DownstreamMode,
) -> Result<DownstreamResult> {
    let samples = downstream_samples(cohort, cfg.probe_task, cfg.horizon_days);
    let pick = |s: Split| samples.iter().filter(|x| x.split == s).collect::<Vec<_>>();
    let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!("no {} samples in train or validation", cfg.probe_task)));
    }
    let mut params = ParamSet::new();
    for id in encoder.param_ids() {
        let name = encoder_params.name(id);
        params.add(name, encoder_params.get(id).clone());
    }
    let mut rng: ChaCha8Rng = rng_for(cfg.seed, 3);
    let head = Linear::new(&mut params, "probe", encoder.latent_dim(), 1, &mut rng);
    let n_enc = encoder.param_ids().len();
    let enc_scale = match mode {
        DownstreamMode::Probe => 0.0,
        DownstreamMode::FineTune => cfg.finetune_lr_scale,
    };
    let mut scales = vec![enc_scale; n_enc];
    scales.extend([1.0, 1.0]);
    let trainable = move |name: &str| mode == DownstreamMode::FineTune || name.starts_with("probe.");

    let mut model = ProbeModel { params };
    let fit_cfg = FitConfig {
        epochs: cfg.probe_epochs,
        batch_size: cfg.batch_size,
        max_lr: cfg.max_lr,
        weight_decay: cfg.weight_decay,
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(4);
    let history = fit(
        &mut model,
        &fit_cfg,
        &scales,
        train.len(),
        &mut shuffle,
        |m, idx, _| {
            let batch: Vec<&DownstreamSample> = idx.iter().map(|&i| train[i]).collect();
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape, trainable);
            let x = tape.constant(rows(&batch)?);
            let z = encoder.forward(&mut tape, &bound, x)?;
            let logit = head.forward(&mut tape, &bound, z)?;
            let p = tape.sigmoid(logit);
            let labels: Vec<f64> = batch.iter().map(|s| s.label as u8 as f64).collect();
            let t = tape.constant(Tensor::column(&labels));
            let loss = tape.bce_soft(p, t)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, bound.grads(&tape, &g)))
        },
        |m| bce(&scores(encoder, &head, &m.params, &val)?, &val),
    )?;
    let params = model.params;
    let test_scores = scores(encoder, &head, &params, &test)?;
    let labels: Vec<bool> = test.iter().map(|s| s.label).collect();
    let auc = roc_auc(&test_scores, &labels)?;
    Ok(DownstreamResult { auc, params, history })
}

/// Linear evaluation: frozen encoder, trained linear layer, test AUC.
pub fn linear_probe(encoder: &Encoder, params: &ParamSet, cohort: &Cohort, cfg: &LmtConfig) -> Result<DownstreamResult> {
    train_downstream(encoder, params, cohort, cfg, DownstreamMode::Probe)
}

/// All parameters trainable, encoder at `cfg.finetune_lr_scale × max_lr`.
pub fn fine_tune(encoder: &Encoder, params: &ParamSet, cohort: &Cohort, cfg: &LmtConfig) -> Result<DownstreamResult> {
    train_downstream(encoder, params, cohort, cfg, DownstreamMode::FineTune)
}
