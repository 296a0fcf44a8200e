use std::fmt;

use crate::cohort::{extract_pairs, Cohort, ConsecutivePair, Exam, Split};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{grades_from_logit_rows, quadratic_weighted_kappa};
use crate::NUM_GRADES;

use super::config::LmtConfig;
use super::fit::{fit, History};
use super::loss::{class_loss, class_loss_value, lmt_loss, mixed_targets, one_hot_rows, z_mix_forward, BatchDraw, PairBatch};
use super::model::Model;
use super::setups::{fit_config, rng_for};

/// Severity grading from a single exam.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradingMethod {
    /// Plain supervised training on individual exams.
    Baseline,
    /// Manifold Mix-up on consecutive pairs: mixed latents, mixed one-hot targets.
    ManifoldMixup,
    /// Longitudinal mixing: interpolated-severity targets plus time consistency.
    Lmm,
}

impl GradingMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(GradingMethod::Baseline),
            "mm" | "manifold_mixup" => Ok(GradingMethod::ManifoldMixup),
            "lmm" => Ok(GradingMethod::Lmm),
            other => Err(Error::contract(format!("unknown grading method '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradingMethod::Baseline => "baseline",
            GradingMethod::ManifoldMixup => "mm",
            GradingMethod::Lmm => "lmm",
        }
    }
}

impl fmt::Display for GradingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct GradingRun {
    pub model: Model,
    pub history: History,
    /// Quadratic weighted kappa on the test exams.
    pub kappa: f64,
}

fn exams_in(cohort: &Cohort, split: Split) -> Vec<&Exam> {
    cohort
        .patients_in(split)
        .flat_map(|p| p.eyes.iter().flat_map(|e| e.exams.iter()))
        .collect()
}

fn exam_rows(exams: &[&Exam]) -> Result<Tensor> {
    Tensor::from_rows(&exams.iter().map(|x| x.features.clone()).collect::<Vec<_>>())
}

fn h1_logits(model: &Model, exams: &[&Exam]) -> Result<Tensor> {
    let z = model.encoder.apply(&model.params, &exam_rows(exams)?)?;
    model.heads.h1.apply(&model.params, &z)
}

fn grading_loss(model: &Model, cfg: &LmtConfig, exams: &[&Exam]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in exams.chunks(256) {
        let grades: Vec<_> = chunk.iter().map(|x| x.grade).collect();
        total += class_loss_value(cfg.loss, &h1_logits(model, chunk)?, &one_hot_rows(&grades)?)? * chunk.len() as f64;
    }
    Ok(total / exams.len().max(1) as f64)
}

/// Kappa of `h1` argmax grades against the true grades of `exams`.
pub fn evaluate_grading(model: &Model, exams: &[&Exam]) -> Result<f64> {
    let mut pred = Vec::with_capacity(exams.len());
    for chunk in exams.chunks(256) {
        pred.extend(grades_from_logit_rows(&h1_logits(model, chunk)?)?);
    }
    let truth: Vec<usize> = exams.iter().map(|x| x.grade.value() as usize).collect();
    let pred: Vec<usize> = pred.iter().map(|g| g.value() as usize).collect();
    quadratic_weighted_kappa(&truth, &pred, NUM_GRADES)
}

fn supervised_step(model: &Model, cfg: &LmtConfig, exams: &[&Exam]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind_all(&mut tape);
    let x = tape.constant(exam_rows(exams)?);
    let z = model.encoder.forward(&mut tape, &bound, x)?;
    let logits = model.heads.h1.forward(&mut tape, &bound, z)?;
    let grades: Vec<_> = exams.iter().map(|x| x.grade).collect();
    let t = tape.constant(one_hot_rows(&grades)?);
    let loss = class_loss(&mut tape, cfg.loss, logits, t)?;
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, bound.grads(&tape, &g)))
}

fn mixed_step(model: &Model, cfg: &LmtConfig, method: GradingMethod, batch: &PairBatch, draw: &BatchDraw) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind_all(&mut tape);
    let loss = match method {
        GradingMethod::Lmm => lmt_loss(&mut tape, model, &bound, batch, draw, cfg.profile, cfg.loss)?,
        _ => {
            let z = z_mix_forward(&mut tape, model, &bound, batch, draw)?;
            let logits = model.heads.h1.forward(&mut tape, &bound, z)?;
            let t = tape.constant(mixed_targets(batch, draw)?);
            class_loss(&mut tape, cfg.loss, logits, t)?
        }
    };
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, bound.grads(&tape, &g)))
}

/// Train encoder + `h1` for grading and report test kappa.
///
/// Model selection uses the clean grading loss on validation exams.
pub fn train_grading(cohort: &Cohort, cfg: &LmtConfig, method: GradingMethod) -> Result<GradingRun> {
    cfg.validate()?;
    let train_exams = exams_in(cohort, Split::Train);
    let val_exams = exams_in(cohort, Split::Val);
    let test_exams = exams_in(cohort, Split::Test);
    let pairs: Vec<ConsecutivePair> = extract_pairs(cohort, Some(Split::Train));
    if train_exams.is_empty() || val_exams.is_empty() || test_exams.len() < 2 {
        return Err(Error::contract("grading needs non-empty train, validation and test splits"));
    }
    let mut model = Model::new(cohort.feature_dim(), cfg, &mut rng_for(cfg.seed, 0));
    let mut rng = rng_for(cfg.seed, 2);
    let eligible = cfg.eligible_layers();
    let scales = vec![1.0; model.params.len()];
    let n = match method {
        GradingMethod::Baseline => train_exams.len(),
        _ => pairs.len(),
    };
    let history = fit(
        &mut model,
        &fit_config(cfg),
        &scales,
        n,
        &mut rng,
        |m, idx, rng| match method {
            GradingMethod::Baseline => {
                let exams: Vec<&Exam> = idx.iter().map(|&i| train_exams[i]).collect();
                supervised_step(m, cfg, &exams)
            }
            _ => {
                let refs: Vec<&ConsecutivePair> = idx.iter().map(|&i| &pairs[i]).collect();
                let batch = PairBatch::new(&refs)?;
                let draw = BatchDraw::sample(cfg.alpha, &eligible, batch.len(), cfg.per_sample_mix, rng)?;
                mixed_step(m, cfg, method, &batch, &draw)
            }
        },
        |m| grading_loss(m, cfg, &val_exams),
    )?;
    let kappa = evaluate_grading(&model, &test_exams)?;
    Ok(GradingRun { model, history, kappa })
}
