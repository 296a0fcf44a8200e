use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adamw_step, onecycle_lr, OptimState, ParamSet, StepOutcome, Tensor};
use crate::error::{Error, Result};

/// Anything that owns the parameter set being optimized.
pub trait HasParams: Clone {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

impl HasParams for ParamSet {
    fn params(&self) -> &ParamSet {
        self
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: Option<usize>,
    /// Set when training diverged.
    pub failure: Option<String>,
    pub skipped_steps: usize,
}

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr,wall_ms")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6e},{}",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Minibatch AdamW with the one-cycle schedule and best-validation selection.
///
/// `step` returns the batch loss and gradients in parameter order;
/// `validate` scores the current parameters (lower is better). `lr_scales`
/// multiplies the learning rate per parameter (`0` freezes). On a non-finite
/// loss the run stops, `history.failure` is set and the best parameters seen
/// so far are kept.
pub fn fit<M, S, V>(
    model: &mut M,
    cfg: &FitConfig,
    lr_scales: &[f64],
    n_train: usize,
    rng: &mut ChaCha8Rng,
    mut step: S,
    mut validate: V,
) -> Result<History>
where
    M: HasParams,
    S: FnMut(&M, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<Tensor>)>,
    V: FnMut(&M) -> Result<f64>,
{
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut history = History::default();
    if cfg.epochs == 0 || n_train == 0 {
        return Ok(history);
    }
    let mut opt = OptimState::new(model.params(), cfg.max_lr, cfg.weight_decay);
    for (i, &s) in lr_scales.iter().enumerate() {
        opt.set_lr_scale(i, s);
    }
    let per_epoch = n_train.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut global = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut lr = cfg.max_lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = onecycle_lr(global, total, cfg.max_lr)?;
            opt.lr = lr;
            global += 1;
            let (loss, grads) = match step(model, chunk, rng) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => {
                    history.failure = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                history.failure = Some(format!("epoch {epoch}: non-finite training loss {loss}"));
                break 'epochs;
            }
            sum += loss * chunk.len() as f64;
            if let StepOutcome::Skipped { param } = adamw_step(model.params_mut(), &grads, &mut opt)? {
                log::warn!("epoch {epoch}: skipped update, non-finite gradient in {param}");
                history.skipped_steps += 1;
            }
        }
        let val = validate(model)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / n_train as f64,
            val_loss: val,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        log::debug!("epoch {epoch}: train {:.5} val {val:.5}", sum / n_train as f64);
        if val.is_finite() && best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.params().clone()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, p)) = best {
        *model.params_mut() = p;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn quadratic_fit(epochs: usize) -> (ParamSet, History) {
        let mut p = ParamSet::new();
        p.add("w", Tensor::row(&[3.0, -2.0]));
        let cfg = FitConfig {
            epochs,
            batch_size: 4,
            max_lr: 0.1,
            weight_decay: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = fit(
            &mut p,
            &cfg,
            &[1.0],
            10,
            &mut rng,
            |p, _, _| {
                let w = p.values()[0].clone();
                Ok((w.dot(&w)?, vec![w.scale(2.0)]))
            },
            |p| Ok(p.values()[0].norm()),
        )
        .unwrap();
        (p, h)
    }

    #[test]
    fn zero_epochs_keeps_parameters() {
        let (p, h) = quadratic_fit(0);
        assert_eq!(p.values()[0], Tensor::row(&[3.0, -2.0]));
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn converges_and_records_history() {
        let (p, h) = quadratic_fit(40);
        assert_eq!(h.epochs.len(), 40);
        assert!(p.values()[0].norm() < 0.5);
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr,wall_ms\n"));
        assert_eq!(text.lines().count(), 41);
    }

    #[test]
    fn divergence_is_recorded() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::row(&[1.0]));
        let cfg = FitConfig {
            epochs: 3,
            batch_size: 1,
            max_lr: 0.1,
            weight_decay: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = fit(
            &mut p,
            &cfg,
            &[1.0],
            2,
            &mut rng,
            |_, _, _| Ok((f64::NAN, vec![Tensor::row(&[0.0])])),
            |_| Ok(0.0),
        )
        .unwrap();
        assert!(h.failure.is_some());
    }
}
