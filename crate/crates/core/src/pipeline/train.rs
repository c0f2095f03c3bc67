//! Two-stage training: PK encoder and vector field against dense
//! concentration targets, then the PD half with the PK weights frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensornet::{Adam, Gradients, Graph, Tensor};

use super::checkpoint::{Checkpoint, Stage, TrainMeta};
use super::data::{augment, AugmentedExample};
use super::norm::{compute_norm, NormStats, PLATELET};
use crate::dataset::{flatten_patients, Patient, TruthRow};
use crate::error::{Error, Result};
use crate::model::{prepare_input, scale_doses, ModelConfig, ModelInput, NeuralPkPd, ScaledDose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// When set, the rate decays geometrically from `lr` at the first epoch
    /// to this value at the last. Unset keeps `lr` constant.
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    /// Examples per work unit inside a batch. Fixed so the reduction order
    /// does not depend on the thread count.
    pub chunk_size: usize,
    /// Early stop when the best loss improved by less than `min_improvement`
    /// (relative) over this many epochs. 0 disables.
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            lr: 1e-3,
            lr_final: None,
            batch_size: 64,
            chunk_size: 16,
            patience: 100,
            min_improvement: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn pd_default() -> Self {
        TrainConfig { epochs: 3000, ..Default::default() }
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(f) if self.epochs > 1 => {
                let frac = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                self.lr * (f / self.lr).powf(frac)
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("final learning rate {f} must be positive")));
            }
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(Error::Config("min_improvement must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// An augmented example in model units.
struct Prepared {
    input: ModelInput,
    doses: Vec<ScaledDose>,
    target: Vec<f64>,
    mask: Vec<f64>,
}

fn prepare(ex: &AugmentedExample, norm: &NormStats, cfg: &ModelConfig, stage: Stage) -> Result<Prepared> {
    let input = prepare_input(&ex.input, norm, cfg.ic_window)?;
    let doses = scale_doses(&ex.doses, norm, cfg.dt)?;
    let series = match stage {
        Stage::Pk => &ex.targets.pk,
        Stage::Pkpd => &ex.targets.platelet,
    };
    let target = series
        .iter()
        .map(|v| match (v, stage) {
            (Some(x), Stage::Pk) => norm.scale_pk(*x),
            (Some(x), Stage::Pkpd) => norm.apply(PLATELET, *x),
            (None, _) => 0.0,
        })
        .collect();
    let mask = series.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
    Ok(Prepared { input, doses, target, mask })
}

/// Scaled squared error and gradients for one chunk.
fn chunk_pass(model: &NeuralPkPd, chunk: &[&Prepared], with_pd: bool, scale: f64) -> Result<(f64, Gradients)> {
    let n = chunk.iter().map(|p| p.target.len()).max().unwrap_or(1);
    let b = chunk.len();
    let mut target = vec![0.0; b * n];
    let mut mask = vec![0.0; b * n];
    for (i, p) in chunk.iter().enumerate() {
        target[i * n..i * n + p.target.len()].copy_from_slice(&p.target);
        mask[i * n..i * n + p.mask.len()].copy_from_slice(&p.mask);
    }
    let target = Tensor::matrix(b, n, target)?;
    let mask = Tensor::matrix(b, n, mask)?;
    let inputs: Vec<&ModelInput> = chunk.iter().map(|p| &p.input).collect();
    let doses: Vec<&[ScaledDose]> = chunk.iter().map(|p| p.doses.as_slice()).collect();
    let mut g = Graph::new(model.store());
    let f = model.forward(&mut g, &inputs, &doses, n, with_pd)?;
    let pred = if with_pd { f.pd.expect("pd requested") } else { f.pk };
    let loss = g.masked_sse_scaled(pred, &target, &mask, scale)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?))
}

/// Mean squared error over the whole example set, no gradients.
fn dataset_loss(model: &NeuralPkPd, examples: &[Prepared], with_pd: bool, chunk_size: usize) -> Result<f64> {
    let total: f64 = examples.iter().map(|p| p.mask.iter().sum::<f64>()).sum();
    let parts: Vec<f64> = examples
        .chunks(chunk_size)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|c| {
            let refs: Vec<&Prepared> = c.iter().collect();
            chunk_pass(model, &refs, with_pd, 1.0 / total).map(|(l, _)| l)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

fn numeric_at(epoch: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("epoch {epoch}: {e}"))
    } else {
        e
    }
}

fn run_epochs(
    model: &mut NeuralPkPd,
    examples: &[Prepared],
    with_pd: bool,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_sse = 0.0;
        let mut epoch_count = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = batch.iter().map(|&i| &examples[i]).collect();
            let count: f64 = items.iter().map(|p| p.mask.iter().sum::<f64>()).sum();
            if count == 0.0 {
                continue;
            }
            let results: Vec<(f64, Gradients)> = items
                .chunks(cfg.chunk_size)
                .collect::<Vec<_>>()
                .par_iter()
                .map(|c| chunk_pass(model, c, with_pd, 1.0 / count))
                .collect::<Result<_>>()
                .map_err(|e| numeric_at(epoch, e))?;
            let mut iter = results.into_iter();
            let (mut loss, mut grads) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                loss += l;
                grads.accumulate(&g);
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: non-finite loss or gradient")));
            }
            adam.step(model.store_mut(), &grads);
            epoch_sse += loss * count;
            epoch_count += count;
        }
        if epoch_count == 0.0 {
            return Err(Error::Empty("training targets"));
        }
        let loss = epoch_sse / epoch_count;
        observer(epoch, loss);
        losses.push(loss);
        let b = best.last().map_or(loss, |&x: &f64| x.min(loss));
        best.push(b);
        if cfg.patience > 0 && epoch > cfg.patience {
            let before = best[epoch - 1 - cfg.patience];
            if before - b < cfg.min_improvement * before {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainReport { losses, stopped_early })
}

fn prepare_all(examples: &[AugmentedExample], norm: &NormStats, cfg: &ModelConfig, stage: Stage) -> Result<Vec<Prepared>> {
    examples.par_iter().map(|e| prepare(e, norm, cfg, stage)).collect()
}

/// Stage 1. `truth` supplies dense concentration targets; without it the
/// sparse PK observations are used instead.
pub fn train_pk(
    train: &[Patient],
    truth: Option<&[TruthRow]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    model_cfg.validate()?;
    let norm = compute_norm(&flatten_patients(train))?;
    let examples = augment(train, truth, model_cfg.dt)?;
    let prepared = prepare_all(&examples, &norm, model_cfg, Stage::Pk)?;
    let mut model = NeuralPkPd::new(model_cfg.clone(), cfg.seed)?;
    model.set_stage(true, false);
    let report = run_epochs(&mut model, &prepared, false, cfg, observer)?;
    let ckpt = Checkpoint {
        stage: Stage::Pk,
        model,
        norm,
        seed: cfg.seed,
        meta: TrainMeta { epochs: report.losses.len(), lr: cfg.lr, final_loss: report.final_loss() },
    };
    Ok((ckpt, report))
}

/// Stage 2: PK weights copied from `pk` and frozen; loss on platelets only.
pub fn train_pd(
    train: &[Patient],
    pk: &Checkpoint,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    if pk.stage != Stage::Pk {
        return Err(Error::Config("PD training needs a pk-stage checkpoint".into()));
    }
    let model_cfg = pk.model.config().clone();
    let examples = augment(train, None, model_cfg.dt)?;
    let prepared = prepare_all(&examples, &pk.norm, &model_cfg, Stage::Pkpd)?;
    let mut model = pk.model.clone();
    model.set_stage(false, true);
    let report = run_epochs(&mut model, &prepared, true, cfg, observer)?;
    let ckpt = Checkpoint {
        stage: Stage::Pkpd,
        model,
        norm: pk.norm.clone(),
        seed: pk.seed,
        meta: TrainMeta { epochs: report.losses.len(), lr: cfg.lr, final_loss: report.final_loss() },
    };
    Ok((ckpt, report))
}

/// Training-set loss of a checkpoint under its own stage's objective.
pub fn evaluate_loss(ckpt: &Checkpoint, train: &[Patient], truth: Option<&[TruthRow]>) -> Result<f64> {
    let cfg = ckpt.model.config();
    let examples = augment(train, truth, cfg.dt)?;
    let prepared = prepare_all(&examples, &ckpt.norm, cfg, ckpt.stage)?;
    dataset_loss(&ckpt.model, &prepared, ckpt.stage == Stage::Pkpd, TrainConfig::default().chunk_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let constant = TrainConfig { epochs: 10, lr: 0.02, ..Default::default() };
        assert!((1..=10).all(|e| constant.lr_at(e) == 0.02));
        let decay = TrainConfig { lr_final: Some(0.002), ..constant };
        assert_eq!(decay.lr_at(1), 0.02);
        assert!((decay.lr_at(10) - 0.002).abs() < 1e-15);
        // Geometric: the midpoint of epochs 1 and 10 in log space.
        assert!((decay.lr_at(1) * decay.lr_at(10) - decay.lr_at(4) * decay.lr_at(7)).abs() < 1e-15);
        assert!(TrainConfig { lr_final: Some(0.0), ..Default::default() }.validate().is_err());
    }
}
