//! Training loop with validation-based early stopping, the metric suite,
//! and the multi-seed experiment protocol.

use ndarray::{Array1, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, normalize, NormStats, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::adam::Adam;
use crate::nn::loss::mse_loss;
use crate::nn::Module;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            augment: true,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Argument(format!(
                "patience, batch size and max epochs must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights the model carries after training.
    pub best_epoch: usize,
}

/// Stop once the validation loss has not improved for `patience` epochs.
struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Returns (is_new_best, should_stop).
    fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
        }
        (improved, self.epoch - self.best_epoch >= self.patience)
    }
}

fn snapshot(model: &mut Model<f32>) -> Vec<ArrayD<f32>> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push(p.value.clone()));
    model.visit_state(&mut |s| out.push(s.clone()));
    out
}

fn restore(model: &mut Model<f32>, snap: &[ArrayD<f32>]) {
    let mut idx = 0usize;
    model.visit_params(&mut |p| {
        p.value.assign(&snap[idx]);
        idx += 1;
    });
    model.visit_state(&mut |s| {
        s.assign(&snap[idx]);
        idx += 1;
    });
    assert_eq!(idx, snap.len(), "snapshot layout drifted");
}

/// Assemble normalized batch tensors; targets come out standardized.
fn make_batch(
    samples: &[&Sample],
    stats: &NormStats,
    fusion: bool,
) -> Result<(Array4<f32>, Option<Array4<f32>>, Array1<f32>)> {
    let n = samples.len();
    let (c, h, w) = samples[0].s2.dim();
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    let mut patches = if fusion {
        let p = samples[0]
            .s5p
            .as_ref()
            .ok_or_else(|| Error::Argument("fusion training on a sample without a patch".into()))?;
        Some(Array4::<f32>::zeros((n, 1, p.dim().0, p.dim().1)))
    } else {
        None
    };
    let mut targets = Array1::<f32>::zeros(n);
    for (i, s) in samples.iter().enumerate() {
        let normed = normalize(s, stats)?;
        images.index_axis_mut(Axis(0), i).assign(&normed.s2);
        if let Some(p) = &mut patches {
            let patch = normed
                .s5p
                .as_ref()
                .ok_or_else(|| Error::Argument("fusion training on a sample without a patch".into()))?;
            p.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(patch);
        }
        targets[i] = ((s.target - stats.target_mean) / stats.target_std) as f32;
    }
    Ok((images, patches, targets))
}

fn batch_loss(
    model: &mut Model<f32>,
    samples: &[&Sample],
    stats: &NormStats,
    train: bool,
) -> Result<(f64, Option<Array1<f32>>)> {
    let fusion = model.variant() == crate::model::Variant::Fusion;
    let (images, patches, targets) = make_batch(samples, stats, fusion)?;
    let preds = model.forward(&images, patches.as_ref(), train)?;
    let (loss, grad) = mse_loss(&preds, &targets)?;
    Ok((loss as f64, train.then_some(grad)))
}

/// Minimize the MSE on `train_set`, validating each epoch; the returned
/// model carries the weights of the best-validation epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument(format!(
            "empty partition: {} train / {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut opt = Adam::<f32>::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = History {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best_weights = snapshot(model);
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            model.zero_grads();
            let (loss, grad) = batch_loss(model, &refs, stats, true)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            model.backward(&grad.unwrap());
            if cfg.freeze_backbone {
                model.backbone.zero_grads();
            }
            opt.step_module(model);
            loss_sum += loss * chunk.len() as f64;
        }
        history.train_loss.push(loss_sum / train_set.len() as f64);

        let val_loss = validation_loss(model, val_set, stats, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        history.val_loss.push(val_loss);
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best_weights = snapshot(model);
            history.best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    restore(model, &best_weights);
    Ok(history)
}

fn validation_loss(
    model: &mut Model<f32>,
    val_set: &[Sample],
    stats: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    let mut sum = 0.0f64;
    for chunk in val_set.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (loss, _) = batch_loss(model, &refs, stats, false)?;
        sum += loss * chunk.len() as f64;
    }
    Ok(sum / val_set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn r2(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Stats(
            "r2 is undefined for constant targets (zero variance)".into(),
        ));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn check_pairs(predictions: &[f64], targets: &[f64]) -> Result<()> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Argument(format!(
            "metric over mismatched or empty vectors ({} vs {})",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// Model predictions in ug/m^3: denormalized and clamped at zero.
pub fn predict(model: &mut Model<f32>, samples: &[Sample], stats: &NormStats) -> Result<Vec<f64>> {
    let fusion = model.variant() == crate::model::Variant::Fusion;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, patches, _) = make_batch(&refs, stats, fusion)?;
        let preds = model.forward(&images, patches.as_ref(), false)?;
        out.extend(preds.iter().map(|&p| {
            (p as f64 * stats.target_std + stats.target_mean).max(0.0)
        }));
    }
    Ok(out)
}

/// Metrics over the full test set at reporting precision.
pub fn evaluate(model: &mut Model<f32>, test_set: &[Sample], stats: &NormStats) -> Result<Metrics> {
    if test_set.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let preds = predict(model, test_set, stats)?;
    let targets: Vec<f64> = test_set.iter().map(|s| s.target).collect();
    Ok(Metrics {
        mae: mae(&preds, &targets)?,
        mse: mse(&preds, &targets)?,
        r2: r2(&preds, &targets)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Metrics,
}

/// Table-1-style aggregation: mean, sample standard deviation and the
/// best value per metric across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub per_seed: Vec<SeedOutcome>,
    pub failed: Vec<(u64, String)>,
    pub mean: Metrics,
    pub std: Metrics,
    pub best: Metrics,
}

impl ExperimentSummary {
    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }
}

pub fn multi_seed_run(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<Metrics>,
) -> Result<ExperimentSummary> {
    if seeds.len() < 2 {
        return Err(Error::Argument(format!(
            "experiments need at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let mut per_seed = Vec::new();
    let mut failed = Vec::new();
    for &seed in seeds {
        match run(seed) {
            Ok(metrics) => per_seed.push(SeedOutcome { seed, metrics }),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    if per_seed.is_empty() {
        return Err(Error::EmptyDataset("every seed of the experiment failed".into()));
    }
    let field = |f: fn(&Metrics) -> f64| -> Vec<f64> { per_seed.iter().map(|o| f(&o.metrics)).collect() };
    let agg = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let maes = field(|m| m.mae);
    let mses = field(|m| m.mse);
    let r2s = field(|m| m.r2);
    let (mae_m, mae_s) = agg(&maes);
    let (mse_m, mse_s) = agg(&mses);
    let (r2_m, r2_s) = agg(&r2s);
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ExperimentSummary {
        per_seed,
        failed,
        mean: Metrics { mae: mae_m, mse: mse_m, r2: r2_m },
        std: Metrics { mae: mae_s, mse: mse_s, r2: r2_s },
        best: Metrics { mae: min(&maes), mse: min(&mses), r2: max(&r2s) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_norm_stats, SynthConfig};
    use crate::model::Variant;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn early_stopper_follows_the_spec_example() {
        let mut s = EarlyStopper::new(2);
        let losses = [5.0, 4.0, 4.1, 4.2];
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            let (_, stop) = s.observe(l);
            if stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn early_stopper_runs_through_monotone_improvement() {
        let mut s = EarlyStopper::new(2);
        for &l in &[5.0, 4.0, 3.0, 2.0, 1.0] {
            let (improved, stop) = s.observe(l);
            assert!(improved);
            assert!(!stop);
        }
        assert_eq!(s.best_epoch, 5);
    }

    #[test]
    fn metrics_match_hand_calculations() {
        let p = [0.0, 2.0];
        let t = [1.0, 3.0];
        assert_relative_eq!(mae(&p, &t).unwrap(), 1.0);
        assert_relative_eq!(mse(&p, &t).unwrap(), 1.0);
        assert_relative_eq!(r2(&p, &t).unwrap(), 0.0);

        let t2 = [1.0, 2.0, 3.0];
        assert_relative_eq!(r2(&t2.to_vec()[..], &t2).unwrap(), 1.0);
        let mean_pred = [2.0, 2.0, 2.0];
        assert_relative_eq!(r2(&mean_pred, &t2).unwrap(), 0.0);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Argument(_))));
        assert!(matches!(mae(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Stats(_))));
    }

    proptest! {
        #[test]
        fn jensen_mse_at_least_mae_squared(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mae = mae(&p, &t).unwrap();
            let mse = mse(&p, &t).unwrap();
            prop_assert!(mse >= mae * mae - 1e-12);
        }
    }

    #[test]
    fn multi_seed_aggregation_matches_conventions() {
        let metrics = [
            Metrics { mae: 1.0, mse: 2.0, r2: 0.4 },
            Metrics { mae: 2.0, mse: 5.0, r2: 0.5 },
            Metrics { mae: 3.0, mse: 11.0, r2: 0.3 },
        ];
        let summary = multi_seed_run(&[0, 1, 2], |seed| Ok(metrics[seed as usize])).unwrap();
        assert_relative_eq!(summary.mean.mae, 2.0);
        assert_relative_eq!(summary.std.mae, 1.0);
        assert_relative_eq!(summary.best.mae, 1.0);
        assert_relative_eq!(summary.best.r2, 0.5);
        assert!(summary.best.mae <= summary.mean.mae);
        assert!(summary.best.r2 >= summary.mean.r2);
        assert!(!summary.is_partial());
    }

    #[test]
    fn failed_seeds_leave_a_partial_summary() {
        let summary = multi_seed_run(&[0, 1, 2], |seed| {
            if seed == 1 {
                Err(Error::Numeric("blew up".into()))
            } else {
                Ok(Metrics { mae: 1.0, mse: 1.5, r2: 0.9 })
            }
        })
        .unwrap();
        assert!(summary.is_partial());
        assert_eq!(summary.failed.len(), 1);
        assert_eq!(summary.failed[0].0, 1);
        assert_eq!(summary.per_seed.len(), 2);

        assert!(matches!(multi_seed_run(&[0], |_| Ok(metricsink())), Err(Error::Argument(_))));
        assert!(matches!(
            multi_seed_run(&[0, 1], |_| Err::<Metrics, _>(Error::Numeric("x".into()))),
            Err(Error::EmptyDataset(_))
        ));
    }

    fn metricsink() -> Metrics {
        Metrics { mae: 0.0, mse: 0.0, r2: 1.0 }
    }

    fn tiny_dataset(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig {
            image_size: 48,
            ..SynthConfig::new(n, 17)
        };
        crate::dataset::synth_generate(&cfg).unwrap()
    }

    #[test]
    fn training_restores_best_epoch_weights() {
        let data = tiny_dataset(24);
        let (train_set, rest) = data.split_at(16);
        let (val_set, test_set) = rest.split_at(4);
        let stats = compute_norm_stats(train_set).unwrap();
        let mut model = Model::<f32>::with_patch_size(5, Variant::Fusion, 48);
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            patience: 2,
            augment: false,
            ..TrainConfig::default()
        };
        let history = train(&mut model, train_set, val_set, &stats, &cfg).unwrap();
        assert!(!history.val_loss.is_empty());
        let best = history
            .val_loss
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(history.val_loss[history.best_epoch - 1], best);
        // the restored weights reproduce the best validation loss exactly
        let reval = validation_loss(&mut model, val_set, &stats, cfg.batch_size).unwrap();
        assert_relative_eq!(reval, best, max_relative = 1e-6);
        // evaluation is deterministic and clamped
        let m1 = evaluate(&mut model, test_set, &stats).unwrap();
        let m2 = evaluate(&mut model, test_set, &stats).unwrap();
        assert_eq!(m1, m2);
        assert!(predict(&mut model, test_set, &stats).unwrap().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn empty_partitions_are_rejected() {
        let data = tiny_dataset(6);
        let stats = compute_norm_stats(&data).unwrap();
        let mut model = Model::<f32>::with_patch_size(5, Variant::ImageOnly, 48);
        let err = train(&mut model, &data, &[], &stats, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }
}
