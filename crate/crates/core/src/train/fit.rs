use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{composite_loss, predict_dataset, Batch, Model};
use super::{LossWeights, TrainConfig};
use crate::dslob::WindowedDataset;
use crate::error::{contract, Result};
use crate::numcore::AdamState;
use crate::physics::PhysicsConfig;
use crate::rng::{stream, Domain};

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: f64::INFINITY, bad: 0 }
    }

    /// Records a validation loss; returns the new learning rate.
    pub fn step(&mut self, val: f64, lr: f64) -> f64 {
        if val < self.best {
            self.best = val;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub forecast: f64,
    pub pde: f64,
    pub mpr: f64,
    pub consistency: f64,
    pub total: f64,
    pub val_forecast: f64,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    /// Weights in force after rebalancing.
    pub weights: Option<LossWeights>,
    /// Samples on which a physics term was evaluated.
    pub physics_evals: u64,
}

impl History {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forecast MSE in standardized units.
pub(crate) fn forecast_mse(model: &Model, ds: &WindowedDataset) -> Result<f64> {
    let pred = predict_dataset(model, ds)?;
    let s = model.norm.y_std;
    Ok(pred.iter().zip(&ds.targets).map(|(p, y)| ((p - y) / s).powi(2)).sum::<f64>() / ds.len() as f64)
}

/// λ scaled so that each active physics term starts at the fraction
/// `λ⁰` of the forecast loss.
fn rebalance(w: &LossWeights, forecast: f64, parts: [f64; 3]) -> LossWeights {
    let mut out = *w;
    for (lam, c) in [&mut out.lambda1, &mut out.lambda2, &mut out.lambda3].into_iter().zip(parts) {
        if *lam > 0.0 && c > 0.0 && forecast > 0.0 {
            *lam *= (forecast / c).clamp(1e-3, 1e3);
        }
    }
    out
}

/// Epoch loop with validation on the forecast loss only; `model` ends with
/// the parameters of the best validation epoch.
pub fn pretrain(
    model: &mut Model,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
    physics: &PhysicsConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return contract("pretraining needs nonempty train and validation splits");
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut weights = cfg.weights;
    let mut hist = History { best_val: f64::INFINITY, ..History::default() };
    let mut best = model.params.clone();
    let mut stale = 0;
    let mut round = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64, 0));
        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch) {
            let batch = Batch::from_dataset(model, train, chunk);
            let (l, grads) = composite_loss(model, &batch, &weights, physics, cfg.seed, round)?;
            adam.update(&mut model.params, &grads)?;
            round += 1;
            hist.physics_evals += l.physics_evals;
            let k = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.forecast, l.pde, l.mpr, l.consistency, l.total]) {
                *s += v * k;
            }
        }
        let n = train.len() as f64;
        let [forecast, pde, mpr, consistency, total] = sums.map(|s| s / n);
        let val_forecast = forecast_mse(model, val)?;
        hist.epochs.push(EpochRecord {
            epoch: epoch + 1,
            forecast,
            pde,
            mpr,
            consistency,
            total,
            val_forecast,
            lr: adam.lr,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            lambda3: weights.lambda3,
        });
        log::info!("epoch {}: train {total:.5} (forecast {forecast:.5}), val {val_forecast:.5}", epoch + 1);
        if val_forecast < hist.best_val {
            hist.best_val = val_forecast;
            hist.best_epoch = epoch + 1;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        adam.lr = plateau.step(val_forecast, adam.lr);
        if epoch == 0 && cfg.rebalance {
            weights = rebalance(&weights, forecast, [pde, mpr, consistency]);
        }
        if stale >= cfg.patience {
            log::info!("early stop after epoch {}", epoch + 1);
            break;
        }
    }
    model.params = best;
    hist.weights = Some(weights);
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::toy_dataset;
    use crate::train::ForwardMode;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dz: 3,
            hidden: 6,
            n_freq: 2,
            n_pairs: 1,
            n_real: 1,
            sde_steps: 4,
            batch: 4,
            eval_paths: 2,
            epochs: 1,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plateau_halves_once_per_trigger() {
        let mut p = Plateau::new(0.5, 2);
        let mut lr = 1.0;
        let seq = [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.8, 0.85];
        let mut lrs = Vec::new();
        for v in seq {
            lr = p.step(v, lr);
            lrs.push(lr);
        }
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let ds = toy_dataset(4, 5, 2, 21);
        let cfg = small_cfg();
        let phys = PhysicsConfig::default();
        let mut model = Model::new(&ds, &cfg, ForwardMode::Sde).unwrap();
        let all: Vec<usize> = (0..4).collect();
        let batch = Batch::from_dataset(&model, &ds, &all);
        let before = composite_loss(&model, &batch, &cfg.weights, &phys, 99, 0).unwrap().0.total;
        let mut c = cfg.clone();
        c.epochs = 20;
        c.patience = 100;
        c.rebalance = false;
        pretrain(&mut model, &ds, &ds, &c, &phys).unwrap();
        let after = composite_loss(&model, &batch, &cfg.weights, &phys, 99, 0).unwrap().0.total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn keeps_best_validation_parameters() {
        let train = toy_dataset(12, 5, 2, 22);
        let val = toy_dataset(6, 5, 2, 23);
        let mut cfg = small_cfg();
        cfg.epochs = 6;
        cfg.lr = 0.05;
        cfg.patience = 100;
        let mut model = Model::new(&train, &cfg, ForwardMode::Sde).unwrap();
        let h = pretrain(&mut model, &train, &val, &cfg, &PhysicsConfig::default()).unwrap();
        let argmin = h
            .epochs
            .iter()
            .min_by(|a, b| a.val_forecast.partial_cmp(&b.val_forecast).unwrap())
            .unwrap();
        assert_eq!(h.best_epoch, argmin.epoch);
        assert_eq!(forecast_mse(&model, &val).unwrap(), argmin.val_forecast);
    }

    #[test]
    fn physics_free_training_never_evaluates_physics() {
        let ds = toy_dataset(8, 5, 2, 24);
        let mut cfg = small_cfg();
        cfg.weights.lambda1 = 0.0;
        cfg.weights.lambda2 = 0.0;
        let mut model = Model::new(&ds, &cfg, ForwardMode::Sde).unwrap();
        let h = pretrain(&mut model, &ds, &ds, &cfg, &PhysicsConfig::default()).unwrap();
        assert_eq!(h.physics_evals, 0);
        let mut cfg = small_cfg();
        cfg.weights.lambda1 = 0.1;
        let mut model = Model::new(&ds, &cfg, ForwardMode::Sde).unwrap();
        let h = pretrain(&mut model, &ds, &ds, &cfg, &PhysicsConfig::default()).unwrap();
        assert_eq!(h.physics_evals, 8);
    }

    #[test]
    fn rebalance_matches_forecast_scale() {
        let w = LossWeights { lambda1: 0.1, lambda2: 0.1, lambda3: 0.0, lambda4: 0.0 };
        let r = rebalance(&w, 2.0, [4.0, 0.0, 1.0]);
        assert_eq!(r.lambda1, 0.05);
        assert_eq!(r.lambda2, 0.1);
        assert_eq!(r.lambda3, 0.0);
    }
}
