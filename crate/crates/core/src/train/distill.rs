use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::model::{predict_dataset, Model};
use super::TrainConfig;
use crate::dslob::WindowedDataset;
use crate::error::{contract, Result};
use crate::numcore::AdamState;
use crate::rng::{stream, Domain};
use crate::symbolic::{build_library, distill_loss_grad, expression_from_coefficients, gumbel_noise, harden, BasisLibrary, SymbolicHead};

/// Learning rate at the last distillation step relative to the first.
const LR_DECAY: f64 = 1e-2;
/// Keeps distillation shuffles apart from pretraining shuffles.
const SHUFFLE_TAG: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillResult {
    /// Library with every selection slot resolved to one entry.
    pub library: BasisLibrary,
    /// One raw-feature coefficient per library entry.
    pub coefficients: DVector<f64>,
    pub expression: String,
    /// Mean objective per epoch.
    pub losses: Vec<f64>,
    /// MSE of the hardened expression against the teacher.
    pub teacher_mse: f64,
}

impl DistillResult {
    pub fn head(&self) -> SymbolicHead {
        let mut h = SymbolicHead::new(&self.library, 0.0);
        h.weights.copy_from(&self.coefficients);
        h
    }
}

/// Least squares on the columns with nonzero weight; singular directions
/// below `1e-10·σ_max` are dropped.
fn refit_support(features: &DMatrix<f64>, target: &[f64], w: &mut [f64]) {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] != 0.0).collect();
    if support.is_empty() {
        return;
    }
    let a = features.select_columns(&support);
    let svd = a.svd(true, true);
    let eps = 1e-10 * svd.singular_values.max();
    let b = DVector::from_column_slice(target);
    if let Ok(sol) = svd.solve(&b, eps) {
        if sol.iter().all(|v| v.is_finite()) {
            for (&j, v) in support.iter().zip(sol.iter()) {
                w[j] = *v;
            }
        }
    }
}

/// Fits the symbolic head to the frozen model's predictions on `train`.
pub fn distill(model: &Model, train: &WindowedDataset, cfg: &TrainConfig) -> Result<DistillResult> {
    let teacher = predict_dataset(model, train)?;
    let lib = build_library(train.dx, train.window_len, &cfg.library)?;
    let windows: Vec<DMatrix<f64>> = (0..train.len()).map(|i| train.window(i)).collect();
    let refs: Vec<&DMatrix<f64>> = windows.iter().collect();
    let features = lib.feature_matrix(&refs)?;
    distill_features(&lib, &features, &teacher, cfg)
}

/// Adam on the squared error with a proximal L1 step, with features and
/// teacher rescaled to unit RMS; the temperature anneals geometrically from
/// `tau_start` to `tau_end` across epochs.
pub fn distill_features(lib: &BasisLibrary, features: &DMatrix<f64>, teacher: &[f64], cfg: &TrainConfig) -> Result<DistillResult> {
    let (n, k) = features.shape();
    if n == 0 || teacher.len() != n || k != lib.len() {
        return contract("distillation needs one teacher value per feature row");
    }
    let scale: Vec<f64> = features
        .column_iter()
        .map(|c| {
            let rms = (c.norm_squared() / n as f64).sqrt();
            if rms > 1e-300 && rms.is_finite() {
                rms
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, k, |i, j| features[(i, j)] / scale[j]);
    let t_rms = (teacher.iter().map(|t| t * t).sum::<f64>() / n as f64).sqrt();
    let t_scale = if t_rms > 1e-300 && t_rms.is_finite() { t_rms } else { 1.0 };
    let target: Vec<f64> = teacher.iter().map(|t| t / t_scale).collect();

    let mut head = SymbolicHead::new(lib, 0.0);
    let mut adam = AdamState::new(&head, cfg.distill_lr);
    let epochs = cfg.distill_epochs;
    let batches = n.div_ceil(cfg.batch);
    let total_steps = (epochs * batches).max(1);
    let lambda = cfg.weights.lambda4;
    let mut losses = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for e in 0..epochs {
        let frac = if epochs > 1 { e as f64 / (epochs - 1) as f64 } else { 1.0 };
        head.tau = cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, SHUFFLE_TAG + e as u64, 0));
        let mut acc = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let f = scaled.select_rows(chunk);
            let t: Vec<f64> = chunk.iter().map(|&i| target[i]).collect();
            let g = gumbel_noise(cfg.seed, step, k);
            let (mse, grads) = distill_loss_grad(&head, lib, &f, &t, &g)?;
            acc += (mse + lambda * head.weights.abs().sum()) * chunk.len() as f64;
            adam.lr = cfg.distill_lr * LR_DECAY.powf(step as f64 / total_steps as f64);
            adam.update(&mut head, &grads)?;
            // proximal L1 step in the Adam metric: a weight survives only
            // while its squared-error gradient keeps exceeding λ
            let bc = 1.0 - adam.beta2.powi(adam.step as i32);
            for (w, v) in head.weights.iter_mut().zip(adam.v[0].iter()) {
                let shrink = adam.lr * lambda / ((v / bc).sqrt() + adam.eps);
                *w = w.signum() * (w.abs() - shrink).max(0.0);
            }
            step += 1;
        }
        losses.push(acc / n as f64);
        log::info!("distill epoch {}: loss {:.6} (tau {:.3})", e + 1, acc / n as f64, head.tau);
    }

    let (hard, plain) = harden(&head, lib)?;
    let mut w: Vec<f64> = hard.weights.iter().copied().collect();
    if cfg.refit {
        refit_support(&scaled, &target, &mut w);
    }
    let coefficients = DVector::from_fn(k, |j, _| w[j] * t_scale / scale[j]);
    let pred = features * &coefficients;
    let teacher_mse = pred.iter().zip(teacher).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
    let expression = expression_from_coefficients(&coefficients, &plain, cfg.expr_threshold);
    Ok(DistillResult { library: plain, coefficients, expression, losses, teacher_mse })
}
