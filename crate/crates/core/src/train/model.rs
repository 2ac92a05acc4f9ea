use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Anchor, LossWeights, TrainConfig};
use crate::dslob::WindowedDataset;
use crate::encoder::{encode, encode_on_tape, KernelVars, LaplaceKernel, ObservationWindow, TimeEmbedding};
use crate::error::{contract, Error, Result};
use crate::numcore::{Mlp1h, MlpVars, ParamSet, Tape, Var};
use crate::physics::{consistency_on_tape, fk_residual_at, mpr_hinge_on_tape, PhysicsConfig, PricingNet};
use crate::rng::{key, stream, Domain};
use crate::sde::{mpr_on_tape, sde_grid, sde_noise, simulate_on_tape, simulate_with_noise, DiffusionNet, DriftNet, NeuralSde, SdeVars};

/// Seed of the noise paths used for prediction.
pub const EVAL_SEED: u64 = 0xE7A1_5EED;
/// Window horizon: observation `i` of `L` sits at `i/L`.
pub const HORIZON: f64 = 1.0;

const KERNEL: usize = 0;
const FREQ: usize = 6;
const BIAS: usize = 7;
const SDE: usize = 11;
const VALUE: usize = 23;
const HEAD_W: usize = 27;
const HEAD_B: usize = 28;
const N_BLOCKS: usize = 29;

/// How the latent state is carried to the prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    Sde,
    /// Drift only.
    Ode,
    /// Terminal encoder state, no latent evolution.
    EncoderOnly,
}

impl ForwardMode {
    pub(crate) fn code(&self) -> f64 {
        match self {
            Self::Sde => 0.0,
            Self::Ode => 1.0,
            Self::EncoderOnly => 2.0,
        }
    }

    pub(crate) fn from_code(c: f64) -> Result<Self> {
        match c {
            0.0 => Ok(Self::Sde),
            1.0 => Ok(Self::Ode),
            2.0 => Ok(Self::EncoderOnly),
            _ => Err(Error::Format(format!("unknown forward mode code {c}"))),
        }
    }
}

/// Per-channel input scaling and target scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardizer {
    /// Channel moments over every window row; zero spreads become 1.
    pub fn fit(ds: &WindowedDataset) -> Result<Self> {
        if ds.len() < 2 {
            return contract("standardizer needs at least two windows");
        }
        let dx = ds.dx;
        let rows = ds.values().len() / dx;
        let mut mean = vec![0.0; dx];
        for row in ds.values().chunks_exact(dx) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; dx];
        for row in ds.values().chunks_exact(dx) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let spread = |v: f64| if v > 1e-24 { v.sqrt() } else { 1.0 };
        let x_std = var.iter().map(|s| spread(s / rows as f64)).collect();
        let n = ds.len() as f64;
        let y_mean = ds.targets.iter().sum::<f64>() / n;
        let y_var = ds.targets.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let out = Self { x_mean: mean, x_std, y_mean, y_std: spread(y_var) };
        if out.x_mean.iter().chain(&out.x_std).chain([&out.y_mean, &out.y_std]).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("standardizer moments".into()));
        }
        Ok(out)
    }

    pub fn identity(dx: usize) -> Self {
        Self { x_mean: vec![0.0; dx], x_std: vec![1.0; dx], y_mean: 0.0, y_std: 1.0 }
    }

    /// Standardized `L × dx` window from a row-major slice.
    pub fn window(&self, raw: &[f64], window_len: usize) -> DMatrix<f64> {
        let dx = self.x_mean.len();
        DMatrix::from_fn(window_len, dx, |i, j| (raw[i * dx + j] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn y_to_std(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn y_from_std(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// Every trainable block of the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kernel: LaplaceKernel,
    pub embed: TimeEmbedding,
    /// Encoder bias `b(t)`.
    pub bias: Mlp1h,
    pub drift: DriftNet,
    pub diffusion: DiffusionNet,
    /// Auxiliary value function of the pricing PDE.
    pub value: PricingNet,
    /// `1 × dz`.
    pub head_w: DMatrix<f64>,
    /// `1 × 1`.
    pub head_b: DMatrix<f64>,
}

/// Tape handles of [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub kernel: KernelVars,
    pub freq: Var,
    pub bias: MlpVars,
    pub sde: SdeVars,
    pub value: MlpVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelParams {
    pub fn init(dx: usize, cfg: &TrainConfig) -> Self {
        let mut rng = stream(cfg.seed, Domain::Init, 0, 0);
        let embed = TimeEmbedding::new(cfg.n_freq);
        let e = embed.dim();
        let kernel = LaplaceKernel::random(cfg.dz, dx, cfg.n_pairs, cfg.n_real, &mut rng);
        let mut bias = Mlp1h::random(e, cfg.hidden, cfg.dz, &mut rng);
        bias.w2 *= 0.1;
        let drift = DriftNet::random(cfg.dz, e, cfg.hidden, &mut rng);
        let diffusion = DiffusionNet::random(cfg.dz, e, cfg.hidden, cfg.vol0, &mut rng);
        let value = PricingNet::random(cfg.dz, cfg.hidden, &mut rng);
        let a = 1.0 / (cfg.dz as f64).sqrt();
        let head_w = DMatrix::from_fn(1, cfg.dz, |_, _| rng.random_range(-a..a));
        Self { kernel, embed, bias, drift, diffusion, value, head_w, head_b: DMatrix::zeros(1, 1) }
    }

    pub fn dz(&self) -> usize {
        self.head_w.ncols()
    }

    pub fn dx(&self) -> usize {
        self.kernel.res_re.nrows()
    }

    pub fn to_tape(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            kernel: self.kernel.to_tape(tape, KERNEL),
            freq: tape.param(FREQ, &self.embed.freq_raw),
            bias: self.bias.to_tape(tape, BIAS),
            sde: SdeVars::new(tape, &self.drift, &self.diffusion, SDE),
            value: self.value.net.to_tape(tape, VALUE),
            head_w: tape.param(HEAD_W, &self.head_w),
            head_b: tape.param(HEAD_B, &self.head_b),
        }
    }

    /// Copies values from blocks in [`ParamSet`] order.
    pub fn set_blocks(&mut self, values: &[DMatrix<f64>]) -> Result<()> {
        let mut blocks = self.blocks_mut();
        if blocks.len() != values.len() {
            return contract(format!("expected {} blocks, got {}", blocks.len(), values.len()));
        }
        for (b, v) in blocks.iter_mut().zip(values) {
            if b.shape() != v.shape() {
                return contract(format!("block shape {:?} does not match {:?}", v.shape(), b.shape()));
            }
            b.copy_from(v);
        }
        Ok(())
    }
}

fn mlp_names(prefix: &str) -> impl Iterator<Item = String> + '_ {
    Mlp1h::BLOCK_NAMES.iter().map(move |n| format!("{prefix}.{n}"))
}

impl ParamSet for ModelParams {
    fn block_names(&self) -> Vec<String> {
        let mut out: Vec<String> = LaplaceKernel::BLOCK_NAMES.iter().map(|n| format!("encoder.kernel.{n}")).collect();
        out.push("encoder.freq_raw".into());
        out.extend(mlp_names("encoder.bias"));
        out.extend(mlp_names("sde.drift"));
        out.extend(mlp_names("sde.lnet"));
        out.extend(mlp_names("sde.dnet"));
        out.extend(mlp_names("value"));
        out.push("head.w".into());
        out.push("head.b".into());
        debug_assert_eq!(out.len(), N_BLOCKS);
        out
    }

    fn blocks(&self) -> Vec<&DMatrix<f64>> {
        let mut out: Vec<&DMatrix<f64>> = self.kernel.blocks().into();
        out.push(&self.embed.freq_raw);
        out.extend(self.bias.blocks());
        out.extend(self.drift.net.blocks());
        out.extend(self.diffusion.lnet.blocks());
        out.extend(self.diffusion.dnet.blocks());
        out.extend(self.value.net.blocks());
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out: Vec<&mut DMatrix<f64>> = self.kernel.blocks_mut().into();
        out.push(&mut self.embed.freq_raw);
        out.extend(self.bias.blocks_mut());
        out.extend(self.drift.net.blocks_mut());
        out.extend(self.diffusion.lnet.blocks_mut());
        out.extend(self.diffusion.dnet.blocks_mut());
        out.extend(self.value.net.blocks_mut());
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// Non-trainable shape of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub window_len: usize,
    pub sde_steps: usize,
    pub anchor: Anchor,
    pub mode: ForwardMode,
    pub eval_paths: usize,
}

impl ModelSpec {
    /// `M + 1` SDE grid points.
    pub fn grid(&self) -> Vec<f64> {
        match self.anchor {
            Anchor::End => sde_grid(HORIZON, HORIZON, self.sde_steps),
            Anchor::Start => sde_grid(0.0, HORIZON, self.sde_steps),
        }
    }
}

/// Parameters, scaling and forward-pass shape: everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub norm: Standardizer,
    pub spec: ModelSpec,
}

impl Model {
    pub fn new(train: &WindowedDataset, cfg: &TrainConfig, mode: ForwardMode) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: ModelParams::init(train.dx, cfg),
            norm: Standardizer::fit(train)?,
            spec: ModelSpec {
                window_len: train.window_len,
                sde_steps: cfg.sde_steps,
                anchor: cfg.anchor,
                mode,
                eval_paths: cfg.eval_paths,
            },
        })
    }

    fn check_dataset(&self, ds: &WindowedDataset) -> Result<()> {
        if ds.window_len != self.spec.window_len || ds.dx != self.params.dx() {
            return contract(format!(
                "dataset windows are {}×{}, model expects {}×{}",
                ds.window_len,
                ds.dx,
                self.spec.window_len,
                self.params.dx()
            ));
        }
        Ok(())
    }
}

/// Result of one forward pass in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub y_hat: f64,
    /// `(M+1) × dz` latent states; one row in encoder-only mode.
    pub states: DMatrix<f64>,
    /// Encoder path on the same grid.
    pub enc_path: DMatrix<f64>,
}

/// `ŷ = w·z_M + b` for a standardized window; `noise` is `M × dz` and is
/// ignored unless the mode is [`ForwardMode::Sde`].
pub fn forward_pass(model: &Model, window: &DMatrix<f64>, noise: Option<&DMatrix<f64>>) -> Result<ForwardOutput> {
    let p = &model.params;
    let obs = ObservationWindow::regular(window.clone(), HORIZON)?;
    let (grid, mode) = match model.spec.mode {
        ForwardMode::EncoderOnly => (vec![HORIZON], ForwardMode::EncoderOnly),
        m => (model.spec.grid(), m),
    };
    let enc = encode(&p.kernel, &p.embed, &p.bias, &obs, &grid)?.values;
    let states = if mode == ForwardMode::EncoderOnly {
        enc.clone()
    } else {
        let m = grid.len() - 1;
        let zeros;
        let eps = match (mode, noise) {
            (ForwardMode::Sde, Some(n)) => n,
            (ForwardMode::Sde, None) => return contract("SDE forward pass needs a noise matrix"),
            _ => {
                zeros = DMatrix::zeros(m, p.dz());
                &zeros
            }
        };
        let dynamics = NeuralSde { drift: &p.drift, diffusion: &p.diffusion, embed: &p.embed };
        let z0: DVector<f64> = enc.row(0).transpose();
        simulate_with_noise(&dynamics, &z0, &grid, eps)?
    };
    let last = states.row(states.nrows() - 1);
    let y_hat = (&p.head_w * last.transpose())[0] + p.head_b[0];
    if !y_hat.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(ForwardOutput { y_hat, states, enc_path: enc })
}

fn eval_noise(model: &Model, sample: u64, path: usize) -> DMatrix<f64> {
    sde_noise(key(EVAL_SEED, Domain::SdeNoise, path as u64, 0), sample, model.spec.sde_steps, model.params.dz())
}

/// Standardized prediction averaged over the evaluation noise paths.
fn predict_std(model: &Model, window: &DMatrix<f64>, sample: u64) -> Result<f64> {
    if model.spec.mode != ForwardMode::Sde {
        return Ok(forward_pass(model, window, None)?.y_hat);
    }
    let k = model.spec.eval_paths.max(1);
    let mut acc = 0.0;
    for path in 0..k {
        acc += forward_pass(model, window, Some(&eval_noise(model, sample, path)))?.y_hat;
    }
    Ok(acc / k as f64)
}

/// Predictions in target units for every window; window `i` uses noise
/// sample `i`, so results do not depend on thread count.
pub fn predict_dataset(model: &Model, ds: &WindowedDataset) -> Result<Vec<f64>> {
    model.check_dataset(ds)?;
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let w = model.norm.window(ds.window_slice(i), ds.window_len);
            predict_std(model, &w, i as u64).map(|y| model.norm.y_from_std(y))
        })
        .collect()
}

/// Standardized windows and targets with stable sample ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub windows: Vec<DMatrix<f64>>,
    pub targets: Vec<f64>,
    /// Keys the SDE noise and collocation draws.
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn from_dataset(model: &Model, ds: &WindowedDataset, idx: &[usize]) -> Self {
        Self {
            windows: idx.iter().map(|&i| model.norm.window(ds.window_slice(i), ds.window_len)).collect(),
            targets: idx.iter().map(|&i| model.norm.y_to_std(ds.targets[i])).collect(),
            ids: idx.iter().map(|&i| i as u64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Batch means of each loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub forecast: f64,
    pub pde: f64,
    pub mpr: f64,
    pub consistency: f64,
    /// `forecast + λ₁·pde + λ₂·mpr + λ₃·consistency`.
    pub total: f64,
    /// Samples on which the PDE or MPR term was evaluated.
    pub physics_evals: u64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.forecast + w.lambda1 * self.pde + w.lambda2 * self.mpr + w.lambda3 * self.consistency
    }
}

struct SampleOut {
    parts: [f64; 4],
    physics: bool,
    grads: Vec<DMatrix<f64>>,
}

fn add_scaled(tape: &mut Tape, acc: Var, term: Var, w: f64) -> Var {
    let t = tape.scale(term, w);
    tape.add(acc, t)
}

#[allow(clippy::too_many_arguments)]
fn sample_loss(
    model: &Model,
    window: &DMatrix<f64>,
    target: f64,
    id: u64,
    weights: &LossWeights,
    physics: &PhysicsConfig,
    seed: u64,
    round: u64,
    n_coll: usize,
) -> Result<SampleOut> {
    let p = &model.params;
    let obs = ObservationWindow::regular(window.clone(), HORIZON)?;
    let mut tape = Tape::new();
    let v = p.to_tape(&mut tape);
    let y = tape.constant(DMatrix::from_element(1, 1, target));
    let mut parts = [0.0; 4];
    let mut physics_used = false;

    let loss = if model.spec.mode == ForwardMode::EncoderOnly {
        let enc = encode_on_tape(&mut tape, &v.kernel, v.freq, &v.bias, &obs, &[HORIZON])?;
        let pred = tape.linear(enc, v.head_w, Some(v.head_b));
        let err = tape.sub(pred, y);
        let f = tape.square(err);
        parts[0] = tape.scalar(f);
        f
    } else {
        let grid = model.spec.grid();
        let m = model.spec.sde_steps;
        let enc = encode_on_tape(&mut tape, &v.kernel, v.freq, &v.bias, &obs, &grid)?;
        let z0 = tape.row(enc, 0);
        let noise = match model.spec.mode {
            ForwardMode::Sde => Some(sde_noise(key(seed, Domain::SdeNoise, round, 0), id, m, p.dz())),
            _ => None,
        };
        let path = simulate_on_tape(&mut tape, &v.sde, v.freq, z0, &grid, noise.as_ref())?;
        let pred = tape.linear(path.states[m], v.head_w, Some(v.head_b));
        let err = tape.sub(pred, y);
        let f = tape.square(err);
        parts[0] = tape.scalar(f);
        let mut total = f;

        if weights.lambda1 > 0.0 {
            // collocation on the simulated path; the residual is
            // differentiated through the states as well
            let mut rng = stream(seed, Domain::Collocation, round, id);
            let mut acc: Option<Var> = None;
            for _ in 0..n_coll {
                let j = rng.random_range(0..=m);
                let res = fk_residual_at(&mut tape, &v.value, &v.sde, v.freq, path.states[j], &grid[j..=j], physics.r)?;
                let sq = tape.square(res);
                acc = Some(match acc {
                    Some(a) => tape.add(a, sq),
                    None => sq,
                });
            }
            let pde = tape.scale(acc.expect("n_coll >= 1"), 1.0 / n_coll as f64);
            let pde = tape.sum(pde);
            parts[1] = tape.scalar(pde);
            total = add_scaled(&mut tape, total, pde, weights.lambda1);
            physics_used = true;
        }
        if weights.lambda2 > 0.0 {
            let mut acc: Option<Var> = None;
            for c in &path.coeffs {
                let lam = mpr_on_tape(&mut tape, c);
                let h = mpr_hinge_on_tape(&mut tape, lam, physics.kappa);
                acc = Some(match acc {
                    Some(a) => tape.add(a, h),
                    None => h,
                });
            }
            let mpr = tape.scale(acc.expect("M >= 1"), 1.0 / m as f64);
            parts[2] = tape.scalar(mpr);
            total = add_scaled(&mut tape, total, mpr, weights.lambda2);
            physics_used = true;
        }
        if weights.lambda3 > 0.0 {
            let c = consistency_on_tape(&mut tape, &path.states, enc)?;
            parts[3] = tape.scalar(c);
            total = add_scaled(&mut tape, total, c, weights.lambda3);
        }
        total
    };

    let adj = tape.backward(loss)?;
    let mut grads = p.zero_grads();
    tape.accumulate_param_grads(&adj, &mut grads);
    Ok(SampleOut { parts, physics: physics_used, grads })
}

/// Batch-mean composite loss and its gradient with respect to
/// [`ModelParams`] blocks.
///
/// `(seed, round)` key the SDE noise and collocation draws; the same keys
/// give the same loss.
pub fn composite_loss(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    physics: &PhysicsConfig,
    seed: u64,
    round: u64,
) -> Result<(LossBreakdown, Vec<DMatrix<f64>>)> {
    let n = batch.len();
    if n == 0 || batch.windows.len() != n || batch.ids.len() != n {
        return contract("composite loss needs a nonempty, consistent batch");
    }
    weights.validate()?;
    physics.validate()?;
    let n_coll = physics.n_coll.div_ceil(n).max(1);
    let outs: Vec<SampleOut> = (0..n)
        .into_par_iter()
        .map(|i| {
            sample_loss(model, &batch.windows[i], batch.targets[i], batch.ids[i], weights, physics, seed, round, n_coll)
        })
        .collect::<Result<_>>()?;

    // fixed reduction order
    let mut grads = model.params.zero_grads();
    let mut sums = [0.0; 4];
    let mut physics_evals = 0;
    for o in &outs {
        for (g, s) in grads.iter_mut().zip(&o.grads) {
            *g += s;
        }
        for (a, b) in sums.iter_mut().zip(o.parts) {
            *a += b;
        }
        physics_evals += o.physics as u64;
    }
    let inv = 1.0 / n as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    let mut out = LossBreakdown {
        forecast: sums[0] * inv,
        pde: sums[1] * inv,
        mpr: sums[2] * inv,
        consistency: sums[3] * inv,
        total: 0.0,
        physics_evals,
    };
    out.total = out.weighted_total(weights);
    for (name, v) in [("forecast", out.forecast), ("pde", out.pde), ("mpr", out.mpr), ("consistency", out.consistency)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("composite loss gradient".into()));
    }
    Ok((out, grads))
}
