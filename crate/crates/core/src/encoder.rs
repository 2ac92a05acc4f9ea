//! Continuous-time encoder: a causal sum-of-exponentials kernel convolved with
//! irregular observations by a left Riemann sum, plus a bias network on a
//! Fourier time embedding.
//!
//! Poles come in conjugate pairs `λ = −softplus(raw) ± iω` (plus optional
//! purely real poles), so the time-domain kernel is real by construction:
//! a pair with residue `A = A_re + iA_im` contributes
//! `2e^{−at}(A_re cos ωt − A_im sin ωt)`.

use std::f64::consts::PI;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::numcore::{softplus, softplus_inv, KernelPart, Mlp1h, MlpVars, Tape, Var};

/// Learnable poles and residues.
///
/// Residue layout: for pair `k`, `A_k[i, j] = res_re[(j, k·dz + i)] + i·res_im[(j, k·dz + i)]`,
/// so a batch of observations `U` (N × dx) projects onto every pole at once
/// with `U · res_re`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceKernel {
    pub dz: usize,
    pub dx: usize,
    pub pair_raw: DMatrix<f64>,
    pub pair_im: DMatrix<f64>,
    pub real_raw: DMatrix<f64>,
    pub res_re: DMatrix<f64>,
    pub res_im: DMatrix<f64>,
    pub res_real: DMatrix<f64>,
}

/// Fourier time features with learnable (softplus-positive) frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub freq_raw: DMatrix<f64>,
}

impl TimeEmbedding {
    /// Frequencies `0.25, 0.5, 1, 2, …`.
    pub fn new(n_freq: usize) -> Self {
        let freq_raw = DMatrix::from_fn(n_freq, 1, |k, _| softplus_inv(0.25 * 2f64.powi(k as i32)));
        Self { freq_raw }
    }

    pub fn from_freqs(freqs: &[f64]) -> Result<Self> {
        if freqs.iter().any(|f| !(*f > 0.0)) {
            return contract("time-embedding frequencies must be positive");
        }
        Ok(Self { freq_raw: DMatrix::from_fn(freqs.len(), 1, |k, _| softplus_inv(freqs[k])) })
    }

    pub fn n_freq(&self) -> usize {
        self.freq_raw.nrows()
    }

    pub fn dim(&self) -> usize {
        2 * self.n_freq()
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.freq_raw.iter().map(|r| softplus(*r)).collect()
    }
}

/// `[sin 2πf₁t, cos 2πf₁t, …, sin 2πf_F t, cos 2πf_F t]`.
pub fn time_embed(e: &TimeEmbedding, t: f64) -> Vec<f64> {
    e.freqs()
        .iter()
        .flat_map(|f| {
            let (s, c) = (2.0 * PI * f * t).sin_cos();
            [s, c]
        })
        .collect()
}

impl LaplaceKernel {
    pub fn zeros(dz: usize, dx: usize, n_pairs: usize, n_real: usize) -> Self {
        Self {
            dz,
            dx,
            pair_raw: DMatrix::zeros(n_pairs, 1),
            pair_im: DMatrix::zeros(n_pairs, 1),
            real_raw: DMatrix::zeros(n_real, 1),
            res_re: DMatrix::zeros(dx, n_pairs * dz),
            res_im: DMatrix::zeros(dx, n_pairs * dz),
            res_real: DMatrix::zeros(dx, n_real * dz),
        }
    }

    /// Decay rates spread geometrically over `[1, 10]`, oscillation
    /// frequencies `0, π, 2π, …`, Gaussian residues of scale `1/√dx`.
    pub fn random<R: Rng>(dz: usize, dx: usize, n_pairs: usize, n_real: usize, rng: &mut R) -> Self {
        let mut k = Self::zeros(dz, dx, n_pairs, n_real);
        let rate = |i: usize, n: usize| {
            if n <= 1 {
                2.0
            } else {
                10f64.powf(i as f64 / (n - 1) as f64)
            }
        };
        for i in 0..n_pairs {
            k.pair_raw[i] = softplus_inv(rate(i, n_pairs));
            k.pair_im[i] = PI * i as f64;
        }
        for i in 0..n_real {
            k.real_raw[i] = softplus_inv(rate(i, n_real));
        }
        let normal = Normal::new(0.0, 1.0 / (dx as f64).sqrt()).expect("valid normal");
        for m in [&mut k.res_re, &mut k.res_im, &mut k.res_real] {
            m.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        k
    }

    /// Kernel with the given poles; residues zero.
    pub fn with_poles(dz: usize, dx: usize, pairs: &[(f64, f64)], reals: &[f64]) -> Result<Self> {
        if pairs.iter().map(|p| p.0).chain(reals.iter().copied()).any(|re| !(re < 0.0)) {
            return contract("pole real parts must be negative");
        }
        let mut k = Self::zeros(dz, dx, pairs.len(), reals.len());
        for (i, (re, im)) in pairs.iter().enumerate() {
            k.pair_raw[i] = softplus_inv(-re);
            k.pair_im[i] = *im;
        }
        for (i, re) in reals.iter().enumerate() {
            k.real_raw[i] = softplus_inv(-re);
        }
        Ok(k)
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_raw.nrows()
    }

    pub fn n_real(&self) -> usize {
        self.real_raw.nrows()
    }

    /// Total pole count `K` (each pair counts twice).
    pub fn n_poles(&self) -> usize {
        2 * self.n_pairs() + self.n_real()
    }

    /// Complex poles `(re, im)`, conjugates included.
    pub fn poles(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_poles());
        for k in 0..self.n_pairs() {
            let re = -softplus(self.pair_raw[k]);
            out.push((re, self.pair_im[k]));
            out.push((re, -self.pair_im[k]));
        }
        out.extend(self.real_raw.iter().map(|r| (-softplus(*r), 0.0)));
        out
    }

    /// Sets entry `(i, j)` of the residue of pair `k` (the conjugate gets `re − i·im`).
    pub fn set_pair_residue(&mut self, k: usize, i: usize, j: usize, re: f64, im: f64) {
        self.res_re[(j, k * self.dz + i)] = re;
        self.res_im[(j, k * self.dz + i)] = im;
    }

    pub fn set_real_residue(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.res_real[(j, k * self.dz + i)] = v;
    }

    pub fn blocks(&self) -> [&DMatrix<f64>; 6] {
        [&self.pair_raw, &self.pair_im, &self.real_raw, &self.res_re, &self.res_im, &self.res_real]
    }

    pub fn blocks_mut(&mut self) -> [&mut DMatrix<f64>; 6] {
        [
            &mut self.pair_raw,
            &mut self.pair_im,
            &mut self.real_raw,
            &mut self.res_re,
            &mut self.res_im,
            &mut self.res_real,
        ]
    }

    pub const BLOCK_NAMES: [&'static str; 6] = ["pair_raw", "pair_im", "real_raw", "res_re", "res_im", "res_real"];

    pub fn to_tape(&self, tape: &mut Tape, first_block: usize) -> KernelVars {
        let b = self.blocks();
        KernelVars {
            pair_raw: tape.param(first_block, b[0]),
            pair_im: tape.param(first_block + 1, b[1]),
            real_raw: tape.param(first_block + 2, b[2]),
            res_re: tape.param(first_block + 3, b[3]),
            res_im: tape.param(first_block + 4, b[4]),
            res_real: tape.param(first_block + 5, b[5]),
            dz: self.dz,
            n_pairs: self.n_pairs(),
            n_real: self.n_real(),
        }
    }

    /// `κ(t) = Σ_k Re(A_k e^{λ_k t})` for `t ≥ 0`, the zero matrix for `t < 0`.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dz, self.dx);
        if t < 0.0 {
            return out;
        }
        for k in 0..self.n_pairs() {
            let e = 2.0 * (-softplus(self.pair_raw[k]) * t).exp();
            let (s, c) = (self.pair_im[k] * t).sin_cos();
            for i in 0..self.dz {
                for j in 0..self.dx {
                    let col = k * self.dz + i;
                    out[(i, j)] += e * (self.res_re[(j, col)] * c - self.res_im[(j, col)] * s);
                }
            }
        }
        for k in 0..self.n_real() {
            let e = (-softplus(self.real_raw[k]) * t).exp();
            for i in 0..self.dz {
                for j in 0..self.dx {
                    out[(i, j)] += e * self.res_real[(j, k * self.dz + i)];
                }
            }
        }
        out
    }
}

/// Tape handles of a [`LaplaceKernel`].
#[derive(Debug, Clone, Copy)]
pub struct KernelVars {
    pub pair_raw: Var,
    pub pair_im: Var,
    pub real_raw: Var,
    pub res_re: Var,
    pub res_im: Var,
    pub res_real: Var,
    dz: usize,
    n_pairs: usize,
    n_real: usize,
}

/// Irregularly sampled observations on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub times: Vec<f64>,
    /// `N × dx`; masked entries are zero.
    pub values: DMatrix<f64>,
    /// `N × dx` of 0/1, 1 = observed.
    pub mask: DMatrix<f64>,
    pub horizon: f64,
}

impl ObservationWindow {
    /// Validates and builds a window; masked entries of `values` are zeroed.
    pub fn new(times: Vec<f64>, mut values: DMatrix<f64>, mask: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let n = times.len();
        if values.nrows() != n || mask.shape() != values.shape() {
            return contract(format!(
                "window shapes: {} times, values {:?}, mask {:?}",
                n,
                values.shape(),
                mask.shape()
            ));
        }
        if !(horizon > 0.0) {
            return contract("window horizon must be positive");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return contract("window times must be strictly increasing");
        }
        if let (Some(first), Some(last)) = (times.first(), times.last()) {
            if *first < 0.0 || *last > horizon {
                return contract(format!("window times must lie in [0, {horizon}]"));
            }
        }
        if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return contract("mask entries must be 0 or 1");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("window values".into()));
        }
        values.component_mul_assign(&mask);
        Ok(Self { times, values, mask, horizon })
    }

    /// Fully observed window sampled at `t_i = i·T/N`, `i = 1..N`.
    pub fn regular(values: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let n = values.nrows();
        let times = (1..=n).map(|i| i as f64 * horizon / n as f64).collect();
        let mask = DMatrix::from_element(n, values.ncols(), 1.0);
        Self::new(times, values, mask, horizon)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dx(&self) -> usize {
        self.values.ncols()
    }

    /// `mask ⊙ x_i · Δt_i` with `t_0 = 0`.
    pub fn weighted_values(&self) -> DMatrix<f64> {
        let mut u = self.values.clone();
        for i in 0..self.len() {
            let prev = if i == 0 { 0.0 } else { self.times[i - 1] };
            let dt = self.times[i] - prev;
            u.row_mut(i).scale_mut(dt);
        }
        u
    }
}

/// Latent values on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub times: Vec<f64>,
    /// `M × dz`.
    pub values: DMatrix<f64>,
    /// Set when the window had no observations and the path is the bias alone.
    pub empty_window: bool,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return contract("encode grid must be nonempty");
    }
    if grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return contract("encode grid times must be finite and >= 0");
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return contract("encode grid must be nondecreasing");
    }
    Ok(())
}

/// Records the encoder on `tape`; returns the `M × dz` path node.
///
/// Grid times may extend past the window horizon: the kernel then
/// extrapolates the decaying response of the observed history.
pub fn encode_on_tape(
    tape: &mut Tape,
    kernel: &KernelVars,
    freq_raw: Var,
    bias: &MlpVars,
    window: &ObservationWindow,
    grid: &[f64],
) -> Result<Var> {
    check_grid(grid)?;
    let emb = tape.time_embed(freq_raw, grid);
    let b = bias.forward(tape, emb);
    if window.is_empty() {
        return Ok(b);
    }
    if tape.value(kernel.res_re).nrows() != window.dx() {
        return contract(format!(
            "window has {} channels, kernel expects {}",
            window.dx(),
            tape.value(kernel.res_re).nrows()
        ));
    }
    let dz = kernel.dz;
    let tau = Rc::new(DMatrix::from_fn(grid.len(), window.len(), |j, i| grid[j] - window.times[i]));
    let u = tape.constant(window.weighted_values());
    let mut acc = b;
    if kernel.n_pairs > 0 {
        let vre = tape.matmul(u, kernel.res_re);
        let vim = tape.matmul(u, kernel.res_im);
        for k in 0..kernel.n_pairs {
            let im = Some((kernel.pair_im, k));
            let ccos = tape.kernel_basis(kernel.pair_raw, k, im, tau.clone(), KernelPart::Cos);
            let csin = tape.kernel_basis(kernel.pair_raw, k, im, tau.clone(), KernelPart::Sin);
            let p = tape.slice_cols(vre, k * dz, dz);
            let q = tape.slice_cols(vim, k * dz, dz);
            let tp = tape.matmul(ccos, p);
            let tq = tape.matmul(csin, q);
            acc = tape.add(acc, tp);
            acc = tape.sub(acc, tq);
        }
    }
    if kernel.n_real > 0 {
        let vr = tape.matmul(u, kernel.res_real);
        for k in 0..kernel.n_real {
            let c = tape.kernel_basis(kernel.real_raw, k, None, tau.clone(), KernelPart::Real);
            let p = tape.slice_cols(vr, k * dz, dz);
            let t = tape.matmul(c, p);
            acc = tape.add(acc, t);
        }
    }
    Ok(acc)
}

/// `z(t⁽ʲ⁾) = Σ_{t_i ≤ t⁽ʲ⁾} κ(t⁽ʲ⁾ − t_i)(mask_i ⊙ x_i)Δt_i + b(t⁽ʲ⁾)`.
pub fn encode(
    kernel: &LaplaceKernel,
    embed: &TimeEmbedding,
    bias: &Mlp1h,
    window: &ObservationWindow,
    grid: &[f64],
) -> Result<LatentPath> {
    if bias.din() != embed.dim() || bias.dout() != kernel.dz {
        return contract("bias network must map the time embedding to dz outputs");
    }
    if window.is_empty() {
        log::warn!("encoding an empty observation window: output is the bias term alone");
    }
    let mut tape = Tape::new();
    let kv = kernel.to_tape(&mut tape, 0);
    let f = tape.param(6, &embed.freq_raw);
    let bv = bias.to_tape(&mut tape, 7);
    let z = encode_on_tape(&mut tape, &kv, f, &bv, window, grid)?;
    Ok(LatentPath { times: grid.to_vec(), values: tape.value(z).clone(), empty_window: window.is_empty() })
}

/// `m` uniform points from `t0` to `t1` inclusive (`m ≥ 2`), or `[t1]` when `m = 1`.
pub fn uniform_grid(t0: f64, t1: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![t1],
        _ => (0..m).map(|j| t0 + (t1 - t0) * j as f64 / (m - 1) as f64).collect(),
    }
}
