use serde::{Deserialize, Serialize};

use crate::conformal::project_simplex;
use crate::error::{contract, Error, Result};
use crate::rng::{normals, Domain};

/// `σ²_t = ω + α r²_{t−1} + β σ²_{t−1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub const ALPHA_AMPLIFY: f64 = 1.2;
pub const BETA_AMPLIFY: f64 = 1.1;
pub const BETA_CAP: f64 = 0.95;
pub const MAX_PERSISTENCE: f64 = 0.999;

impl GarchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.alpha >= 0.0 && self.beta >= 0.0) || !self.omega.is_finite() {
            return contract(format!("invalid GARCH parameters {self:?}"));
        }
        Ok(())
    }

    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta
    }

    /// `(ω, 1.2α, min(0.95, 1.1β))`.
    pub fn amplified(&self) -> Self {
        Self { omega: self.omega, alpha: ALPHA_AMPLIFY * self.alpha, beta: (BETA_AMPLIFY * self.beta).min(BETA_CAP) }
    }

    /// `ω/(1 − α − β)`, or `None` when not covariance stationary.
    pub fn unconditional_variance(&self) -> Option<f64> {
        let p = self.persistence();
        (p < 1.0).then(|| self.omega / (1.0 - p))
    }
}

fn sample_variance(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Gaussian log-likelihood with `σ²_0` given.
pub fn garch_loglik(p: &GarchParams, r: &[f64], sigma0_sq: f64) -> f64 {
    loglik_grad(p, r, sigma0_sq, false).0
}

fn loglik_grad(p: &GarchParams, r: &[f64], sigma0_sq: f64, want_grad: bool) -> (f64, [f64; 3]) {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut s2 = sigma0_sq;
    let mut ds = [0.0; 3];
    let mut ll = 0.0;
    let mut g = [0.0; 3];
    for t in 0..r.len() {
        if t > 0 {
            let prev_r2 = r[t - 1] * r[t - 1];
            if want_grad {
                ds = [1.0 + p.beta * ds[0], prev_r2 + p.beta * ds[1], s2 + p.beta * ds[2]];
            }
            s2 = p.omega + p.alpha * prev_r2 + p.beta * s2;
        }
        if !(s2 > 0.0) {
            return (f64::NEG_INFINITY, [0.0; 3]);
        }
        let r2 = r[t] * r[t];
        ll -= 0.5 * (ln2pi + s2.ln() + r2 / s2);
        if want_grad {
            let c = -0.5 * (1.0 / s2 - r2 / (s2 * s2));
            for k in 0..3 {
                g[k] += c * ds[k];
            }
        }
    }
    (ll, g)
}

/// Feasible set `{ω ≥ ω_min, α, β ≥ 0, α + β ≤ 0.999}`.
fn project(x: [f64; 3], omega_min: f64) -> [f64; 3] {
    let omega = x[0].max(omega_min);
    let (a, b) = (x[1].max(0.0), x[2].max(0.0));
    if a + b <= MAX_PERSISTENCE {
        return [omega, a, b];
    }
    let w = project_simplex(&[x[1] / MAX_PERSISTENCE, x[2] / MAX_PERSISTENCE]);
    [omega, w[0] * MAX_PERSISTENCE, w[1] * MAX_PERSISTENCE]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub params: GarchParams,
    pub loglik: f64,
    pub iterations: usize,
}

pub const GARCH_MAX_ITER: usize = 50_000;
pub const GARCH_TOL: f64 = 1e-9;

/// Quasi-MLE by spectral projected gradient ascent with a nonmonotone
/// Armijo search; returns are standardised internally and `ω` is mapped back.
pub fn fit_garch11(returns: &[f64]) -> Result<GarchFit> {
    if returns.len() < 100 {
        return contract("GARCH fit needs at least 100 returns");
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("garch returns".into()));
    }
    let v = sample_variance(returns);
    if !(v > 0.0) {
        return Err(Error::Degenerate("constant returns have no GARCH fit".into()));
    }
    let sd = v.sqrt();
    let z: Vec<f64> = returns.iter().map(|r| r / sd).collect();
    let omega_min = 1e-10;
    let f = |x: &[f64; 3]| loglik_grad(&GarchParams { omega: x[0], alpha: x[1], beta: x[2] }, &z, 1.0, true);

    let mut x = project([0.05, 0.05, 0.9], omega_min);
    let (mut fx, mut gx) = f(&x);
    let mut history = vec![fx];
    let mut lambda = 1e-4;
    for it in 1..=GARCH_MAX_ITER {
        let trial = project([x[0] + lambda * gx[0], x[1] + lambda * gx[1], x[2] + lambda * gx[2]], omega_min);
        let d = [trial[0] - x[0], trial[1] - x[1], trial[2] - x[2]];
        let slope: f64 = (0..3).map(|k| gx[k] * d[k]).sum();
        if d.iter().all(|v| v.abs() < 1e-14) {
            return Ok(finish(x, fx, it, v, returns.len()));
        }
        let f_ref = history.iter().rev().take(10).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let (mut xn, mut fxn, mut gxn);
        let mut halvings = 0;
        loop {
            xn = [x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]];
            (fxn, gxn) = f(&xn);
            if fxn >= f_ref + 1e-4 * t * slope || halvings > 60 {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        if halvings > 60 && fxn < fx {
            // no ascent left at machine precision
            return Ok(finish(x, fx, it, v, returns.len()));
        }
        let s: Vec<f64> = (0..3).map(|k| xn[k] - x[k]).collect();
        let y: Vec<f64> = (0..3).map(|k| gxn[k] - gx[k]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        lambda = if sy < 0.0 { (ss / -sy).clamp(1e-12, 1e6) } else { 1e6 };
        let improve = fxn - fx;
        x = xn;
        fx = fxn;
        gx = gxn;
        history.push(fx);
        if improve.abs() < GARCH_TOL {
            return Ok(finish(x, fx, it, v, returns.len()));
        }
    }
    let p = finish(x, fx, GARCH_MAX_ITER, v, returns.len()).params;
    Err(Error::NoConvergence {
        what: "GARCH(1,1) fit",
        iterations: GARCH_MAX_ITER,
        residual: f64::NAN,
        last: vec![p.omega, p.alpha, p.beta],
    })
}

fn finish(x: [f64; 3], ll_std: f64, iterations: usize, var: f64, n: usize) -> GarchFit {
    // r = sd·z rescales ω by var and shifts the likelihood by −n/2·ln var
    GarchFit {
        params: GarchParams { omega: x[0] * var, alpha: x[1], beta: x[2] },
        loglik: ll_std - 0.5 * n as f64 * var.ln(),
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarchPath {
    pub returns: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `α + β ≥ 1` for the simulated parameters.
    pub explosive: bool,
}

/// Recursion driven by the given standard-normal shocks.
pub fn simulate_garch(p: &GarchParams, sigma0_sq: f64, eps: &[f64]) -> Result<GarchPath> {
    p.validate()?;
    if !(sigma0_sq >= 0.0) {
        return contract("initial variance must be nonnegative");
    }
    let mut s2 = sigma0_sq;
    let mut returns = Vec::with_capacity(eps.len());
    let mut sigma = Vec::with_capacity(eps.len());
    for (t, e) in eps.iter().enumerate() {
        if t > 0 {
            let r = returns[t - 1];
            s2 = p.omega + p.alpha * r * r + p.beta * s2;
        }
        let s = s2.sqrt();
        sigma.push(s);
        returns.push(s * e);
    }
    Ok(GarchPath { returns, sigma, explosive: p.persistence() >= 1.0 })
}

/// Amplified recursion started at the fitted unconditional variance.
pub fn amplify_and_simulate_garch(p: &GarchParams, n: usize, seed: u64) -> Result<GarchPath> {
    if n == 0 {
        return contract("GARCH simulation needs n >= 1");
    }
    let amp = p.amplified();
    let s0 = p.unconditional_variance().or(amp.unconditional_variance()).unwrap_or(p.omega);
    let eps = normals(seed, Domain::Dslob, super::tags::GARCH, 0, n);
    let path = simulate_garch(&amp, s0, &eps)?;
    if path.explosive {
        log::warn!("amplified GARCH persistence {:.4} >= 1: variance is explosive", amp.persistence());
    }
    Ok(path)
}

/// Lag-`k` autocorrelation.
pub fn acf(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    if k >= n {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (0..n - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum();
    num / den
}
