use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{normals, Domain};

/// `dP = θ(μ − P)dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VasicekParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
}

pub const THETA_AMPLIFY: f64 = 1.5;
pub const MU_AMPLIFY: f64 = 1.2;

impl VasicekParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.sigma >= 0.0 && self.mu.is_finite() && self.sigma.is_finite()) {
            return contract(format!("invalid Vasicek parameters {self:?}"));
        }
        Ok(())
    }

    /// `(1.5θ, 1.2μ, σ)`.
    pub fn amplified(&self) -> Self {
        Self { theta: THETA_AMPLIFY * self.theta, mu: MU_AMPLIFY * self.mu, sigma: self.sigma }
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VasicekFit {
    pub params: VasicekParams,
    /// Residuals vanish to rounding: `σ` was set to zero.
    pub degenerate: bool,
}

/// Exact discrete-time MLE through the AR(1) map `P_{t+1} = aP_t + b + ε`.
pub fn fit_vasicek_mle(series: &[f64], dt: f64) -> Result<VasicekFit> {
    if series.len() < 3 {
        return contract("Vasicek fit needs at least 3 points");
    }
    if !(dt > 0.0) {
        return contract("Vasicek fit needs dt > 0");
    }
    let x = &series[..series.len() - 1];
    let y = &series[1..];
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let scale = mx.abs().max(my.abs()).max(1.0);
    if sxx <= (1e-14 * scale).powi(2) * n {
        return Err(Error::Degenerate("constant series has no Vasicek fit".into()));
    }
    let a = sxy / sxx;
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::NotMeanReverting(a));
    }
    let b = my - a * mx;
    let v: f64 = x.iter().zip(y).map(|(p, q)| (q - a * p - b).powi(2)).sum::<f64>() / n;
    let theta = -a.ln() / dt;
    let mu = b / (1.0 - a);
    let degenerate = v.sqrt() <= 1e-10 * (sxx / n).sqrt();
    let sigma = if degenerate { 0.0 } else { (2.0 * theta * v / (1.0 - a * a)).sqrt() };
    Ok(VasicekFit { params: VasicekParams { theta, mu, sigma }, degenerate })
}

/// Euler path of `n` points starting at `p0`, shocks from `normals(seed, Dslob, stream_tag)`.
pub fn simulate_vasicek(p: &VasicekParams, amplify: bool, p0: f64, n: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    p.validate()?;
    if n == 0 || !(dt > 0.0) {
        return contract("Vasicek simulation needs n >= 1 and dt > 0");
    }
    let q = if amplify { p.amplified() } else { *p };
    let z = normals(seed, Domain::Dslob, super::tags::VASICEK, 0, n - 1);
    let sq = dt.sqrt();
    let mut out = Vec::with_capacity(n);
    out.push(p0);
    let mut x = p0;
    for e in z {
        x += q.theta * (q.mu - x) * dt + q.sigma * sq * e;
        out.push(x);
    }
    Ok(out)
}
