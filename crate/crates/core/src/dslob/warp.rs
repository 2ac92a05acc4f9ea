use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::noise::psd_factor;
use crate::error::{contract, Result};
use crate::rng::{normals, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub gp_mean: f64,
    pub gp_var: f64,
    /// Squared-exponential length scale in steps.
    pub length_scale: f64,
}

impl Default for WarpSpec {
    fn default() -> Self {
        Self { gp_mean: 1.0, gp_var: 0.1, length_scale: 100.0 }
    }
}

pub const MIN_RATE: f64 = 0.1;

/// Per-step rate `τ_i ≥ 0.1`: a GP draw on knots spaced `ℓ/4` apart,
/// linearly interpolated.
pub fn warp_rate(n: usize, spec: &WarpSpec, seed: u64) -> Result<Vec<f64>> {
    if !(spec.gp_var >= 0.0) || !(spec.length_scale > 0.0) {
        return contract("warp needs gp_var >= 0 and a positive length scale");
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if spec.gp_var == 0.0 {
        return Ok(vec![spec.gp_mean.max(MIN_RATE); n]);
    }
    let h = (spec.length_scale / 4.0).max(1.0);
    let m = ((n - 1) as f64 / h).ceil() as usize + 1;
    let knots: Vec<f64> = (0..m).map(|k| k as f64 * h).collect();
    let ell2 = spec.length_scale * spec.length_scale;
    let mut k = DMatrix::from_fn(m, m, |i, j| spec.gp_var * (-(knots[i] - knots[j]).powi(2) / (2.0 * ell2)).exp());
    for i in 0..m {
        k[(i, i)] += 1e-10 * spec.gp_var;
    }
    let z = nalgebra::DVector::from_vec(normals(seed, Domain::Dslob, super::tags::WARP, 0, m));
    let g = psd_factor(&k) * z;
    Ok((0..n)
        .map(|i| {
            let s = i as f64 / h;
            let lo = (s.floor() as usize).min(m - 1);
            let hi = (lo + 1).min(m - 1);
            let w = s - lo as f64;
            (spec.gp_mean + (1.0 - w) * g[lo] + w * g[hi]).max(MIN_RATE)
        })
        .collect())
}

/// Warped clock `u_0 = 0, u_i = u_{i−1} + τ_i`.
pub fn warped_clock(rate: &[f64]) -> Vec<f64> {
    let mut u = Vec::with_capacity(rate.len());
    let mut acc = 0.0;
    for (i, r) in rate.iter().enumerate() {
        if i > 0 {
            acc += r;
        }
        u.push(acc);
    }
    u
}

/// Resamples every column at uniform points of the warped clock.
pub fn apply_warp(x: &DMatrix<f64>, rate: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if rate.len() != n {
        return contract("warp rate length differs from the series length");
    }
    if n < 2 || rate.iter().all(|r| *r == 1.0) {
        return Ok(x.clone());
    }
    let u = warped_clock(rate);
    let end = u[n - 1];
    let mut out = DMatrix::zeros(n, x.ncols());
    let mut seg = 0;
    for j in 0..n {
        let v = if j == n - 1 { end } else { j as f64 * end / (n - 1) as f64 };
        while seg + 2 < n && u[seg + 1] <= v {
            seg += 1;
        }
        let w = ((v - u[seg]) / (u[seg + 1] - u[seg])).clamp(0.0, 1.0);
        for c in 0..x.ncols() {
            out[(j, c)] = if w == 0.0 { x[(seg, c)] } else if w == 1.0 { x[(seg + 1, c)] } else { (1.0 - w) * x[(seg, c)] + w * x[(seg + 1, c)] };
        }
    }
    Ok(out)
}

/// Single-series convenience wrapper.
pub fn time_warp(series: &[f64], spec: &WarpSpec, seed: u64) -> Result<Vec<f64>> {
    let rate = warp_rate(series.len(), spec, seed)?;
    let m = DMatrix::from_column_slice(series.len(), 1, series);
    Ok(apply_warp(&m, &rate)?.as_slice().to_vec())
}
