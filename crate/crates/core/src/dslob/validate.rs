use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::garch::acf;
use crate::error::{contract, Result};

pub const KS_MIN_P: f64 = 0.05;
pub const ACF_LAGS: usize = 50;
pub const CORR_MAX_DIFF: f64 = 0.03;
pub const TAIL_QUANTILE: f64 = 0.995;
pub const TAIL_MAX_REL: f64 = 0.05;

/// Kolmogorov survival function `Q(λ) = 2Σ(−1)^{j−1} e^{−2j²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small λ
        let c = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let s: f64 = (1..=20)
            .map(|j| (-((2 * j - 1) as f64).powi(2) * std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp())
            .sum();
        return (1.0 - c * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|j| {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample statistic `D` and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return contract("KS test on an empty sample");
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Linear-interpolation sample quantile.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn correlation(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.tr_mul(&c) / n;
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    let live: Vec<bool> = sd.iter().enumerate().map(|(i, s)| *s > 1e-12 * mean[i].abs().max(1.0)).collect();
    let d = cov.nrows();
    let corr = DMatrix::from_fn(d, d, |i, j| if live[i] && live[j] { cov[(i, j)] / (sd[i] * sd[j]) } else { 0.0 });
    (corr, live)
}

/// Mean `|ρ_ij^synth − ρ_ij^seed|` over off-diagonal pairs of live channels.
pub fn corr_mean_absdiff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return contract("correlation comparison needs equal channel counts");
    }
    let (ca, la) = correlation(a);
    let (cb, lb) = correlation(b);
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..a.ncols() {
        for j in i + 1..a.ncols() {
            if la[i] && la[j] && lb[i] && lb[j] {
                acc += (ca[(i, j)] - cb[(i, j)]).abs();
                k += 1;
            }
        }
    }
    Ok(if k == 0 { 0.0 } else { acc / k as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ks_stat: f64,
    pub ks_p: f64,
    /// `max_{1≤k≤50} |ACF_synth(k) − ACF_seed(k)|` of squared returns.
    pub acf_max_dev: f64,
    /// `2/√T` of the synthetic series.
    pub acf_band: f64,
    pub corr_mean_absdiff: f64,
    pub tail_rel_err: f64,
    pub ks_pass: bool,
    pub acf_pass: bool,
    pub corr_pass: bool,
    pub tail_pass: bool,
    pub pass: bool,
}

/// Four-gate comparison of returns (column `ret_col`) and feature correlations.
pub fn validate_synthetic(synth: &DMatrix<f64>, seed: &DMatrix<f64>, ret_col: usize) -> Result<ValidationReport> {
    if synth.nrows() < 2 || seed.nrows() < 2 || ret_col >= synth.ncols() || ret_col >= seed.ncols() {
        return contract("validation needs nonempty series with a return column");
    }
    // the first return of a path is a placeholder zero
    let rs: Vec<f64> = synth.column(ret_col).iter().skip(1).copied().collect();
    let rd: Vec<f64> = seed.column(ret_col).iter().skip(1).copied().collect();
    let (ks_stat, ks_p) = ks_two_sample(&rs, &rd)?;
    let sq = |r: &[f64]| r.iter().map(|x| x * x).collect::<Vec<f64>>();
    let (ss, sd) = (sq(&rs), sq(&rd));
    let acf_max_dev = (1..=ACF_LAGS).map(|k| (acf(&ss, k) - acf(&sd, k)).abs()).fold(0.0, f64::max);
    let acf_band = 2.0 / (rs.len() as f64).sqrt();
    let corr = corr_mean_absdiff(synth, seed)?;
    let loss = |r: &[f64]| quantile(&r.iter().map(|x| -x).collect::<Vec<f64>>(), TAIL_QUANTILE);
    let (qs, qd) = (loss(&rs), loss(&rd));
    let tail_rel_err = if qd == 0.0 { if qs == 0.0 { 0.0 } else { f64::INFINITY } } else { ((qs - qd) / qd).abs() };
    let ks_pass = ks_p > KS_MIN_P;
    let acf_pass = acf_max_dev < acf_band;
    let corr_pass = corr < CORR_MAX_DIFF;
    let tail_pass = tail_rel_err <= TAIL_MAX_REL;
    Ok(ValidationReport {
        ks_stat,
        ks_p,
        acf_max_dev,
        acf_band,
        corr_mean_absdiff: corr,
        tail_rel_err,
        ks_pass,
        acf_pass,
        corr_pass,
        tail_pass,
        pass: ks_pass && acf_pass && corr_pass && tail_pass,
    })
}

/// Index maximising `|Σ_{i≤k}(x_i − x̄)|`: the most likely level shift.
pub fn cusum_change_point(x: &[f64]) -> Option<usize> {
    if x.len() < 2 {
        return None;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let mut s = 0.0;
    let mut best = (0, 0.0f64);
    for (i, v) in x.iter().enumerate() {
        s += v - m;
        if s.abs() > best.1 {
            best = (i, s.abs());
        }
    }
    (best.1 > 0.0).then_some(best.0)
}
