//! Built-in parametric order-book seed and the realised-volatility target.
//!
//! Four price levels per side are laid out from the mid price with a
//! volatility-sensitive spread ladder; sizes are log-normal AR(1) processes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::garch::{simulate_garch, GarchParams, GarchPath};
use super::vasicek::VasicekParams;
use crate::error::{contract, Result};
use crate::rng::{normals, Domain};

pub const N_FEATURES: usize = 85;
pub const LEVELS: usize = 4;
pub const MID: usize = 0;
pub const LOG_RETURN: usize = 1;
/// Seconds per GARCH bar.
pub const BAR: usize = 60;
pub const SECONDS_PER_YEAR: f64 = 31_536_000.0;
pub const RV_FLOOR: f64 = 1e-12;

const HALF_SPREAD_BPS: [f64; LEVELS] = [1.0, 2.0, 3.5, 5.0];
const SPREAD_VOL_SENS: f64 = 0.5;
const SIZE_BASE: [f64; LEVELS] = [500.0, 800.0, 1200.0, 1500.0];
const SIZE_PHI: f64 = 0.9;
const SIZE_SD: f64 = 0.3;
/// Reference per-second volatility for spread and depth scaling.
const REF_VOL: f64 = 3e-4;

pub fn channel_names() -> Vec<String> {
    let mut n: Vec<String> = vec!["mid".into(), "log_return".into()];
    fn lv(p: &str) -> Vec<String> {
        (1..=LEVELS).map(|k| format!("{p}_{k}")).collect()
    }
    n.extend(lv("bid_px"));
    n.extend(lv("ask_px"));
    n.extend(lv("bid_sz"));
    n.extend(lv("ask_sz"));
    n.extend(lv("spread"));
    n.extend(lv("imbalance"));
    n.extend(lv("cum_bid_depth"));
    n.extend(lv("cum_ask_depth"));
    n.extend(lv("cum_imbalance"));
    n.push("microprice".into());
    n.push("micro_minus_mid".into());
    n.extend(lv("log_bid_sz"));
    n.extend(lv("log_ask_sz"));
    n.extend(lv("weighted_mid"));
    n.extend((1..LEVELS).map(|k| format!("bid_gap_{k}")));
    n.extend((1..LEVELS).map(|k| format!("ask_gap_{k}")));
    n.extend(lv("d_bid_sz"));
    n.extend(lv("d_ask_sz"));
    for s in [
        "abs_return", "sq_return", "rvol_5", "rvol_20", "rvol_60", "mean_ret_5", "mean_ret_20", "range_20",
        "momentum_10", "total_depth", "total_imbalance", "spread_bps", "vwap_bid", "vwap_ask", "vwap_spread", "ofi",
        "ofi_10", "phase_sin", "phase_cos",
    ] {
        n.push(s.into());
    }
    n
}

fn rolling_std(r: &[f64], t: usize, w: usize) -> f64 {
    let lo = (t + 1).saturating_sub(w);
    let s = &r[lo..=t];
    if s.len() < 2 {
        return 0.0;
    }
    let m = s.iter().sum::<f64>() / s.len() as f64;
    (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
}

fn rolling_mean(r: &[f64], t: usize, w: usize) -> f64 {
    let lo = (t + 1).saturating_sub(w);
    r[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
}

/// `T × 85` feature matrix derived from a mid-price path.
pub fn derive_features(mid: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    let t_len = mid.len();
    if t_len < 2 {
        return contract("feature derivation needs at least two prices");
    }
    if mid.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return contract("mid prices must be finite and positive");
    }
    let mut ret = vec![0.0; t_len];
    for t in 1..t_len {
        ret[t] = (mid[t] / mid[t - 1]).ln();
    }
    // log-size deviations, one AR(1) per side and level
    let mut dev = vec![vec![0.0; t_len]; 2 * LEVELS];
    for (j, d) in dev.iter_mut().enumerate() {
        let z = normals(seed, Domain::Dslob, super::tags::SIZES, j as u64, t_len);
        let innov = SIZE_SD * (1.0 - SIZE_PHI * SIZE_PHI).sqrt();
        d[0] = SIZE_SD * z[0];
        for t in 1..t_len {
            d[t] = SIZE_PHI * d[t - 1] + innov * z[t];
        }
    }

    let names = N_FEATURES;
    let mut f = DMatrix::zeros(t_len, names);
    let mut prev_bs = [0.0; LEVELS];
    let mut prev_as = [0.0; LEVELS];
    let mut ofi = vec![0.0; t_len];
    for t in 0..t_len {
        let p = mid[t];
        let vol = rolling_std(&ret, t, 20);
        let stress = vol / REF_VOL;
        let mut bid = [0.0; LEVELS];
        let mut ask = [0.0; LEVELS];
        let mut bs = [0.0; LEVELS];
        let mut asz = [0.0; LEVELS];
        for k in 0..LEVELS {
            let hs = p * 1e-4 * HALF_SPREAD_BPS[k] * (1.0 + SPREAD_VOL_SENS * stress);
            bid[k] = p - hs;
            ask[k] = p + hs;
            // depth thins out when volatility rises
            let thin = -0.2 * (stress - 1.0).max(0.0);
            bs[k] = SIZE_BASE[k] * (dev[k][t] + thin).exp();
            asz[k] = SIZE_BASE[k] * (dev[LEVELS + k][t] + thin).exp();
        }
        let mut row = Vec::with_capacity(names);
        row.push(p);
        row.push(ret[t]);
        row.extend_from_slice(&bid);
        row.extend_from_slice(&ask);
        row.extend_from_slice(&bs);
        row.extend_from_slice(&asz);
        row.extend((0..LEVELS).map(|k| ask[k] - bid[k]));
        row.extend((0..LEVELS).map(|k| (bs[k] - asz[k]) / (bs[k] + asz[k])));
        let cb: Vec<f64> = bs.iter().scan(0.0, |a, x| { *a += x; Some(*a) }).collect();
        let ca: Vec<f64> = asz.iter().scan(0.0, |a, x| { *a += x; Some(*a) }).collect();
        row.extend_from_slice(&cb);
        row.extend_from_slice(&ca);
        row.extend((0..LEVELS).map(|k| (cb[k] - ca[k]) / (cb[k] + ca[k])));
        let micro = (bid[0] * asz[0] + ask[0] * bs[0]) / (bs[0] + asz[0]);
        row.push(micro);
        row.push(micro - p);
        row.extend(bs.iter().map(|x| x.ln()));
        row.extend(asz.iter().map(|x| x.ln()));
        row.extend((0..LEVELS).map(|k| (bid[k] * asz[k] + ask[k] * bs[k]) / (bs[k] + asz[k])));
        row.extend((1..LEVELS).map(|k| bid[k - 1] - bid[k]));
        row.extend((1..LEVELS).map(|k| ask[k] - ask[k - 1]));
        let dbs: Vec<f64> = (0..LEVELS).map(|k| if t == 0 { 0.0 } else { bs[k] - prev_bs[k] }).collect();
        let das: Vec<f64> = (0..LEVELS).map(|k| if t == 0 { 0.0 } else { asz[k] - prev_as[k] }).collect();
        row.extend_from_slice(&dbs);
        row.extend_from_slice(&das);
        row.push(ret[t].abs());
        row.push(ret[t] * ret[t]);
        row.push(rolling_std(&ret, t, 5));
        row.push(vol);
        row.push(rolling_std(&ret, t, 60));
        row.push(rolling_mean(&ret, t, 5));
        row.push(rolling_mean(&ret, t, 20));
        let lo = (t + 1).saturating_sub(20);
        let (mn, mx) = mid[lo..=t].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        row.push((mx - mn) / p);
        row.push((p / mid[t.saturating_sub(10)]).ln());
        let (tb, ta) = (cb[LEVELS - 1], ca[LEVELS - 1]);
        row.push(tb + ta);
        row.push((tb - ta) / (tb + ta));
        row.push((ask[0] - bid[0]) / p * 1e4);
        let vb = (0..LEVELS).map(|k| bid[k] * bs[k]).sum::<f64>() / tb;
        let va = (0..LEVELS).map(|k| ask[k] * asz[k]).sum::<f64>() / ta;
        row.push(vb);
        row.push(va);
        row.push(va - vb);
        ofi[t] = dbs[0] - das[0];
        row.push(ofi[t]);
        row.push(ofi[(t + 1).saturating_sub(10)..=t].iter().sum());
        let phase = 2.0 * std::f64::consts::PI * t as f64 / 3600.0;
        row.push(phase.sin());
        row.push(phase.cos());
        debug_assert_eq!(row.len(), N_FEATURES);
        f.row_mut(t).copy_from_slice(&row);
        prev_bs = bs;
        prev_as = asz;
    }
    Ok(f)
}

/// Per-second returns whose 60-second sums follow the bar-level GARCH
/// recursion: `r_s = σ_m/√60 · ε_s` with `ε_m = Σ ε_s/√60` driving `σ_m`.
pub fn second_returns(p: &GarchParams, sigma0_sq: f64, n: usize, seed: u64, stream: u64) -> Result<(Vec<f64>, GarchPath)> {
    let eps = normals(seed, Domain::Dslob, super::tags::GARCH, stream, n);
    let bars = n.div_ceil(BAR);
    let scale = (BAR as f64).sqrt();
    let eps_m: Vec<f64> = (0..bars).map(|m| eps[m * BAR..((m + 1) * BAR).min(n)].iter().sum::<f64>() / scale).collect();
    let path = simulate_garch(p, sigma0_sq, &eps_m)?;
    let r = (0..n).map(|s| path.sigma[s / BAR] / scale * eps[s]).collect();
    Ok((r, path))
}

/// Mean-reverting price `P_{t+1} = P_t + θ(P_0 + μ − P_t) + P_t r_t`, where
/// `μ` is the level relative to the start.
pub fn simulate_mid(p0: f64, deviation: &VasicekParams, returns: &[f64]) -> Result<Vec<f64>> {
    if !(p0 > 0.0) {
        return contract("initial price must be positive");
    }
    let mut mid = Vec::with_capacity(returns.len() + 1);
    mid.push(p0);
    let mut p = p0;
    for r in returns {
        p += deviation.theta * (p0 + deviation.mu - p) + p * r;
        if !(p > 0.0) {
            return contract("simulated mid price left the positive half line");
        }
        mid.push(p);
    }
    Ok(mid)
}

/// Generating parameters of the built-in seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedModel {
    pub p0: f64,
    /// Deviation from `p0`, per second.
    pub vasicek: VasicekParams,
    /// Bar-level variance recursion.
    pub garch: GarchParams,
}

impl Default for SeedModel {
    fn default() -> Self {
        Self {
            p0: 100.0,
            vasicek: VasicekParams { theta: 1.0 / 600.0, mu: -4.0, sigma: 0.0 },
            garch: GarchParams { omega: 3e-7, alpha: 0.035, beta: 0.9 },
        }
    }
}

/// `n_steps × 85` seed features.
pub fn builtin_seed(model: &SeedModel, n_steps: usize, seed: u64) -> Result<DMatrix<f64>> {
    let s0 = model.garch.unconditional_variance().unwrap_or(model.garch.omega);
    let (r, _) = second_returns(&model.garch, s0, n_steps - 1, seed, 1)?;
    let mid = simulate_mid(model.p0, &model.vasicek, &r)?;
    derive_features(&mid, seed ^ 0x5eed)
}

/// Log-returns of consecutive `BAR`-second closes.
pub fn bar_returns(mid: &[f64]) -> Vec<f64> {
    mid.iter().step_by(BAR).collect::<Vec<_>>().windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

/// `log(√(Σ r²)·√(31 536 000/h) + 1e-12)` over the `h` log-returns of `prices`.
pub fn realized_vol_target(prices: &[f64]) -> Result<f64> {
    if prices.len() < 2 {
        return contract("realised volatility needs at least two prices");
    }
    let h = (prices.len() - 1) as f64;
    let rv = prices.windows(2).map(|w| (w[1] / w[0]).ln().powi(2)).sum::<f64>().sqrt();
    Ok((rv * (SECONDS_PER_YEAR / h).sqrt() + RV_FLOOR).ln())
}

/// Targets for every window start `s` whose end `s + L − 1` has `horizon`
/// prices after it; later windows are dropped.
pub fn window_targets(mid: &[f64], window_len: usize, horizon: usize) -> Result<Vec<f64>> {
    let n = windows_in(mid.len(), window_len, horizon);
    (0..n).map(|s| {
        let e = s + window_len - 1;
        realized_vol_target(&mid[e..=e + horizon])
    })
    .collect()
}

/// Windows of length `l` with a `h`-step target inside `len` steps.
pub fn windows_in(len: usize, l: usize, h: usize) -> usize {
    (len + 1).saturating_sub(l + h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_85_named_channels() {
        let names = channel_names();
        assert_eq!(names.len(), N_FEATURES);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), N_FEATURES);
        let mid: Vec<f64> = (0..200).map(|t| 100.0 + (t as f64 * 0.05).sin()).collect();
        let f = derive_features(&mid, 1).unwrap();
        assert_eq!(f.shape(), (200, N_FEATURES));
        assert!(f.iter().all(|x| x.is_finite()));
        assert_eq!(f[(10, MID)], mid[10]);
        assert!((f[(10, LOG_RETURN)] - (mid[10] / mid[9]).ln()).abs() < 1e-15);
        // ladder ordering
        let col = |name: &str| names.iter().position(|n| n == name).unwrap();
        for t in [0, 50, 199] {
            assert!(f[(t, col("bid_px_1"))] > f[(t, col("bid_px_4"))]);
            assert!(f[(t, col("ask_px_4"))] > f[(t, col("ask_px_1"))]);
            assert!(f[(t, col("ask_px_1"))] > f[(t, col("bid_px_1"))]);
        }
    }

    #[test]
    fn target_fixtures() {
        let flat = [50.0; 21];
        let t = realized_vol_target(&flat).unwrap();
        assert!((t - RV_FLOOR.ln()).abs() < 1e-12);
        assert!((t + 27.631).abs() < 1e-3);

        let r: f64 = 0.001;
        let mut p = vec![10.0];
        for i in 0..20 {
            let s = if i % 2 == 0 { r } else { -r };
            p.push(p[i] * s.exp());
        }
        let want = (r * 20f64.sqrt() * (SECONDS_PER_YEAR / 20.0).sqrt() + RV_FLOOR).ln();
        assert!((realized_vol_target(&p).unwrap() - want).abs() < 1e-9);

        // doubling log-returns doubles RV before the log
        let q: Vec<f64> = p.iter().map(|x| x * x / 10.0).collect();
        let rv = |v: f64| v.exp() - RV_FLOOR;
        let ratio = rv(realized_vol_target(&q).unwrap()) / rv(realized_vol_target(&p).unwrap());
        assert!((ratio - 2.0).abs() < 1e-9);
    }

    #[test]
    fn window_targets_drop_the_tail() {
        let mid: Vec<f64> = (0..100).map(|t| 100.0 + t as f64 * 0.01).collect();
        let t = window_targets(&mid, 20, 20).unwrap();
        assert_eq!(t.len(), 100 - 39);
        assert_eq!(windows_in(39, 20, 20), 0);
        assert_eq!(windows_in(40, 20, 20), 1);
    }

    #[test]
    fn bar_returns_follow_the_recursion() {
        let p = GarchParams { omega: 1e-7, alpha: 0.1, beta: 0.85 };
        let (r, path) = second_returns(&p, 2e-6, 600, 3, 0).unwrap();
        for m in 0..10 {
            let bar: f64 = r[m * BAR..(m + 1) * BAR].iter().sum();
            let eps_m = bar / path.sigma[m];
            assert!((path.returns[m] - path.sigma[m] * eps_m).abs() < 1e-15);
        }
    }

    #[test]
    fn seed_is_deterministic_and_crashes() {
        let m = SeedModel::default();
        let a = builtin_seed(&m, 3000, 7).unwrap();
        let b = builtin_seed(&m, 3000, 7).unwrap();
        assert_eq!(a, b);
        let end = a[(2999, MID)];
        assert!(end < m.p0 - 2.0, "{end}");
    }
}
