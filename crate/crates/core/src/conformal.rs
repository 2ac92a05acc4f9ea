//! Split and rolling conformal intervals, and the simplex Kelly allocator.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{contract, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 250;
pub const DEFAULT_GAMMA: f64 = 5.0;

/// Absolute calibration residuals `|y − ŷ|`, kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    residuals: Vec<f64>,
}

impl CalibrationSet {
    pub fn new(mut residuals: Vec<f64>) -> Result<Self> {
        if residuals.is_empty() {
            return contract("calibration set is empty");
        }
        if residuals.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return contract("calibration residuals must be finite and nonnegative");
        }
        residuals.sort_by(f64::total_cmp);
        Ok(Self { residuals })
    }

    pub fn from_predictions(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        if y.len() != y_hat.len() {
            return contract("targets and predictions differ in length");
        }
        Self::new(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).collect())
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub center: f64,
    pub half_width: f64,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn lo(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.center + self.half_width
    }

    /// Closed-interval membership; an infinite half width covers everything.
    pub fn contains(&self, y: f64) -> bool {
        self.half_width == f64::INFINITY || (y - self.center).abs() <= self.half_width
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return contract(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(())
}

/// Rank `⌈(1−α)(n+1)⌉` (1-based).
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let k = ((1.0 - alpha) * (n as f64 + 1.0)).ceil();
    // guard against (1−α)(n+1) landing a hair above an integer
    let k_round = k - 1.0;
    let exact = (1.0 - alpha) * (n as f64 + 1.0);
    if (exact - k_round).abs() < 1e-9 {
        k_round as usize
    } else {
        k as usize
    }
}

fn order_stat(sorted: &[f64], alpha: f64) -> f64 {
    let k = conformal_rank(sorted.len(), alpha);
    if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k.max(1) - 1]
    }
}

/// `r_(k)` with `k = ⌈(1−α)(n+1)⌉`; `+∞` when `k > n`.
pub fn split_quantile(cal: &CalibrationSet, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(order_stat(&cal.residuals, alpha))
}

/// Rolling quantile over the most recent `window` residuals; entry `t` is the
/// quantile after residual `t` has arrived.
pub fn adaptive_quantile(residuals: &[f64], window: usize, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut q = RollingQuantile::new(window, alpha)?;
    residuals.iter().map(|&r| q.push(r).map(|_| q.quantile())).collect()
}

/// Incrementally maintained window for [`adaptive_quantile`].
#[derive(Debug, Clone)]
pub struct RollingQuantile {
    window: usize,
    alpha: f64,
    arrivals: std::collections::VecDeque<f64>,
    sorted: Vec<f64>,
}

impl RollingQuantile {
    pub fn new(window: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if window == 0 {
            return contract("rolling window must be at least 1");
        }
        Ok(Self { window, alpha, arrivals: Default::default(), sorted: Vec::with_capacity(window) })
    }

    pub fn push(&mut self, r: f64) -> Result<()> {
        if !(r.is_finite() && r >= 0.0) {
            return contract("residuals must be finite and nonnegative");
        }
        if self.arrivals.len() == self.window {
            let old = self.arrivals.pop_front().expect("nonempty window");
            let pos = self.sorted.partition_point(|x| x.total_cmp(&old).is_lt());
            self.sorted.remove(pos);
        }
        self.arrivals.push_back(r);
        let pos = self.sorted.partition_point(|x| x.total_cmp(&r).is_lt());
        self.sorted.insert(pos, r);
        Ok(())
    }

    /// `+∞` until the window holds enough residuals for the rank.
    pub fn quantile(&self) -> f64 {
        if self.sorted.is_empty() {
            f64::INFINITY
        } else {
            order_stat(&self.sorted, self.alpha)
        }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
}

pub fn coverage_check(intervals: &[PredictionInterval], y: &[f64]) -> Result<f64> {
    if intervals.len() != y.len() {
        return contract("intervals and targets differ in length");
    }
    if y.is_empty() {
        return contract("coverage of an empty set");
    }
    let hit = intervals.iter().zip(y).filter(|(iv, y)| iv.contains(**y)).count();
    Ok(hit as f64 / y.len() as f64)
}

/// Central `level` band of `Binomial(n, p)/n`.
pub fn binomial_band(n: u64, p: f64, level: f64) -> Result<(f64, f64)> {
    let b = Binomial::new(p, n).map_err(|e| Error::Contract(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    let lo = b.inverse_cdf(tail);
    let hi = b.inverse_cdf(1.0 - tail);
    Ok((lo as f64 / n as f64, hi as f64 / n as f64))
}

/// Maximise `wᵀŷ − (γ/2) wᵀ diag(σ) w` over the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub mu_hat: Vec<f64>,
    /// Diagonal of `Σ̂`.
    pub sigma_diag: Vec<f64>,
    pub gamma: f64,
}

impl AllocationProblem {
    /// `Σ̂ = diag(q_p²)` from interval half widths.
    pub fn from_intervals(mu_hat: Vec<f64>, half_widths: &[f64], gamma: f64) -> Result<Self> {
        let p = Self { sigma_diag: half_widths.iter().map(|q| q * q).collect(), mu_hat, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_hat.is_empty() || self.mu_hat.len() != self.sigma_diag.len() {
            return contract("allocation needs matching nonempty ŷ and Σ̂");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return contract("risk aversion must be positive");
        }
        if self.mu_hat.iter().any(|m| !m.is_finite()) {
            return contract("non-finite point prediction");
        }
        if self.sigma_diag.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return contract("Σ̂ entries must be finite and nonnegative (infinite interval width?)");
        }
        Ok(())
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let ret: f64 = w.iter().zip(&self.mu_hat).map(|(w, m)| w * m).sum();
        let risk: f64 = w.iter().zip(&self.sigma_diag).map(|(w, s)| w * w * s).sum();
        ret - 0.5 * self.gamma * risk
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.mu_hat).zip(&self.sigma_diag).map(|((w, m), s)| m - self.gamma * s * w).collect()
    }
}

/// Euclidean projection onto `{w ≥ 0, Σw = 1}` by sort and threshold.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

pub const KELLY_TOL: f64 = 1e-8;
pub const KELLY_MAX_ITER: usize = 10_000;

/// Projected gradient ascent with step `1/(γ max σ)`.
pub fn kelly_allocate(p: &AllocationProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let n = p.mu_hat.len();
    let smax = p.sigma_diag.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        // linear objective: all weight on the best assets, ties split
        let best = p.mu_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<bool> = p.mu_hat.iter().map(|m| *m == best).collect();
        let k = winners.iter().filter(|b| **b).count() as f64;
        return Ok(winners.into_iter().map(|b| if b { 1.0 / k } else { 0.0 }).collect());
    }
    let step = 1.0 / (p.gamma * smax);
    let mut w = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..KELLY_MAX_ITER {
        let g = p.gradient(&w);
        let trial: Vec<f64> = w.iter().zip(&g).map(|(w, g)| w + step * g).collect();
        let next = project_simplex(&trial);
        residual = next.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / step;
        w = next;
        if residual <= KELLY_TOL {
            return Ok(w);
        }
    }
    Err(Error::NoConvergence { what: "kelly allocation", iterations: KELLY_MAX_ITER, residual, last: w })
}
