use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rank_ic: f64,
    pub dir_acc: f64,
    pub weighted_r2: f64,
    pub n_test: usize,
    /// Predictions or targets were constant; `rank_ic` was set to 0.
    pub rank_ic_undefined: bool,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation as the Pearson correlation of average ranks;
/// `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// RMSE, rank IC, directional accuracy around `center` and
/// `1 − Σw(y−ŷ)²/Σw·y²`.
pub fn evaluate(pred: &[f64], target: &[f64], weights: Option<&[f64]>, center: f64) -> Result<MetricsReport> {
    let n = pred.len();
    if n < 2 || target.len() != n {
        return contract(format!("evaluate needs equal lengths >= 2 ({n} predictions, {} targets)", target.len()));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|v| !(*v >= 0.0)) {
            return contract("weights must match the targets and be >= 0");
        }
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) || !center.is_finite() {
        return Err(Error::NonFinite("evaluation inputs".into()));
    }
    let rmse = (pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / n as f64).sqrt();
    let (rank_ic, undefined) = match spearman(pred, target) {
        Some(r) => (r, false),
        None => {
            log::warn!("rank IC undefined for constant predictions or targets; reporting 0");
            (0.0, true)
        }
    };
    let hits = pred.iter().zip(target).filter(|(p, y)| sign(**p - center) == sign(**y - center)).count();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let num: f64 = (0..n).map(|i| w(i) * (target[i] - pred[i]).powi(2)).sum();
    let den: f64 = (0..n).map(|i| w(i) * target[i].powi(2)).sum();
    let weighted_r2 = if den > 0.0 { 1.0 - num / den } else { f64::NAN };
    Ok(MetricsReport {
        rmse,
        rank_ic,
        dir_acc: hits as f64 / n as f64,
        weighted_r2,
        n_test: n,
        rank_ic_undefined: undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0.3, -1.0, 2.0, 0.5];
        let m = evaluate(&y, &y, None, 0.0).unwrap();
        assert_eq!((m.rmse, m.rank_ic, m.dir_acc, m.weighted_r2), (0.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn negated_centered_predictions() {
        let y = [-2.0, -1.0, 1.0, 2.0, 0.5, -0.5];
        let p: Vec<f64> = y.iter().map(|v| -v).collect();
        let m = evaluate(&p, &y, None, 0.0).unwrap();
        assert!((m.rank_ic + 1.0).abs() < 1e-15);
        assert_eq!(m.dir_acc, 0.0);
    }

    #[test]
    fn hand_spearman() {
        // Σd² = 2, ρ = 1 − 6·2/(5·24)
        let r = spearman(&[1.0, 3.0, 2.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
        // Pearson on (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_input_flags_rank_ic() {
        let m = evaluate(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], None, 0.0).unwrap();
        assert_eq!(m.rank_ic, 0.0);
        assert!(m.rank_ic_undefined);
    }

    #[test]
    fn direction_zeros_and_weights() {
        let m = evaluate(&[1.0, 0.0, 0.0, -1.0], &[0.0, 0.0, 2.0, -3.0], None, 0.0).unwrap();
        assert_eq!(m.dir_acc, 0.5);
        let w = [1.0, 0.0, 2.0, 1.0];
        let m = evaluate(&[1.0, 0.0, 0.0, -1.0], &[0.0, 5.0, 2.0, -3.0], Some(&w), 0.0).unwrap();
        let want = 1.0 - (1.0 + 2.0 * 4.0 + 4.0) / (2.0 * 4.0 + 9.0);
        assert!((m.weighted_r2 - want).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(evaluate(&[1.0], &[1.0], None, 0.0).is_err());
        assert!(evaluate(&[1.0, 2.0], &[1.0], None, 0.0).is_err());
        assert!(evaluate(&[1.0, f64::NAN], &[1.0, 2.0], None, 0.0).is_err());
    }
}
