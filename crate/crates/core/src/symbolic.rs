//! Symbolic bottleneck: a library of interpretable window statistics, a
//! sparse linear head over it, and teacher–student distillation.
//!
//! Optionally the moving averages of one channel form a selection slot: the
//! slot carries a single weight and a Gumbel-Softmax over its lag variants.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gumbel};

use crate::error::{contract, Error, Result};
use crate::numcore::{AdamState, ParamSet};
use crate::rng::{stream, Domain};

/// Denominator guard of the ratio basis.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    /// Most recent value.
    Last,
    /// Mean of the most recent `w` values.
    Ma(usize),
    /// `x_L − x_{L−1}`.
    Diff,
    /// `x_L / x_1`, or 1 when `|x_1| ≤ 1e-8`.
    Ratio,
    /// Sample variance over the window (denominator `L − 1`).
    Var,
}

/// One library entry: a statistic of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Basis {
    pub kind: BasisKind,
    pub channel: usize,
}

impl Basis {
    pub fn eval(&self, window: &DMatrix<f64>) -> f64 {
        let col = window.column(self.channel);
        let l = col.len();
        match self.kind {
            BasisKind::Last => col[l - 1],
            BasisKind::Ma(w) => col.rows(l - w, w).sum() / w as f64,
            BasisKind::Diff => col[l - 1] - col[l - 2],
            BasisKind::Ratio => {
                if col[0].abs() > RATIO_EPS {
                    col[l - 1] / col[0]
                } else {
                    1.0
                }
            }
            BasisKind::Var => {
                let mean = col.mean();
                col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (l - 1) as f64
            }
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ch = self.channel;
        match self.kind {
            BasisKind::Last => write!(f, "last(ch={ch})"),
            BasisKind::Ma(w) => write!(f, "ma(ch={ch},w={w})"),
            BasisKind::Diff => write!(f, "diff(ch={ch})"),
            BasisKind::Ratio => write!(f, "ratio(ch={ch})"),
            BasisKind::Var => write!(f, "var(ch={ch})"),
        }
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad basis descriptor `{s}`"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let name = &s[..open];
        let mut ch = None;
        let mut w = None;
        for pair in inner.split(',') {
            let (k, v) = pair.split_once('=').ok_or_else(bad)?;
            let v: usize = v.trim().parse().map_err(|_| bad())?;
            match k.trim() {
                "ch" if ch.is_none() => ch = Some(v),
                "w" if w.is_none() => w = Some(v),
                _ => return Err(bad()),
            }
        }
        let channel = ch.ok_or_else(bad)?;
        let kind = match (name, w) {
            ("last", None) => BasisKind::Last,
            ("ma", Some(w)) if w >= 1 => BasisKind::Ma(w),
            ("diff", None) => BasisKind::Diff,
            ("ratio", None) => BasisKind::Ratio,
            ("var", None) => BasisKind::Var,
            _ => return Err(bad()),
        };
        Ok(Basis { kind, channel })
    }
}

/// Which statistics to build.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LibrarySpec {
    /// Moving-average windows in addition to the full window.
    pub ma_windows: Vec<usize>,
    /// Restrict to these channels (all when `None`).
    pub channels: Option<Vec<usize>>,
    /// Group each channel's moving averages into one Gumbel selection slot.
    pub selection: bool,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        Self { ma_windows: vec![5, 10], channels: None, selection: false }
    }
}

/// Basis functions and the slots that share a weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisLibrary {
    pub entries: Vec<Basis>,
    /// Partition of entry indices; singleton slots are plain weights.
    pub slots: Vec<Vec<usize>>,
    pub window_len: usize,
    pub dx: usize,
}

/// Per channel: last, moving averages over `spec.ma_windows ∪ {L}` (clipped
/// to `L`, duplicates dropped), diff, ratio, var.
pub fn build_library(dx: usize, window_len: usize, spec: &LibrarySpec) -> Result<BasisLibrary> {
    if window_len < 2 {
        return contract("basis library needs windows of length >= 2");
    }
    if dx == 0 {
        return contract("basis library needs at least one channel");
    }
    let channels: Vec<usize> = match &spec.channels {
        Some(c) => {
            if c.iter().any(|&ch| ch >= dx) {
                return contract("library channel index out of range");
            }
            c.clone()
        }
        None => (0..dx).collect(),
    };
    let mut windows: Vec<usize> = spec.ma_windows.iter().map(|w| (*w).clamp(1, window_len)).collect();
    windows.push(window_len);
    let mut seen = Vec::new();
    windows.retain(|w| {
        let fresh = !seen.contains(w);
        seen.push(*w);
        fresh
    });
    let mut entries = Vec::new();
    let mut slots = Vec::new();
    for &ch in &channels {
        let b = |kind| Basis { kind, channel: ch };
        slots.push(vec![entries.len()]);
        entries.push(b(BasisKind::Last));
        let ma_start = entries.len();
        for &w in &windows {
            entries.push(b(BasisKind::Ma(w)));
        }
        if spec.selection {
            slots.push((ma_start..entries.len()).collect());
        } else {
            slots.extend((ma_start..entries.len()).map(|i| vec![i]));
        }
        for kind in [BasisKind::Diff, BasisKind::Ratio, BasisKind::Var] {
            slots.push(vec![entries.len()]);
            entries.push(b(kind));
        }
    }
    Ok(BasisLibrary { entries, slots, window_len, dx })
}

impl BasisLibrary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_window(&self, window: &DMatrix<f64>) -> Result<()> {
        if window.shape() != (self.window_len, self.dx) {
            return contract(format!(
                "window shape {:?}, library expects ({}, {})",
                window.shape(),
                self.window_len,
                self.dx
            ));
        }
        Ok(())
    }

    /// All basis values for one window.
    pub fn features(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_window(window)?;
        Ok(DVector::from_iterator(self.len(), self.entries.iter().map(|b| b.eval(window))))
    }

    /// `n × K` basis values for a batch.
    pub fn feature_matrix(&self, windows: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(windows.len(), self.len());
        for (i, w) in windows.iter().enumerate() {
            let f = self.features(w)?;
            out.row_mut(i).copy_from(&f.transpose());
        }
        Ok(out)
    }
}

/// Sparse head: one weight per slot, selection logits per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicHead {
    /// `S × 1`.
    pub weights: DMatrix<f64>,
    /// `K × 1`; only read for entries in multi-member slots.
    pub logits: DMatrix<f64>,
    pub l1: f64,
    pub tau: f64,
}

impl SymbolicHead {
    pub fn new(lib: &BasisLibrary, l1: f64) -> Self {
        Self { weights: DMatrix::zeros(lib.slots.len(), 1), logits: DMatrix::zeros(lib.len(), 1), l1, tau: 1.0 }
    }

    fn check(&self, lib: &BasisLibrary) -> Result<()> {
        if self.weights.nrows() != lib.slots.len() || self.logits.nrows() != lib.len() {
            return contract("symbolic head does not match the library");
        }
        if lib.slots.iter().any(|s| s.len() > 1) && !(self.tau > 0.0) {
            return contract("selection temperature must be positive");
        }
        Ok(())
    }

    /// Effective per-entry coefficients `c_k = w_s · p_{s,k}` using the
    /// noise-free softmax at the current temperature.
    pub fn coefficients(&self, lib: &BasisLibrary) -> Result<DVector<f64>> {
        self.check(lib)?;
        let mut c = DVector::zeros(lib.len());
        for (s, slot) in lib.slots.iter().enumerate() {
            if slot.len() == 1 {
                c[slot[0]] = self.weights[s];
            } else {
                let lg: Vec<f64> = slot.iter().map(|&k| self.logits[k]).collect();
                let p = gumbel_softmax(&lg, &vec![0.0; slot.len()], self.tau)?;
                for (j, &k) in slot.iter().enumerate() {
                    c[k] = self.weights[s] * p[j];
                }
            }
        }
        Ok(c)
    }

    /// Coefficients with each selection slot collapsed onto its argmax entry.
    pub fn hard_coefficients(&self, lib: &BasisLibrary) -> Result<DVector<f64>> {
        self.check(lib)?;
        let mut c = DVector::zeros(lib.len());
        for (s, slot) in lib.slots.iter().enumerate() {
            let best = slot
                .iter()
                .copied()
                .fold(slot[0], |b, k| if self.logits[k] > self.logits[b] { k } else { b });
            c[best] = self.weights[s];
        }
        Ok(c)
    }
}

impl ParamSet for SymbolicHead {
    fn block_names(&self) -> Vec<String> {
        vec!["symbolic.weights".into(), "symbolic.logits".into()]
    }

    fn blocks(&self) -> Vec<&DMatrix<f64>> {
        vec![&self.weights, &self.logits]
    }

    fn blocks_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        vec![&mut self.weights, &mut self.logits]
    }
}

/// `Σ_k c_k f_k(window)` with the head's soft coefficients.
pub fn symbolic_predict(head: &SymbolicHead, lib: &BasisLibrary, window: &DMatrix<f64>) -> Result<f64> {
    let c = head.coefficients(lib)?;
    Ok(c.dot(&lib.features(window)?))
}

/// `p_k ∝ exp((ℓ_k + g_k)/τ)` with `ℓ = log α`, computed with a max shift.
pub fn gumbel_softmax(log_alpha: &[f64], gumbels: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return contract("gumbel_softmax temperature must be positive");
    }
    if log_alpha.len() != gumbels.len() || log_alpha.is_empty() {
        return contract("gumbel_softmax: logits and noise must have equal nonzero length");
    }
    let s: Vec<f64> = log_alpha.iter().zip(gumbels).map(|(a, g)| (a + g) / tau).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Standard Gumbel draws for one distillation step.
pub fn gumbel_noise(seed: u64, step: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, Domain::Gumbel, step, 0);
    let g = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    (0..n).map(|_| g.sample(&mut rng)).collect()
}

/// Distillation loss and its gradient for given features and Gumbel noise.
///
/// Returns `(loss, [d weights, d logits])`; the L1 subgradient at zero is 0.
pub fn distill_loss_grad(
    head: &SymbolicHead,
    lib: &BasisLibrary,
    features: &DMatrix<f64>,
    teacher: &[f64],
    gumbels: &[f64],
) -> Result<(f64, [DMatrix<f64>; 2])> {
    head.check(lib)?;
    let n = features.nrows();
    if n == 0 || teacher.len() != n || features.ncols() != lib.len() || gumbels.len() != lib.len() {
        return contract("distill: batch, teacher and feature shapes disagree");
    }
    // per-slot selection probabilities
    let probs: Vec<Vec<f64>> = lib
        .slots
        .iter()
        .map(|slot| {
            if slot.len() == 1 {
                Ok(vec![1.0])
            } else {
                let lg: Vec<f64> = slot.iter().map(|&k| head.logits[k]).collect();
                let g: Vec<f64> = slot.iter().map(|&k| gumbels[k]).collect();
                gumbel_softmax(&lg, &g, head.tau)
            }
        })
        .collect::<Result<_>>()?;
    let mut coef = DVector::zeros(lib.len());
    for (s, slot) in lib.slots.iter().enumerate() {
        for (j, &k) in slot.iter().enumerate() {
            coef[k] = head.weights[s] * probs[s][j];
        }
    }
    let pred = features * &coef;
    let resid: DVector<f64> = DVector::from_fn(n, |i, _| pred[i] - teacher[i]);
    let mse = resid.norm_squared() / n as f64;
    let l1: f64 = head.weights.iter().map(|w| w.abs()).sum();
    let loss = mse + head.l1 * l1;

    // d mse / d coef_k = (2/n) Σ_i r_i F_ik
    let dcoef = features.tr_mul(&resid) * (2.0 / n as f64);
    let mut gw = DMatrix::zeros(lib.slots.len(), 1);
    let mut gl = DMatrix::zeros(lib.len(), 1);
    for (s, slot) in lib.slots.iter().enumerate() {
        let p = &probs[s];
        let dp: f64 = slot.iter().enumerate().map(|(j, &k)| dcoef[k] * p[j]).sum();
        let w = head.weights[s];
        gw[s] = dp + head.l1 * if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 };
        if slot.len() > 1 {
            // ∂p_j/∂ℓ_k = p_j(δ_jk − p_k)/τ
            for (k_idx, &k) in slot.iter().enumerate() {
                let acc: f64 = slot
                    .iter()
                    .enumerate()
                    .map(|(j, &kj)| dcoef[kj] * w * p[j] * (if j == k_idx { 1.0 } else { 0.0 } - p[k_idx]))
                    .sum();
                gl[k] = acc / head.tau;
            }
        }
    }
    Ok((loss, [gw, gl]))
}

/// One Adam step on the distillation objective; returns the pre-step loss.
pub fn distill_step(
    head: &mut SymbolicHead,
    adam: &mut AdamState,
    lib: &BasisLibrary,
    batch_windows: &[&DMatrix<f64>],
    teacher_preds: &[f64],
    gumbels: &[f64],
) -> Result<f64> {
    let f = lib.feature_matrix(batch_windows)?;
    let (loss, grads) = distill_loss_grad(head, lib, &f, teacher_preds, gumbels)?;
    adam.update(head, &grads)?;
    Ok(loss)
}

/// Formats with six significant digits.
pub fn format_weight(w: f64) -> String {
    if w == 0.0 {
        return "0.00000".into();
    }
    let a = w.abs();
    if (1e-4..1e6).contains(&a) {
        let digits = a.log10().floor() as i32;
        let decimals = (5 - digits).max(0) as usize;
        let s = format!("{w:.decimals$}");
        // rounding can carry into a new digit (e.g. 9.999996 -> 10.00000)
        let rounded: f64 = s.parse().unwrap_or(w);
        if rounded.abs() >= 10f64.powi(digits + 1) {
            if decimals == 0 {
                return format!("{w:.5e}");
            }
            let d = decimals - 1;
            return format!("{w:.d$}");
        }
        s
    } else {
        format!("{w:.5e}")
    }
}

/// `"ŷ = w₁·desc₁ + w₂·desc₂ + …"` for `|c_k| > threshold`, largest first.
pub fn expression_from_coefficients(coef: &DVector<f64>, lib: &BasisLibrary, threshold: f64) -> String {
    let mut terms: Vec<(usize, f64)> = coef.iter().copied().enumerate().filter(|(_, c)| c.abs() > threshold).collect();
    terms.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    if terms.is_empty() {
        return "ŷ = 0".into();
    }
    let body: Vec<String> = terms.iter().map(|(k, c)| format!("{}·{}", format_weight(*c), lib.entries[*k])).collect();
    format!("ŷ = {}", body.join(" + "))
}

/// Expression of the head with selection slots collapsed to their argmax.
pub fn extract_expression(head: &SymbolicHead, lib: &BasisLibrary, threshold: f64) -> Result<String> {
    Ok(expression_from_coefficients(&head.hard_coefficients(lib)?, lib, threshold))
}

/// Parsed `(weight, basis)` terms of an emitted expression.
pub fn parse_expression(s: &str) -> Result<Vec<(f64, Basis)>> {
    let body = s
        .trim()
        .strip_prefix("ŷ = ")
        .ok_or_else(|| Error::Format(format!("expression must start with `ŷ = `: `{s}`")))?;
    if body.trim() == "0" {
        return Ok(Vec::new());
    }
    body.split(" + ")
        .map(|term| {
            let (w, d) = term
                .split_once('·')
                .ok_or_else(|| Error::Format(format!("term without `·`: `{term}`")))?;
            let w: f64 = w.trim().parse().map_err(|_| Error::Format(format!("bad weight in `{term}`")))?;
            Ok((w, d.parse()?))
        })
        .collect()
}

/// Evaluates parsed terms on a window.
pub fn evaluate_terms(terms: &[(f64, Basis)], window: &DMatrix<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for (w, b) in terms {
        if b.channel >= window.ncols() {
            return contract(format!("expression refers to channel {} of a {}-channel window", b.channel, window.ncols()));
        }
        if let BasisKind::Ma(l) = b.kind {
            if l > window.nrows() {
                return contract("moving-average window longer than the input window");
            }
        }
        acc += w * b.eval(window);
    }
    Ok(acc)
}

/// Moves selection slots to hard argmax choices so that predictions and the
/// emitted expression agree; the result has the same library layout.
pub fn harden(head: &SymbolicHead, lib: &BasisLibrary) -> Result<(SymbolicHead, BasisLibrary)> {
    let coef = head.hard_coefficients(lib)?;
    let slots: Vec<Vec<usize>> = (0..lib.len()).map(|k| vec![k]).collect();
    let plain = BasisLibrary { slots, ..lib.clone() };
    let out = SymbolicHead { weights: DMatrix::from_column_slice(lib.len(), 1, coef.as_slice()), logits: DMatrix::zeros(lib.len(), 1), ..head.clone() };
    Ok((out, plain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::Rng;

    fn ramp(l: usize) -> DMatrix<f64> {
        DMatrix::from_fn(l, 1, |i, _| (i + 1) as f64)
    }

    #[test]
    fn library_layout_for_one_channel() {
        let lib = build_library(1, 20, &LibrarySpec::default()).unwrap();
        let names: Vec<String> = lib.entries.iter().map(|b| b.to_string()).collect();
        assert_eq!(
            names,
            ["last(ch=0)", "ma(ch=0,w=5)", "ma(ch=0,w=10)", "ma(ch=0,w=20)", "diff(ch=0)", "ratio(ch=0)", "var(ch=0)"]
        );
        // duplicates collapse when the full window equals a lag
        let lib10 = build_library(1, 10, &LibrarySpec::default()).unwrap();
        assert_eq!(lib10.len(), 6);
        assert!(build_library(1, 1, &LibrarySpec::default()).is_err());
    }

    #[test]
    fn constant_channel_statistics() {
        let lib = build_library(1, 12, &LibrarySpec::default()).unwrap();
        let f = lib.features(&DMatrix::from_element(12, 1, 3.5)).unwrap();
        let by = |s: &str| f[lib.entries.iter().position(|b| b.to_string() == s).unwrap()];
        assert_eq!(by("last(ch=0)"), 3.5);
        assert_eq!(by("ma(ch=0,w=5)"), 3.5);
        assert_eq!(by("ma(ch=0,w=12)"), 3.5);
        assert_eq!(by("diff(ch=0)"), 0.0);
        assert_eq!(by("ratio(ch=0)"), 1.0);
        assert_eq!(by("var(ch=0)"), 0.0);
    }

    #[test]
    fn ramp_statistics() {
        let w = ramp(10);
        let ma10 = Basis { kind: BasisKind::Ma(10), channel: 0 }.eval(&w);
        let var = Basis { kind: BasisKind::Var, channel: 0 }.eval(&w);
        // mean of 1..10 and Σ(i − 5.5)²/9 = 82.5/9
        assert!((ma10 - 5.5).abs() < 1e-15);
        assert!((var - 82.5 / 9.0).abs() < 1e-12);
        assert!((var - 9.166_666_666_666).abs() < 1e-9);
        assert_eq!(Basis { kind: BasisKind::Ratio, channel: 0 }.eval(&w), 10.0);
        let mut z = w.clone();
        z[(0, 0)] = 0.0;
        assert_eq!(Basis { kind: BasisKind::Ratio, channel: 0 }.eval(&z), 1.0);
    }

    #[test]
    fn predict_fixtures() {
        let lib = build_library(3, 8, &LibrarySpec::default()).unwrap();
        let mut rng = crate::rng::stream(1, crate::rng::Domain::Test, 0, 0);
        let w = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut head = SymbolicHead::new(&lib, 0.0);
        assert_eq!(symbolic_predict(&head, &lib, &w).unwrap(), 0.0);
        let k = lib.entries.iter().position(|b| *b == Basis { kind: BasisKind::Last, channel: 2 }).unwrap();
        head.weights[k] = 1.0;
        assert_eq!(symbolic_predict(&head, &lib, &w).unwrap(), w[(7, 2)]);
        head.weights.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let mut naive = 0.0;
        for (k, b) in lib.entries.iter().enumerate() {
            naive += head.weights[k] * b.eval(&w);
        }
        assert!((symbolic_predict(&head, &lib, &w).unwrap() - naive).abs() < 1e-12);
        assert!(symbolic_predict(&head, &lib, &DMatrix::zeros(7, 3)).is_err());
    }

    #[test]
    fn gumbel_softmax_properties() {
        let p = gumbel_softmax(&[0.3; 4], &[0.0; 4], 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = gumbel_softmax(&[0.1, 0.5, 0.2], &[0.0; 3], 0.01).unwrap();
        assert!(p[1] > 0.999);
        let mut rng = crate::rng::stream(2, crate::rng::Domain::Test, 0, 0);
        for _ in 0..100 {
            let lg: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let g = gumbel_noise(3, rng.random(), 5);
            let p = gumbel_softmax(&lg, &g, rng.random_range(0.01..3.0)).unwrap();
            assert!(p.iter().all(|v| *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gumbel_softmax(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn distill_loss_matches_hand_computation() {
        let lib = BasisLibrary {
            entries: vec![Basis { kind: BasisKind::Last, channel: 0 }, Basis { kind: BasisKind::Diff, channel: 0 }],
            slots: vec![vec![0], vec![1]],
            window_len: 2,
            dx: 1,
        };
        let mut head = SymbolicHead::new(&lib, 0.1);
        head.weights[0] = 2.0;
        head.weights[1] = -1.0;
        // windows [1, 3] and [2, 0]: last = 3, 0; diff = 2, −2
        let f = DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 0.0, -2.0]);
        let teacher = [1.0, 4.0];
        let (loss, _) = distill_loss_grad(&head, &lib, &f, &teacher, &[0.0, 0.0]).unwrap();
        // predictions 4 and 2; squared errors 9 and 4; L1 = 3
        assert!((loss - (6.5 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let spec = LibrarySpec { selection: true, ..Default::default() };
        let lib = build_library(2, 12, &spec).unwrap();
        let mut rng = crate::rng::stream(4, crate::rng::Domain::Test, 0, 0);
        let windows: Vec<DMatrix<f64>> = (0..6).map(|_| DMatrix::from_fn(12, 2, |_, _| rng.random_range(0.5..1.5))).collect();
        let refs: Vec<&DMatrix<f64>> = windows.iter().collect();
        let f = lib.feature_matrix(&refs).unwrap();
        let teacher: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut head = SymbolicHead::new(&lib, 0.05);
        head.tau = 0.7;
        head.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        head.logits.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let g = gumbel_noise(1, 0, lib.len());
        let (_, grads) = distill_loss_grad(&head, &lib, &f, &teacher, &g).unwrap();
        let blocks = vec![head.weights.clone(), head.logits.clone()];
        let check = grad_check(&blocks, &grads, |b| {
            let h = SymbolicHead { weights: b[0].clone(), logits: b[1].clone(), ..head.clone() };
            distill_loss_grad(&h, &lib, &f, &teacher, &g).unwrap().0
        }, 1e-6, 1e-4, 1e-6);
        assert_eq!(check.passed, check.checked, "{:?}", check.failures);
    }

    #[test]
    fn shrinkage_with_zero_teacher() {
        let lib = build_library(2, 10, &LibrarySpec::default()).unwrap();
        let mut rng = crate::rng::stream(5, crate::rng::Domain::Test, 0, 0);
        let windows: Vec<DMatrix<f64>> = (0..8).map(|_| DMatrix::from_fn(10, 2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let refs: Vec<&DMatrix<f64>> = windows.iter().collect();
        let mut head = SymbolicHead::new(&lib, 10.0);
        head.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let mut adam = AdamState::new(&head, 0.01);
        let zeros = vec![0.0; 8];
        let mut prev = f64::INFINITY;
        for step in 0..200 {
            distill_step(&mut head, &mut adam, &lib, &refs, &zeros, &vec![0.0; lib.len()]).unwrap();
            let l1: f64 = head.weights.iter().map(|w| w.abs()).sum();
            if step < 40 {
                assert!(l1 < prev, "step {step}: {l1} >= {prev}");
            }
            prev = l1;
        }
        assert!(prev < 0.05 * lib.len() as f64);
    }

    #[test]
    fn descriptor_and_expression_formatting() {
        let lib = build_library(1, 20, &LibrarySpec::default()).unwrap();
        let mut head = SymbolicHead::new(&lib, 0.0);
        assert_eq!(extract_expression(&head, &lib, 1e-3).unwrap(), "ŷ = 0");
        let k = lib.entries.iter().position(|b| b.kind == BasisKind::Ma(10)).unwrap();
        head.weights[k] = 1.0;
        assert_eq!(extract_expression(&head, &lib, 1e-3).unwrap(), "ŷ = 1.00000·ma(ch=0,w=10)");
        assert_eq!(format_weight(-0.0123456789), "-0.0123457");
        assert_eq!(format_weight(12345.678), "12345.7");
        assert_eq!(format_weight(9.9999996), "10.0000");
        assert_eq!(format_weight(2.5e-7), "2.50000e-7");
        assert!("ma(ch=1)".parse::<Basis>().is_err());
        assert!("last(ch=1,w=3)".parse::<Basis>().is_err());
        assert!("ratio(ch=x)".parse::<Basis>().is_err());
    }

    #[test]
    fn expression_round_trip_reproduces_predictions() {
        let lib = build_library(3, 15, &LibrarySpec::default()).unwrap();
        let mut rng = crate::rng::stream(6, crate::rng::Domain::Test, 0, 0);
        let mut head = SymbolicHead::new(&lib, 0.0);
        head.weights.iter_mut().for_each(|w| *w = rng.random_range(-2.0..2.0));
        let expr = extract_expression(&head, &lib, 0.0).unwrap();
        let terms = parse_expression(&expr).unwrap();
        assert_eq!(terms.len(), lib.len());
        for _ in 0..5 {
            let w = DMatrix::from_fn(15, 3, |_, _| rng.random_range(0.5..1.5));
            let direct = symbolic_predict(&head, &lib, &w).unwrap();
            let parsed = evaluate_terms(&terms, &w).unwrap();
            // weights are printed to six significant digits
            let scale: f64 = terms.iter().map(|(c, b)| (c * b.eval(&w)).abs()).sum();
            assert!((direct - parsed).abs() <= 1e-5 * scale, "{direct} vs {parsed}");
        }
    }

    #[test]
    fn hardening_keeps_argmax_choice() {
        let spec = LibrarySpec { selection: true, ..Default::default() };
        let lib = build_library(1, 20, &spec).unwrap();
        let mut head = SymbolicHead::new(&lib, 0.0);
        let slot = lib.slots.iter().position(|s| s.len() > 1).unwrap();
        head.weights[slot] = 0.8;
        let members = lib.slots[slot].clone();
        head.logits[members[1]] = 3.0;
        let (hard, plain) = harden(&head, &lib).unwrap();
        assert!(plain.slots.iter().all(|s| s.len() == 1));
        assert_eq!(hard.weights[members[1]], 0.8);
        assert_eq!(extract_expression(&head, &lib, 1e-3).unwrap(), "ŷ = 0.800000·ma(ch=0,w=10)");
        assert_eq!(extract_expression(&hard, &plain, 1e-3).unwrap(), "ŷ = 0.800000·ma(ch=0,w=10)");
    }
}
