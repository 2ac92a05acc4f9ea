use nalgebra::DMatrix;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
    /// `(block, entry, analytic, finite difference)` of every failing entry.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error with a denominator floor, so that entries whose true
/// gradient is zero are judged on absolute error.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `loss` with step `h` for every entry of `blocks`,
/// compared against `grads` at relative tolerance `rtol`.
pub fn grad_check(
    blocks: &[DMatrix<f64>],
    grads: &[DMatrix<f64>],
    loss: impl Fn(&[DMatrix<f64>]) -> f64,
    h: f64,
    rtol: f64,
    floor: f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let mut work = blocks.to_vec();
    for (b, block) in blocks.iter().enumerate() {
        for k in 0..block.len() {
            let orig = block[k];
            work[b][k] = orig + h;
            let up = loss(&work);
            work[b][k] = orig - h;
            let dn = loss(&work);
            work[b][k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let g = grads[b][k];
            let rel = rel_err(g, fd, floor);
            out.checked += 1;
            out.worst_rel = out.worst_rel.max(rel);
            if rel < rtol {
                out.passed += 1;
            } else {
                out.failures.push((b, k, g, fd));
            }
        }
    }
    out
}
