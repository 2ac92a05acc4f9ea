//! Pricing-PDE residual, market-price-of-risk hinge and latent consistency.
//!
//! The auxiliary value network `V(z, t)` takes the raw time as its last
//! input, so `∂V/∂t` is one component of the closed-form input gradient and
//! the Hessian is only needed on the `z` block. On the tape the trace term is
//! assembled as `Σ_m c_m ‖σᵀw_m‖²` with `c = −2 w2 ⊙ h ⊙ (1 − h²)` and `w_m`
//! the rows of the first-layer weights restricted to `z`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{contract, Result};
use crate::numcore::{Mlp1h, MlpVars, Tape, Var};
use crate::sde::{coefficients_on_tape, mpr_on_tape, Dynamics, SdeVars};

/// Auxiliary value network over `[z; t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingNet {
    pub net: Mlp1h,
}

impl PricingNet {
    pub fn random<R: Rng>(dz: usize, hidden: usize, rng: &mut R) -> Self {
        Self { net: Mlp1h::random(dz + 1, hidden, 1, rng) }
    }

    pub fn dz(&self) -> usize {
        self.net.din() - 1
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhysicsConfig {
    /// Risk-free rate.
    pub r: f64,
    /// Sharpe threshold of the hinge.
    pub kappa: f64,
    /// Collocation points per batch.
    pub n_coll: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { r: 0.0, kappa: 2.0, n_coll: 64 }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || self.n_coll == 0 || !self.r.is_finite() {
            return contract("physics config needs kappa > 0, n_coll >= 1 and finite r");
        }
        Ok(())
    }
}

fn value_input(z: &DVector<f64>, t: f64) -> Vec<f64> {
    let mut u: Vec<f64> = z.iter().copied().collect();
    u.push(t);
    u
}

/// `∂V/∂t + μ·∇V + ½tr(σσᵀ∇²V) − rV` at `(z, t)`.
pub fn fk_residual<D: Dynamics + ?Sized>(v: &PricingNet, dynamics: &D, z: &DVector<f64>, t: f64, r: f64) -> Result<f64> {
    let dz = dynamics.dim();
    if v.dz() != dz || z.len() != dz {
        return contract("fk_residual: latent dimensions disagree");
    }
    let u = value_input(z, t);
    let grad = v.net.input_grad(&u)?;
    let hess = v.net.input_hessian(&u)?;
    let value = v.net.forward(&u)?[0];
    let mu = dynamics.drift(z, t);
    let sigma = dynamics.diffusion(z, t);
    let hzz = hess.view((0, 0), (dz, dz));
    let trace = (&sigma * sigma.transpose() * hzz).trace();
    let drift_term: f64 = (0..dz).map(|i| mu[i] * grad[i]).sum();
    Ok(grad[dz] + drift_term + 0.5 * trace - r * value)
}

/// Mean squared residual over the collocation points.
pub fn pde_loss<D: Dynamics + ?Sized>(v: &PricingNet, dynamics: &D, coll: &[(DVector<f64>, f64)], r: f64) -> Result<f64> {
    if coll.is_empty() {
        return contract("pde_loss needs at least one collocation point");
    }
    let mut acc = 0.0;
    for (z, t) in coll {
        acc += fk_residual(v, dynamics, z, *t, r)?.powi(2);
    }
    Ok(acc / coll.len() as f64)
}

/// Mean of `max(0, ‖σ⁻¹μ‖² − κ²)` over the samples.
pub fn mpr_loss<D: Dynamics + ?Sized>(dynamics: &D, samples: &[(DVector<f64>, f64)], kappa: f64) -> Result<f64> {
    if samples.is_empty() {
        return contract("mpr_loss needs at least one sample");
    }
    let total: f64 = samples
        .iter()
        .map(|(z, t)| {
            let lam = crate::sde::market_price_of_risk(dynamics, z, *t);
            (lam.norm_squared() - kappa * kappa).max(0.0)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// `(1/M) Σ_{j=1..M} ‖z_j^sde − z_j^enc‖²` on a shared `(M+1)`-point grid.
pub fn consistency_loss(sde_states: &DMatrix<f64>, enc_path: &DMatrix<f64>) -> Result<f64> {
    if sde_states.shape() != enc_path.shape() || sde_states.nrows() < 2 {
        return contract(format!(
            "consistency_loss: path shapes {:?} and {:?} differ or have fewer than two points",
            sde_states.shape(),
            enc_path.shape()
        ));
    }
    let m = sde_states.nrows() - 1;
    let diff = sde_states.rows(1, m) - enc_path.rows(1, m);
    Ok(diff.norm_squared() / m as f64)
}

/// Residual column (`n × 1`) at collocation states `z` (`n × dz`) and times `t`.
pub fn fk_residual_on_tape(
    tape: &mut Tape,
    value: &MlpVars,
    sde: &SdeVars,
    freq_raw: Var,
    z: &DMatrix<f64>,
    t: &[f64],
    r: f64,
) -> Result<Var> {
    let zc = tape.constant(z.clone());
    fk_residual_at(tape, value, sde, freq_raw, zc, t, r)
}

/// As [`fk_residual_on_tape`] with the states given as a node, so that the
/// residual is also differentiated through the collocation points.
pub fn fk_residual_at(
    tape: &mut Tape,
    value: &MlpVars,
    sde: &SdeVars,
    freq_raw: Var,
    zc: Var,
    t: &[f64],
    r: f64,
) -> Result<Var> {
    let (n, dz) = tape.value(zc).shape();
    if t.len() != n || n == 0 {
        return contract("fk_residual_on_tape: need one time per collocation state");
    }
    let tc = tape.constant(DMatrix::from_column_slice(n, 1, t));
    // value network derivatives
    let uv = tape.concat(zc, tc);
    let h = value.hidden(tape, uv);
    let h2 = tape.square(h);
    let neg = tape.scale(h2, -1.0);
    let s = tape.add_scalar(neg, 1.0);
    let g1 = tape.mul_row(s, value.w2);
    let grad = tape.matmul(g1, value.w1);
    let dvdt = tape.slice_cols(grad, dz, 1);
    let dvdz = tape.slice_cols(grad, 0, dz);
    let gh = tape.mul(g1, h);
    let c = tape.scale(gh, -2.0);
    // SDE coefficients at the same points
    let emb = tape.time_embed(freq_raw, t);
    let us = tape.concat(zc, emb);
    let coeffs = coefficients_on_tape(tape, sde, us);
    let w1z = tape.slice_cols(value.w1, 0, dz);
    let q = tape.quad_form(w1z, coeffs.l, coeffs.d);
    let cq = tape.mul(c, q);
    let tr = tape.row_sum(cq);
    let half_tr = tape.scale(tr, 0.5);
    let mg = tape.mul(coeffs.mu, dvdz);
    let drift = tape.row_sum(mg);
    let mut res = tape.add(dvdt, drift);
    res = tape.add(res, half_tr);
    if r != 0.0 {
        let v = tape.linear(h, value.w2, Some(value.b2));
        let rv = tape.scale(v, -r);
        res = tape.add(res, rv);
    }
    Ok(res)
}

/// Mean of squared residuals as a scalar node.
pub fn pde_loss_on_tape(
    tape: &mut Tape,
    value: &MlpVars,
    sde: &SdeVars,
    freq_raw: Var,
    z: &DMatrix<f64>,
    t: &[f64],
    r: f64,
) -> Result<Var> {
    let res = fk_residual_on_tape(tape, value, sde, freq_raw, z, t, r)?;
    let sq = tape.square(res);
    Ok(tape.mean(sq))
}

/// `mean_rows max(0, ‖λ_row‖² − κ²)` for an `n × dz` node of risk prices.
pub fn mpr_hinge_on_tape(tape: &mut Tape, lambda: Var, kappa: f64) -> Var {
    let sq = tape.square(lambda);
    let norm2 = tape.row_sum(sq);
    let excess = tape.add_scalar(norm2, -kappa * kappa);
    let hinge = tape.relu(excess);
    tape.mean(hinge)
}

/// Hinge at a batch of points `u = [z, TimeEmbedding(t)]`.
pub fn mpr_loss_on_tape(tape: &mut Tape, sde: &SdeVars, u: Var, kappa: f64) -> Var {
    let c = coefficients_on_tape(tape, sde, u);
    let lam = mpr_on_tape(tape, &c);
    mpr_hinge_on_tape(tape, lam, kappa)
}

/// Consistency between `1 × dz` state nodes and rows of an encoder path node.
pub fn consistency_on_tape(tape: &mut Tape, states: &[Var], enc_path: Var) -> Result<Var> {
    let m = states.len().saturating_sub(1);
    if m == 0 || tape.value(enc_path).nrows() != states.len() {
        return contract("consistency_on_tape: grids differ");
    }
    let mut acc: Option<Var> = None;
    for (j, &z) in states.iter().enumerate().skip(1) {
        let e = tape.row(enc_path, j);
        let d = tape.sub(z, e);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    Ok(tape.scale(acc.expect("m >= 1"), 1.0 / m as f64))
}
