//! Latent neural SDE `dz = μ(z,t)dt + σ(z,t)dW` with `σ = L·D`, simulated by
//! Euler–Maruyama on stored noise, and the market price of risk `σ⁻¹μ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::encoder::{time_embed, TimeEmbedding};
use crate::error::{contract, Error, Result};
use crate::numcore::{softplus, softplus_inv, tril_index, Mlp1h, MlpVars, Tape, Var};
use crate::rng::{normals, Domain};

/// States whose Euclidean norm exceeds this abort the simulation.
pub const BLOWUP_NORM: f64 = 1e6;

/// Drift network over `[z; TimeEmbedding(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftNet {
    pub net: Mlp1h,
}

/// Factored diffusion `σ = (I + strictly_lower(lnet)) · diag(softplus(dnet))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionNet {
    pub lnet: Mlp1h,
    pub dnet: Mlp1h,
}

impl DriftNet {
    pub fn random<R: Rng>(dz: usize, embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut net = Mlp1h::random(dz + embed_dim, hidden, dz, rng);
        net.w2 *= 0.1;
        Self { net }
    }

    pub fn dz(&self) -> usize {
        self.net.dout()
    }
}

impl DiffusionNet {
    /// Small correlations and volatilities near `vol0`.
    pub fn random<R: Rng>(dz: usize, embed_dim: usize, hidden: usize, vol0: f64, rng: &mut R) -> Self {
        let din = dz + embed_dim;
        let mut lnet = Mlp1h::random(din, hidden, dz * (dz - 1) / 2, rng);
        lnet.w2 *= 0.1;
        let mut dnet = Mlp1h::random(din, hidden, dz, rng);
        dnet.w2 *= 0.1;
        dnet.b2.fill(softplus_inv(vol0));
        Self { lnet, dnet }
    }

    pub fn dz(&self) -> usize {
        self.dnet.dout()
    }
}

/// Anything that supplies drift and factored diffusion.
pub trait Dynamics {
    fn dim(&self) -> usize;
    fn drift(&self, z: &DVector<f64>, t: f64) -> DVector<f64>;
    /// `(L, D)` with `L` unit lower triangular and `σ = L·diag(D)`.
    fn diffusion_factors(&self, z: &DVector<f64>, t: f64) -> (DMatrix<f64>, DVector<f64>);

    fn diffusion(&self, z: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let (l, d) = self.diffusion_factors(z, t);
        l * DMatrix::from_diagonal(&d)
    }
}

/// Neural drift and diffusion sharing one time embedding.
#[derive(Debug, Clone, Copy)]
pub struct NeuralSde<'a> {
    pub drift: &'a DriftNet,
    pub diffusion: &'a DiffusionNet,
    pub embed: &'a TimeEmbedding,
}

fn net_input(z: &DVector<f64>, e: &TimeEmbedding, t: f64) -> Vec<f64> {
    let mut u: Vec<f64> = z.iter().copied().collect();
    u.extend(time_embed(e, t));
    u
}

/// `μ(z, t)`.
pub fn drift_eval(d: &DriftNet, e: &TimeEmbedding, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    d.net.forward(&net_input(z, e, t))
}

/// Unit lower `L` from a packed strictly-lower vector.
pub fn unit_lower(packed: &[f64], dz: usize) -> DMatrix<f64> {
    let mut l = DMatrix::identity(dz, dz);
    for i in 1..dz {
        for j in 0..i {
            l[(i, j)] = packed[tril_index(i, j)];
        }
    }
    l
}

/// `(L, D)` of the factored diffusion.
pub fn diffusion_factors(s: &DiffusionNet, e: &TimeEmbedding, z: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let u = net_input(z, e, t);
    let dz = s.dz();
    let packed = s.lnet.forward(&u)?;
    let d = s.dnet.forward(&u)?.map(softplus);
    Ok((unit_lower(packed.as_slice(), dz), d))
}

/// `σ(z, t) = L·D`.
pub fn diffusion_eval(s: &DiffusionNet, e: &TimeEmbedding, z: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    let (l, d) = diffusion_factors(s, e, z, t)?;
    Ok(l * DMatrix::from_diagonal(&d))
}

impl Dynamics for NeuralSde<'_> {
    fn dim(&self) -> usize {
        self.drift.dz()
    }

    fn drift(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        drift_eval(self.drift, self.embed, z, t).expect("drift input width fixed at construction")
    }

    fn diffusion_factors(&self, z: &DVector<f64>, t: f64) -> (DMatrix<f64>, DVector<f64>) {
        diffusion_factors(self.diffusion, self.embed, z, t).expect("diffusion input width fixed at construction")
    }
}

/// Affine test dynamics `μ = A z + c`, constant `σ = L·diag(D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSde {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub l: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl AffineSde {
    /// `dz = −θ z dt + s dW` in `dim` independent coordinates.
    pub fn ou(dim: usize, theta: f64, s: f64) -> Self {
        Self {
            a: DMatrix::identity(dim, dim) * -theta,
            c: DVector::zeros(dim),
            l: DMatrix::identity(dim, dim),
            d: DVector::from_element(dim, s),
        }
    }

    pub fn constant(c: DVector<f64>, vol: f64) -> Self {
        let dim = c.len();
        Self { a: DMatrix::zeros(dim, dim), c, l: DMatrix::identity(dim, dim), d: DVector::from_element(dim, vol) }
    }
}

impl Dynamics for AffineSde {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn drift(&self, z: &DVector<f64>, _t: f64) -> DVector<f64> {
        &self.a * z + &self.c
    }

    fn diffusion_factors(&self, _z: &DVector<f64>, _t: f64) -> (DMatrix<f64>, DVector<f64>) {
        (self.l.clone(), self.d.clone())
    }
}

/// Simulated latent path and the draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    /// `t_0..t_M`.
    pub grid: Vec<f64>,
    /// `(M+1) × dz`.
    pub states: DMatrix<f64>,
    /// `M × dz` standard normals.
    pub noise: DMatrix<f64>,
    pub seed: u64,
    pub sample: u64,
}

/// Standard normals for `(seed, sample)`, one keyed stream per step.
pub fn sde_noise(seed: u64, sample: u64, m: usize, dw: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, dw);
    for j in 0..m {
        let draws = normals(seed, Domain::SdeNoise, sample, j as u64, dw);
        out.row_mut(j).copy_from_slice(&draws);
    }
    out
}

/// `t_0 + jT/M`, `j = 0..M`.
pub fn sde_grid(t0: f64, horizon: f64, m: usize) -> Vec<f64> {
    (0..=m).map(|j| t0 + horizon * j as f64 / m as f64).collect()
}

/// Euler–Maruyama on a given grid and noise matrix.
pub fn simulate_with_noise<D: Dynamics + ?Sized>(
    dynamics: &D,
    z0: &DVector<f64>,
    grid: &[f64],
    noise: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dz = dynamics.dim();
    let m = grid.len().saturating_sub(1);
    if m == 0 || z0.len() != dz || noise.shape() != (m, dz) {
        return contract(format!(
            "simulate: grid of {} points, z0 of length {}, noise {:?}, dz {}",
            grid.len(),
            z0.len(),
            noise.shape(),
            dz
        ));
    }
    let mut states = DMatrix::zeros(m + 1, dz);
    states.row_mut(0).copy_from(&z0.transpose());
    let mut z = z0.clone();
    for j in 0..m {
        let t = grid[j];
        let dt = grid[j + 1] - t;
        let mu = dynamics.drift(&z, t);
        let (l, d) = dynamics.diffusion_factors(&z, t);
        let eps = noise.row(j).transpose();
        let shock = l * d.component_mul(&eps);
        z += mu * dt + shock * dt.sqrt();
        let norm = z.norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(Error::Blowup { step: j + 1, norm });
        }
        states.row_mut(j + 1).copy_from(&z.transpose());
    }
    Ok(states)
}

/// `z_{j+1} = z_j + μΔt + σ√Δt ε_j` on `t0 + [0, T]` with `M` steps.
pub fn euler_maruyama<D: Dynamics + ?Sized>(
    dynamics: &D,
    z0: &DVector<f64>,
    t0: f64,
    horizon: f64,
    m: usize,
    seed: u64,
    sample: u64,
) -> Result<LatentTrajectory> {
    if m == 0 || !(horizon > 0.0) {
        return contract("euler_maruyama needs M >= 1 and T > 0");
    }
    let grid = sde_grid(t0, horizon, m);
    let noise = sde_noise(seed, sample, m, dynamics.dim());
    let states = simulate_with_noise(dynamics, z0, &grid, &noise)?;
    Ok(LatentTrajectory { grid, states, noise, seed, sample })
}

/// `λ = σ⁻¹μ` by forward substitution against `L` then division by `D`.
pub fn market_price_of_risk<D: Dynamics + ?Sized>(dynamics: &D, z: &DVector<f64>, t: f64) -> DVector<f64> {
    let mu = dynamics.drift(z, t);
    let (l, d) = dynamics.diffusion_factors(z, t);
    mpr_from_factors(&mu, &l, &d)
}

pub fn mpr_from_factors(mu: &DVector<f64>, l: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    let n = mu.len();
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let mut acc = mu[i];
        for j in 0..i {
            acc -= l[(i, j)] * y[j];
        }
        y[i] = acc;
    }
    y.component_div(d)
}

/// Tape handles of the drift and diffusion networks.
#[derive(Debug, Clone, Copy)]
pub struct SdeVars {
    pub drift: MlpVars,
    pub lnet: MlpVars,
    pub dnet: MlpVars,
}

impl SdeVars {
    pub fn new(tape: &mut Tape, drift: &DriftNet, diffusion: &DiffusionNet, first_block: usize) -> Self {
        Self {
            drift: drift.net.to_tape(tape, first_block),
            lnet: diffusion.lnet.to_tape(tape, first_block + 4),
            dnet: diffusion.dnet.to_tape(tape, first_block + 8),
        }
    }
}

/// Coefficient nodes for a batch of `n` points: `mu` and `d` are `n × dz`,
/// `l` is `n × dz(dz−1)/2`.
#[derive(Debug, Clone, Copy)]
pub struct CoeffVars {
    pub mu: Var,
    pub l: Var,
    pub d: Var,
}

/// Drift and diffusion factors at the rows of `u = [z, TimeEmbedding(t)]`.
pub fn coefficients_on_tape(tape: &mut Tape, vars: &SdeVars, u: Var) -> CoeffVars {
    let mu = vars.drift.forward(tape, u);
    let l = vars.lnet.forward(tape, u);
    let draw = vars.dnet.forward(tape, u);
    let d = tape.softplus(draw);
    CoeffVars { mu, l, d }
}

/// `λ = D⁻¹L⁻¹μ` row-wise.
pub fn mpr_on_tape(tape: &mut Tape, c: &CoeffVars) -> Var {
    let y = tape.unit_lower_solve(c.l, c.mu);
    tape.div(y, c.d)
}

/// Euler–Maruyama recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapePath {
    /// `1 × dz` state nodes `z_0..z_M`.
    pub states: Vec<Var>,
    /// Coefficients at `(z_j, t_j)`, `j = 0..M−1`.
    pub coeffs: Vec<CoeffVars>,
}

/// Records the simulation; with `noise = None` the diffusion term is
/// dropped (deterministic Euler on the drift).
pub fn simulate_on_tape(
    tape: &mut Tape,
    vars: &SdeVars,
    freq_raw: Var,
    z0: Var,
    grid: &[f64],
    noise: Option<&DMatrix<f64>>,
) -> Result<TapePath> {
    let m = grid.len().saturating_sub(1);
    let dz = tape.value(z0).ncols();
    if m == 0 || tape.value(z0).nrows() != 1 {
        return contract("simulate_on_tape needs a 1 × dz initial state and at least two grid points");
    }
    if let Some(n) = noise {
        if n.shape() != (m, dz) {
            return contract(format!("noise has shape {:?}, expected ({m}, {dz})", n.shape()));
        }
    }
    let emb = tape.time_embed(freq_raw, &grid[..m]);
    let mut states = Vec::with_capacity(m + 1);
    let mut coeffs = Vec::with_capacity(m);
    states.push(z0);
    let mut z = z0;
    for j in 0..m {
        let dt = grid[j + 1] - grid[j];
        let e = tape.row(emb, j);
        let u = tape.concat(z, e);
        let c = coefficients_on_tape(tape, vars, u);
        let drift = tape.scale(c.mu, dt);
        let mut next = tape.add(z, drift);
        if let Some(n) = noise {
            let eps = tape.constant(n.rows(j, 1).into_owned());
            let de = tape.mul(c.d, eps);
            let shock = tape.unit_lower_mul(c.l, de);
            let shock = tape.scale(shock, dt.sqrt());
            next = tape.add(next, shock);
        }
        let norm = tape.value(next).norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(Error::Blowup { step: j + 1, norm });
        }
        states.push(next);
        coeffs.push(c);
        z = next;
    }
    Ok(TapePath { states, coeffs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn random_sde(dz: usize, seed: u64) -> (DriftNet, DiffusionNet, TimeEmbedding) {
        let mut rng = stream(seed, Domain::Test, 0, 0);
        let e = TimeEmbedding::new(2);
        let mut d = DriftNet::random(dz, 4, 6, &mut rng);
        d.net.w2 *= 10.0;
        d.net.b2.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let mut s = DiffusionNet::random(dz, 4, 6, 0.5, &mut rng);
        s.lnet.w2 *= 10.0;
        s.dnet.w2 *= 10.0;
        (d, s, e)
    }

    #[test]
    fn zero_drift_net_returns_bias() {
        let e = TimeEmbedding::new(2);
        let mut d = DriftNet { net: Mlp1h::zeros(3 + 4, 5, 3) };
        d.net.b2.copy_from_slice(&[1.0, -2.0, 0.5]);
        let mu = drift_eval(&d, &e, &DVector::from_vec(vec![0.3, 0.1, -4.0]), 0.7).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn drift_ignores_time_when_embedding_weights_vanish() {
        let (mut d, _, e) = random_sde(3, 1);
        d.net.w1.columns_mut(3, 4).fill(0.0);
        let z = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        assert_eq!(drift_eval(&d, &e, &z, 0.1).unwrap(), drift_eval(&d, &e, &z, 3.7).unwrap());
    }

    #[test]
    fn drift_matches_scalar_oracle() {
        let (d, _, e) = random_sde(3, 2);
        let (z, t) = ([0.2, -0.7, 1.1], 0.43);
        let freqs = e.freqs();
        let mut u = z.to_vec();
        for f in &freqs {
            u.push((2.0 * std::f64::consts::PI * f * t).sin());
            u.push((2.0 * std::f64::consts::PI * f * t).cos());
        }
        let mu = drift_eval(&d, &e, &DVector::from_column_slice(&z), t).unwrap();
        for o in 0..3 {
            let mut acc = d.net.b2[o];
            for m in 0..d.net.hidden() {
                let mut a = d.net.b1[m];
                for (i, ui) in u.iter().enumerate() {
                    a += d.net.w1[(m, i)] * ui;
                }
                acc += d.net.w2[(o, m)] * a.tanh();
            }
            assert!((mu[o] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn zero_diffusion_nets_give_ln2_identity() {
        let e = TimeEmbedding::new(1);
        let s = DiffusionNet { lnet: Mlp1h::zeros(4, 3, 1), dnet: Mlp1h::zeros(4, 3, 2) };
        let sigma = diffusion_eval(&s, &e, &DVector::from_vec(vec![1.0, 2.0]), 0.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(sigma, DMatrix::identity(2, 2) * ln2);
        assert!((ln2 - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn determinant_is_product_of_volatilities() {
        let (_, s, e) = random_sde(4, 3);
        for k in 0..20 {
            let z = DVector::from_fn(4, |i, _| (i as f64 - 1.5) * 0.3 * k as f64);
            let (_, d) = diffusion_factors(&s, &e, &z, 0.1 * k as f64).unwrap();
            let sigma = diffusion_eval(&s, &e, &z, 0.1 * k as f64).unwrap();
            let det = sigma.determinant();
            assert!((det - d.product()).abs() <= 1e-12 * det.abs().max(1e-300));
        }
    }

    #[test]
    fn sigma_sigma_t_is_positive_definite() {
        let (_, s, e) = random_sde(4, 4);
        let mut rng = stream(4, Domain::Test, 1, 0);
        for _ in 0..1000 {
            let z = DVector::from_fn(4, |_, _| rng.random_range(-5.0..5.0));
            let sigma = diffusion_eval(&s, &e, &z, rng.random_range(0.0..2.0)).unwrap();
            assert!((&sigma * sigma.transpose()).cholesky().is_some());
        }
    }

    #[test]
    fn deterministic_limits() {
        let z0 = DVector::from_vec(vec![1.0, -2.0]);
        let still = AffineSde::constant(DVector::zeros(2), 0.0);
        let traj = euler_maruyama(&still, &z0, 0.0, 1.0, 10, 5, 0).unwrap();
        for j in 0..=10 {
            assert_eq!(traj.states.row(j).transpose(), z0);
        }
        let c = DVector::from_vec(vec![0.5, 0.25]);
        let moving = AffineSde::constant(c.clone(), 0.0);
        let traj = euler_maruyama(&moving, &z0, 0.0, 2.0, 8, 5, 0).unwrap();
        let end = traj.states.row(8).transpose();
        assert!((end - (&z0 + c * 2.0)).amax() < 1e-14);
    }

    #[test]
    fn replay_with_stored_noise_is_bit_identical() {
        let (d, s, e) = random_sde(3, 5);
        let sde = NeuralSde { drift: &d, diffusion: &s, embed: &e };
        let z0 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let traj = euler_maruyama(&sde, &z0, 1.0, 1.0, 16, 77, 3).unwrap();
        assert_eq!(traj.states.row(0).transpose(), z0);
        let again = simulate_with_noise(&sde, &z0, &traj.grid, &traj.noise).unwrap();
        assert_eq!(again, traj.states);
        assert_eq!(euler_maruyama(&sde, &z0, 1.0, 1.0, 16, 77, 3).unwrap(), traj);
    }

    #[test]
    fn blowup_reports_step() {
        let explode = AffineSde { a: DMatrix::identity(1, 1) * 100.0, ..AffineSde::constant(DVector::zeros(1), 0.0) };
        let err = euler_maruyama(&explode, &DVector::from_element(1, 1.0), 0.0, 1.0, 10, 0, 0).unwrap_err();
        match err {
            Error::Blowup { step, .. } => assert_eq!(step, 6),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mpr_fixtures() {
        let zero = AffineSde::constant(DVector::zeros(3), 0.7);
        assert!(market_price_of_risk(&zero, &DVector::zeros(3), 0.0).iter().all(|v| *v == 0.0));
        let unit = AffineSde::constant(DVector::from_vec(vec![3.0, 4.0]), 1.0);
        let lam = market_price_of_risk(&unit, &DVector::zeros(2), 0.0);
        assert_eq!(lam.as_slice(), &[3.0, 4.0]);
        assert_eq!(lam.norm_squared(), 25.0);
    }

    #[test]
    fn mpr_reconstructs_drift() {
        let (d, s, e) = random_sde(4, 6);
        let sde = NeuralSde { drift: &d, diffusion: &s, embed: &e };
        for k in 0..10 {
            let z = DVector::from_fn(4, |i, _| ((i + k) as f64).sin());
            let lam = market_price_of_risk(&sde, &z, 0.2 * k as f64);
            let back = sde.diffusion(&z, 0.2 * k as f64) * lam;
            assert!((back - sde.drift(&z, 0.2 * k as f64)).amax() < 1e-10);
        }
    }

    #[test]
    fn mpr_equals_elementwise_ratio_when_l_is_identity() {
        let (d, mut s, e) = random_sde(3, 7);
        s.lnet = Mlp1h::zeros(s.lnet.din(), 2, 3);
        let sde = NeuralSde { drift: &d, diffusion: &s, embed: &e };
        let z = DVector::from_vec(vec![0.3, -0.4, 0.9]);
        let (_, dd) = sde.diffusion_factors(&z, 0.5);
        let elementwise = sde.drift(&z, 0.5).component_div(&dd);
        assert_eq!(market_price_of_risk(&sde, &z, 0.5), elementwise);
    }

    #[test]
    fn tape_simulation_matches_plain() {
        let (d, s, e) = random_sde(3, 8);
        let sde = NeuralSde { drift: &d, diffusion: &s, embed: &e };
        let z0 = DVector::from_vec(vec![0.4, -0.2, 0.1]);
        let traj = euler_maruyama(&sde, &z0, 1.0, 1.0, 12, 9, 1).unwrap();
        let mut tape = Tape::new();
        let vars = SdeVars::new(&mut tape, &d, &s, 0);
        let f = tape.param(12, &e.freq_raw);
        let z = tape.row_vector(z0.as_slice());
        let path = simulate_on_tape(&mut tape, &vars, f, z, &traj.grid, Some(&traj.noise)).unwrap();
        for (j, v) in path.states.iter().enumerate() {
            let diff = (tape.value(*v) - traj.states.rows(j, 1)).amax();
            assert!(diff < 1e-13, "step {j}: {diff}");
        }
        let c = path.coeffs[4];
        let lam = mpr_on_tape(&mut tape, &c);
        let plain = market_price_of_risk(&sde, &traj.states.row(4).transpose(), traj.grid[4]);
        assert!((tape.value(lam) - plain.transpose()).amax() < 1e-12);
    }
}
