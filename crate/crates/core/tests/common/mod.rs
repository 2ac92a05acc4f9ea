#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artemis::sde::{sde_grid, sde_noise, simulate_with_noise, Dynamics};
use nalgebra::{DMatrix, DVector};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_artemis"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.conf")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn schema(name: &str) -> serde_json::Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Validates `file` against a shipped schema and returns the parsed value.
pub fn check_schema(name: &str, file: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema(name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(&v).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{} violates {name}: {errors:?}", file.display());
    v
}

/// Every regular file under `dir` with its bytes, sorted by name.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Toy dataset directory written by the binary; returns its exit code.
pub fn generate_toy(out: &Path) -> i32 {
    let o = run(&["generate", "--config", toy_config().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    code(&o)
}

/// Mean absolute terminal error of Euler–Maruyama with `m` steps against
/// the same Brownian path resolved with `fine` steps, for each `m`.
pub fn strong_errors<D: Dynamics>(dyn_: &D, z0: &DVector<f64>, horizon: f64, coarse: &[usize], fine: usize, paths: u64, seed: u64) -> Vec<f64> {
    let dim = dyn_.dim();
    let fine_grid = sde_grid(0.0, horizon, fine);
    let mut err = vec![0.0; coarse.len()];
    for p in 0..paths {
        let dw = sde_noise(seed, p, fine, dim);
        let reference = simulate_with_noise(dyn_, z0, &fine_grid, &dw).unwrap();
        let zref = reference.row(fine).transpose();
        for (k, &m) in coarse.iter().enumerate() {
            let r = fine / m;
            // coarse increment = sum of r fine increments, rescaled to N(0, 1)
            let noise = DMatrix::from_fn(m, dim, |j, c| (0..r).map(|i| dw[(j * r + i, c)]).sum::<f64>() / (r as f64).sqrt());
            let states = simulate_with_noise(dyn_, z0, &sde_grid(0.0, horizon, m), &noise).unwrap();
            err[k] += (states.row(m).transpose() - &zref).norm();
        }
    }
    err.iter().map(|e| e / paths as f64).collect()
}

/// Least-squares slope of `log err` on `log Δt`.
pub fn loglog_slope(coarse: &[usize], horizon: f64, err: &[f64]) -> f64 {
    let x: Vec<f64> = coarse.iter().map(|&m| (horizon / m as f64).ln()).collect();
    let y: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `dX = μX dt + σX dW`: multiplicative noise, strong order one half.
pub struct Gbm {
    pub mu: f64,
    pub sigma: f64,
}

impl Dynamics for Gbm {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, z: &DVector<f64>, _t: f64) -> DVector<f64> {
        z * self.mu
    }

    fn diffusion_factors(&self, z: &DVector<f64>, _t: f64) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::identity(1, 1), z * self.sigma)
    }
}

/// Terminal values of `paths` OU paths from 0 on `[0, 1]`.
pub fn ou_terminal(theta: f64, s: f64, m: usize, paths: u64, seed: u64) -> Vec<f64> {
    let ou = artemis::sde::AffineSde::ou(1, theta, s);
    let z0 = DVector::zeros(1);
    (0..paths).map(|p| artemis::sde::euler_maruyama(&ou, &z0, 0.0, 1.0, m, seed, p).unwrap().states[(m, 0)]).collect()
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Best simplex point on a grid of step `1/n` (three assets).
pub fn simplex_grid_argmax(f: impl Fn(&[f64]) -> f64, n: usize) -> Vec<f64> {
    let mut best = (f64::NEG_INFINITY, vec![]);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let w = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let v = f(&w);
            if v > best.0 {
                best = (v, w.to_vec());
            }
        }
    }
    best.1
}
