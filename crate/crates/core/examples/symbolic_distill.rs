//! Distils a teacher that is a sparse combination of library statistics and
//! prints the recovered expression, then evaluates the parsed expression on
//! a fresh window.
//!
//! `cargo run --release --example symbolic_distill [lambda]`

use artemis::rng::{normals, Domain};
use artemis::symbolic::{build_library, evaluate_terms, parse_expression, LibrarySpec};
use artemis::train::{distill_features, TrainConfig};
use nalgebra::DMatrix;

fn main() -> artemis::Result<()> {
    let lambda: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let (n, l, dx) = (400, 16, 3);
    let windows: Vec<DMatrix<f64>> = (0..n)
        .map(|s| {
            let z = normals(11, Domain::Test, s as u64, 0, l * dx);
            DMatrix::from_fn(l, dx, |t, j| z[t * dx + j] + 0.05 * t as f64 * (j as f64 + 1.0))
        })
        .collect();
    let lib = build_library(dx, l, &LibrarySpec::default())?;
    let refs: Vec<&DMatrix<f64>> = windows.iter().collect();
    let f = lib.feature_matrix(&refs)?;
    let pick = |name: &str| lib.entries.iter().position(|b| b.to_string() == name).expect("library entry");
    let (a, b) = (pick("ma(ch=0,w=5)"), pick("diff(ch=2)"));
    let teacher: Vec<f64> = (0..n).map(|i| 1.5 * f[(i, a)] - 0.25 * f[(i, b)]).collect();

    let mut cfg = TrainConfig { distill_epochs: 200, batch: 100, distill_lr: 0.02, ..TrainConfig::default() };
    cfg.weights.lambda4 = lambda;
    let r = distill_features(&lib, &f, &teacher, &cfg)?;
    println!("library of {} statistics, λ = {lambda}", lib.len());
    println!("teacher mse {:.3e}", r.teacher_mse);
    println!("{}", r.expression);

    let terms = parse_expression(&r.expression)?;
    let fresh = DMatrix::from_fn(l, dx, |t, j| ((t + 3 * j) as f64 * 0.7).sin());
    let truth = 1.5 * lib.entries[a].eval(&fresh) - 0.25 * lib.entries[b].eval(&fresh);
    println!("fresh window: expression {:.6}, truth {truth:.6}", evaluate_terms(&terms, &fresh)?);
    Ok(())
}
