//! Split and rolling conformal intervals on synthetic forecasts, then a
//! Kelly allocation over three assets whose risk comes from interval widths.
//!
//! `cargo run --release --example conformal_allocation [alpha]`

use artemis::conformal::{
    adaptive_quantile, binomial_band, coverage_check, kelly_allocate, split_quantile, AllocationProblem,
    CalibrationSet, PredictionInterval,
};
use artemis::rng::{normals, Domain};

fn main() -> artemis::Result<()> {
    let alpha: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    // y = ŷ + ε with heavier noise in the second half of the test stream
    let cal_eps = normals(3, Domain::Test, 0, 0, 200);
    let test_eps = normals(3, Domain::Test, 1, 0, 1000);
    let cal = CalibrationSet::new(cal_eps.iter().map(|e| e.abs()).collect())?;
    let q = split_quantile(&cal, alpha)?;
    let y: Vec<f64> = test_eps.iter().enumerate().map(|(i, e)| if i < 500 { *e } else { 2.0 * e }).collect();
    let split: Vec<PredictionInterval> = (0..1000).map(|_| PredictionInterval { center: 0.0, half_width: q, alpha }).collect();
    let (lo, hi) = binomial_band(500, 1.0 - alpha, 0.99)?;
    println!("q = {q:.4}; 99% band for 500 points [{lo:.3}, {hi:.3}]");
    println!("split coverage: first half {:.3}, second half {:.3}", coverage_check(&split[..500], &y[..500])?, coverage_check(&split[500..], &y[500..])?);

    // rolling quantile: the width for point i uses residuals up to i − 1
    let stream: Vec<f64> = cal.residuals().iter().copied().chain(y.iter().map(|v| v.abs())).collect();
    let qs = adaptive_quantile(&stream, 250, alpha)?;
    let rolling: Vec<PredictionInterval> =
        (0..1000).map(|i| PredictionInterval { center: 0.0, half_width: qs[199 + i], alpha }).collect();
    println!("rolling coverage: first half {:.3}, second half {:.3}", coverage_check(&rolling[..500], &y[..500])?, coverage_check(&rolling[500..], &y[500..])?);

    let p = AllocationProblem::from_intervals(vec![0.10, 0.05, 0.02], &[0.2, 0.1, 0.1], 5.0)?;
    let w = kelly_allocate(&p)?;
    println!("\nkelly weights {:.4} {:.4} {:.4}, objective {:.5}", w[0], w[1], w[2], p.objective(&w));
    Ok(())
}
