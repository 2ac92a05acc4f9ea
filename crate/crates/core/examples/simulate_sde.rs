//! Euler–Maruyama on an Ornstein–Uhlenbeck process against its closed-form
//! moments, then one path of a randomly initialised neural SDE with its
//! market price of risk.
//!
//! `cargo run --release --example simulate_sde [paths]`

use artemis::encoder::TimeEmbedding;
use artemis::rng::{stream, Domain};
use artemis::sde::{euler_maruyama, market_price_of_risk, AffineSde, DiffusionNet, DriftNet, NeuralSde};
use nalgebra::DVector;

fn main() -> artemis::Result<()> {
    let paths: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let ou = AffineSde::ou(1, 1.0, 1.0);
    let z0 = DVector::zeros(1);
    let m = 256;
    let end: Vec<f64> = (0..paths)
        .map(|p| euler_maruyama(&ou, &z0, 0.0, 1.0, m, 7, p).map(|tr| tr.states[(m, 0)]))
        .collect::<artemis::Result<_>>()?;
    let mean = end.iter().sum::<f64>() / paths as f64;
    let var = end.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    println!("OU at T=1: mean {mean:+.4} (SE {:.4}), variance {var:.4} vs exact {exact:.4}", (var / paths as f64).sqrt());

    let (dz, hidden) = (3, 16);
    let embed = TimeEmbedding::new(2);
    let mut rng = stream(1, Domain::Init, 0, 0);
    let drift = DriftNet::random(dz, embed.dim(), hidden, &mut rng);
    let diffusion = DiffusionNet::random(dz, embed.dim(), hidden, 0.3, &mut rng);
    let sde = NeuralSde { drift: &drift, diffusion: &diffusion, embed: &embed };
    let tr = euler_maruyama(&sde, &DVector::from_vec(vec![0.5, -0.2, 0.1]), 1.0, 1.0, 10, 3, 0)?;
    println!("\nneural SDE path");
    for (j, t) in tr.grid.iter().enumerate() {
        let z = tr.states.row(j).transpose();
        let lam = market_price_of_risk(&sde, &z, *t);
        println!("t {t:.2}  z = [{:+.3} {:+.3} {:+.3}]  |λ| = {:.3}", z[0], z[1], z[2], lam.norm());
    }
    Ok(())
}
