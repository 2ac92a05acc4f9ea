//! The pricing-PDE residual, the market-price-of-risk hinge and the
//! encoder/SDE consistency term on small hand-checkable inputs.
//!
//! `cargo run --release --example physics_losses`

use artemis::encoder::TimeEmbedding;
use artemis::numcore::Mlp1h;
use artemis::physics::{consistency_loss, fk_residual, mpr_loss, pde_loss, PricingNet};
use artemis::rng::{stream, Domain};
use artemis::sde::{AffineSde, DiffusionNet, DriftNet, NeuralSde};
use nalgebra::{DMatrix, DVector};

fn main() -> artemis::Result<()> {
    let dz = 2;
    let embed = TimeEmbedding::new(2);
    let mut rng = stream(5, Domain::Init, 0, 0);
    let drift = DriftNet::random(dz, embed.dim(), 8, &mut rng);
    let diffusion = DiffusionNet::random(dz, embed.dim(), 8, 0.2, &mut rng);
    let sde = NeuralSde { drift: &drift, diffusion: &diffusion, embed: &embed };

    // a constant value function prices nothing when r = 0
    let mut flat = PricingNet { net: Mlp1h::zeros(dz + 1, 4, 1) };
    flat.net.b2[0] = 3.0;
    let z = DVector::from_vec(vec![0.4, -0.7]);
    println!("constant V, r = 0:    residual {}", fk_residual(&flat, &sde, &z, 0.5, 0.0)?);
    println!("constant V, r = 0.05: residual {}", fk_residual(&flat, &sde, &z, 0.5, 0.05)?);

    let v = PricingNet::random(dz, 8, &mut rng);
    let coll: Vec<(DVector<f64>, f64)> =
        (0..16).map(|i| (DVector::from_vec(vec![0.1 * i as f64 - 0.8, 0.3]), i as f64 / 16.0)).collect();
    println!("random V: pde loss {:.5}", pde_loss(&v, &sde, &coll, 0.0)?);

    // μ = (3, 4), σ = I: ‖λ‖² = 25
    let unit = AffineSde::constant(DVector::from_vec(vec![3.0, 4.0]), 1.0);
    let at = [(DVector::zeros(2), 0.0)];
    for kappa in [1.0, 2.0, 5.0] {
        println!("mpr hinge, κ = {kappa}: {}", mpr_loss(&unit, &at, kappa)?);
    }

    let enc = DMatrix::from_fn(5, dz, |i, j| (i + j) as f64 * 0.1);
    let mut sim = enc.clone();
    sim[(3, 1)] += 0.5;
    println!("consistency, one state off by 0.5: {}", consistency_loss(&sim, &enc)?);
    Ok(())
}
