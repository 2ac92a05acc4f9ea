//! Encodes an irregularly observed two-channel window into a latent path
//! with a sum-of-exponentials kernel, and shows how a missing observation
//! changes the path.
//!
//! `cargo run --release --example encode_window`

use artemis::encoder::{encode, uniform_grid, LaplaceKernel, ObservationWindow, TimeEmbedding};
use artemis::numcore::Mlp1h;
use nalgebra::DMatrix;

fn main() -> artemis::Result<()> {
    let (dz, dx) = (3, 2);
    // one damped oscillation (poles -2 ± 6i) and one pure decay (pole -1)
    let mut kernel = LaplaceKernel::with_poles(dz, dx, &[(-2.0, 6.0)], &[-1.0])?;
    for i in 0..dz {
        kernel.set_pair_residue(0, i, 0, 1.0, 0.0);
        kernel.set_real_residue(0, i, 1, 0.5 * (i + 1) as f64);
    }
    for t in [0.0, 0.25, 0.5, 1.0] {
        let k = kernel.eval(t);
        println!("kernel({t:.2})[0, :] = {:.4} {:.4}", k[(0, 0)], k[(0, 1)]);
    }

    let n = 12;
    let times: Vec<f64> = (1..=n).map(|i| (i as f64 / n as f64).powf(1.3)).collect();
    let values = DMatrix::from_fn(n, dx, |i, j| if j == 0 { (6.0 * times[i]).sin() } else { times[i] });
    let embed = TimeEmbedding::new(2);
    let bias = Mlp1h::zeros(embed.dim(), 4, dz);
    let grid = uniform_grid(0.0, 1.5, 7);

    let full = ObservationWindow::new(times.clone(), values.clone(), DMatrix::from_element(n, dx, 1.0), 1.0)?;
    let path = encode(&kernel, &embed, &bias, &full, &grid)?;
    let mut mask = DMatrix::from_element(n, dx, 1.0);
    mask[(5, 0)] = 0.0;
    let gappy = ObservationWindow::new(times, values, mask, 1.0)?;
    let gap = encode(&kernel, &embed, &bias, &gappy, &grid)?;

    println!("\n    t   z_0(full)  z_0(gap)   z_2(full)");
    for (j, t) in grid.iter().enumerate() {
        println!("{t:5.2}  {:9.4}  {:9.4}  {:9.4}", path.values[(j, 0)], gap.values[(j, 0)], path.values[(j, 2)]);
    }
    Ok(())
}
