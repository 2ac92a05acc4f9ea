//! Trains every ablation variant on a small synthetic dataset and prints
//! the median metrics across seeds.
//!
//! `cargo run --release --example ablation_study [n_steps] [epochs] [seeds]`

use artemis::dslob::{generate_dslob, SyntheticDatasetSpec};
use artemis::physics::PhysicsConfig;
use artemis::train::{run_ablation, AblationVariant, TrainConfig};

fn main() -> artemis::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let spec = SyntheticDatasetSpec { n_steps: arg(1, 1200), ..SyntheticDatasetSpec::default() };
    let ds = generate_dslob(&spec)?;
    let cfg = TrainConfig { epochs: arg(2, 3), dz: 4, hidden: 16, sde_steps: 10, ..TrainConfig::default() };
    let seeds: Vec<u64> = (0..arg(3, 2) as u64).collect();
    let t = std::time::Instant::now();
    let table = run_ablation([&ds.train, &ds.val, &ds.test], &cfg, &PhysicsConfig::default(), &AblationVariant::ALL, &seeds)?;
    println!("{} train windows, {} seeds, {:.1}s", ds.train.len(), seeds.len(), t.elapsed().as_secs_f64());
    println!("{:18} {:>8} {:>8} {:>8} {:>8}", "variant", "rmse", "rank_ic", "dir_acc", "wR2");
    for r in &table.rows {
        println!("{:18} {:8.4} {:8.4} {:8.4} {:8.4}", r.variant, r.rmse, r.rank_ic, r.dir_acc, r.weighted_r2);
    }
    for r in table.runs.iter().filter(|r| r.seed == 0) {
        println!("{:18} physics evaluations {}", r.variant, r.physics_evals);
    }
    Ok(())
}
