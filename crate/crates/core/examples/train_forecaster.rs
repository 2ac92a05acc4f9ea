//! Generates the default synthetic order-book dataset, pretrains the
//! forecaster, distills a symbolic expression and reports test metrics.
//!
//! `cargo run --release --example train_forecaster [epochs] [lambda4] [norefit]`

use artemis::dslob::{generate_dslob, SyntheticDatasetSpec};
use artemis::physics::PhysicsConfig;
use artemis::train::{distill, evaluate, predict_dataset, pretrain, ForwardMode, Model, TrainConfig};

fn main() -> artemis::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let ds = generate_dslob(&SyntheticDatasetSpec::default())?;
    let mut cfg = TrainConfig { epochs, ..TrainConfig::default() };
    if let Some(l4) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        cfg.weights.lambda4 = l4;
    }
    cfg.refit = std::env::args().nth(3).as_deref() != Some("norefit");
    let physics = PhysicsConfig::default();

    let t = std::time::Instant::now();
    let mut model = Model::new(&ds.train, &cfg, ForwardMode::Sde)?;
    let hist = pretrain(&mut model, &ds.train, &ds.val, &cfg, &physics)?;
    println!("pretrained {} epochs in {:.1}s, best epoch {}", hist.epochs.len(), t.elapsed().as_secs_f64(), hist.best_epoch);
    for r in &hist.epochs {
        println!(
            "  epoch {:2}  forecast {:.4}  pde {:.4}  mpr {:.4}  consist {:.4}  val {:.4}  lr {:.1e}",
            r.epoch, r.forecast, r.pde, r.mpr, r.consistency, r.val_forecast, r.lr
        );
    }

    let pred = predict_dataset(&model, &ds.test)?;
    let center = ds.train.targets.iter().sum::<f64>() / ds.train.len() as f64;
    let m = evaluate(&pred, &ds.test.targets, None, center)?;
    println!("test: rmse {:.4}  rank_ic {:.4}  dir_acc {:.4}  wR2 {:.4}", m.rmse, m.rank_ic, m.dir_acc, m.weighted_r2);

    let t = std::time::Instant::now();
    let d = distill(&model, &ds.train, &cfg)?;
    let terms = d.coefficients.iter().filter(|c| **c != 0.0).count();
    println!("distilled {terms} terms in {:.1}s, teacher mse {:.3e}", t.elapsed().as_secs_f64(), d.teacher_mse);
    println!("{}", &d.expression[..d.expression.len().min(300)]);
    Ok(())
}
