//! One PASS/FAIL line per acceptance criterion.
//!
//! Runs as a plain binary (`harness = false`). Numeric arguments select
//! criteria, e.g. `cargo test --test acceptance -- 3 5`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use artemis::cli::{cmd_generate, cmd_train};
use artemis::conformal::{
    binomial_band, coverage_check, kelly_allocate, split_quantile, AllocationProblem, CalibrationSet, PredictionInterval,
};
use artemis::config::RunConfig;
use artemis::dslob::garch::{fit_garch11, simulate_garch, GarchParams};
use artemis::dslob::validate::{validate_synthetic, CORR_MAX_DIFF, KS_MIN_P, TAIL_MAX_REL};
use artemis::dslob::vasicek::{fit_vasicek_mle, simulate_vasicek, VasicekParams};
use artemis::dslob::{dataset_files, generate_dslob, WindowedDataset};
use artemis::encoder::TimeEmbedding;
use artemis::numcore::{grad_check, ParamSet};
use artemis::physics::{fk_residual, mpr_loss, pde_loss, PhysicsConfig, PricingNet};
use artemis::rng::{normals, stream, Domain};
use artemis::sde::{AffineSde, DiffusionNet, DriftNet, NeuralSde};
use artemis::symbolic::{
    build_library, distill_loss_grad, evaluate_terms, expression_from_coefficients, gumbel_noise, parse_expression,
    LibrarySpec, SymbolicHead,
};
use artemis::train::{composite_loss, distill_features, run_ablation, AblationVariant, Batch, ForwardMode, LossWeights, Model, TrainConfig};
use common::{dir_bytes, fixture, loglog_slope, mean_var, ou_terminal, simplex_grid_argmax, strong_errors, Gbm};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SEED: u64 = 2026;

/// Sub-checks of one criterion.
#[derive(Default)]
struct Report {
    notes: Vec<String>,
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failed.push(what);
        }
    }
}

fn gradients() -> Report {
    let mut rep = Report::default();
    let start = Instant::now();
    let (n, l, dx) = (4, 8, 3);
    let z = normals(SEED, Domain::Test, 1, 0, (n + l) * dx);
    let feats = DMatrix::from_fn(n + l, dx, |i, j| z[i * dx + j] + 0.1 * i as f64);
    let targets = (0..n).map(|s| 0.5 * feats[(s + l - 1, 0)] + 0.2).collect();
    let ds = WindowedDataset::from_series(&feats, l, targets).unwrap();
    let cfg = TrainConfig {
        dz: 4,
        sde_steps: 8,
        batch: 2,
        eval_paths: 1,
        ..TrainConfig::default()
    };
    let model = Model::new(&ds, &cfg, ForwardMode::Sde).unwrap();
    let batch = Batch::from_dataset(&model, &ds, &[0, 2]);
    let w = LossWeights { lambda1: 0.5, lambda2: 0.5, lambda3: 0.5, lambda4: 0.0 };
    let phys = PhysicsConfig { kappa: 0.1, n_coll: 8, ..PhysicsConfig::default() };
    let (parts, grads) = composite_loss(&model, &batch, &w, &phys, 3, 0).unwrap();
    rep.check(parts.pde > 0.0 && parts.mpr > 0.0 && parts.consistency > 0.0, "all loss terms active");
    let blocks: Vec<DMatrix<f64>> = model.params.blocks().into_iter().cloned().collect();
    let net = grad_check(
        &blocks,
        &grads,
        |b| {
            let mut m = model.clone();
            m.params.set_blocks(b).unwrap();
            composite_loss(&m, &batch, &w, &phys, 3, 0).unwrap().0.total
        },
        1e-6,
        1e-4,
        1e-6,
    );

    // the L1 symbolic term trains a separate head
    let lib = build_library(dx, l, &LibrarySpec { selection: true, ..LibrarySpec::default() }).unwrap();
    let windows: Vec<DMatrix<f64>> = (0..n).map(|i| ds.window(i)).collect();
    let f = lib.feature_matrix(&windows.iter().collect::<Vec<_>>()).unwrap();
    let mut rng = stream(SEED, Domain::Test, 2, 0);
    let mut head = SymbolicHead::new(&lib, 0.01);
    head.tau = 0.7;
    head.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    head.logits.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let teacher: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = gumbel_noise(SEED, 0, lib.len());
    let (_, sg) = distill_loss_grad(&head, &lib, &f, &teacher, &g).unwrap();
    let sym = grad_check(
        &[head.weights.clone(), head.logits.clone()],
        &sg,
        |b| {
            let h = SymbolicHead { weights: b[0].clone(), logits: b[1].clone(), ..head.clone() };
            distill_loss_grad(&h, &lib, &f, &teacher, &g).unwrap().0
        },
        1e-6,
        1e-4,
        1e-6,
    );
    let (passed, checked) = (net.passed + sym.passed, net.checked + sym.checked);
    let frac = passed as f64 / checked as f64;
    rep.check(frac >= 0.99, format!("{passed}/{checked} entries at rel err < 1e-4 ({:.2}%)", 100.0 * frac));
    let secs = start.elapsed().as_secs_f64();
    rep.check(secs < 120.0, format!("{secs:.1}s"));
    rep
}

fn sde_oracle() -> Report {
    let mut rep = Report::default();
    let x = ou_terminal(1.0, 1.0, 256, 20_000, SEED);
    let (m, v) = mean_var(&x);
    let se = (v / x.len() as f64).sqrt();
    rep.check(m.abs() < 3.0 * se, format!("mean {m:.4} (3 SE = {:.4})", 3.0 * se));
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    rep.check((v / exact - 1.0).abs() < 0.05, format!("variance {v:.4} vs {exact:.4}"));
    let coarse = [8, 16, 32, 64];
    let ou = AffineSde::ou(1, 1.0, 1.0);
    let slope = loglog_slope(&coarse, 1.0, &strong_errors(&ou, &DVector::zeros(1), 1.0, &coarse, 1024, 400, SEED));
    rep.check((0.35..=0.65).contains(&slope), format!("OU strong exponent {slope:.3} (band [0.35, 0.65])"));
    let gbm = Gbm { mu: 0.5, sigma: 1.0 };
    let gslope = loglog_slope(&coarse, 1.0, &strong_errors(&gbm, &DVector::from_element(1, 1.0), 1.0, &coarse, 1024, 400, SEED));
    rep.notes.push(format!("multiplicative-noise reference exponent {gslope:.3}"));
    rep
}

fn physics() -> Report {
    let mut rep = Report::default();
    let mut rng = stream(SEED, Domain::Test, 3, 0);
    let embed = TimeEmbedding::new(2);
    let drift = DriftNet::random(3, embed.dim(), 5, &mut rng);
    let diffusion = DiffusionNet::random(3, embed.dim(), 5, 0.5, &mut rng);
    let sde = NeuralSde { drift: &drift, diffusion: &diffusion, embed: &embed };
    let mut v = PricingNet::random(3, 6, &mut rng);
    v.net.w2.fill(0.0);
    v.net.b2.fill(1.7);
    let worst = (0..50)
        .map(|_| {
            let z = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            fk_residual(&v, &sde, &z, rng.random_range(0.0..2.0), 0.0).unwrap().abs()
        })
        .fold(0.0, f64::max);
    rep.check(worst == 0.0, format!("constant V residual max {worst:e}"));

    let unit = AffineSde::constant(DVector::from_vec(vec![3.0, 4.0]), 1.0);
    let m = mpr_loss(&unit, &[(DVector::zeros(2), 0.0)], 2.0).unwrap();
    rep.check(m == 21.0, format!("mpr fixture {m}"));

    let mut negative = 0;
    for _ in 0..10_000 {
        let dz = rng.random_range(2..=4);
        let hidden = rng.random_range(2..=6);
        let e = TimeEmbedding::new(rng.random_range(1..=2));
        let d = DriftNet::random(dz, e.dim(), hidden, &mut rng);
        let s = DiffusionNet::random(dz, e.dim(), hidden, rng.random_range(0.05..1.0), &mut rng);
        let val = PricingNet::random(dz, hidden, &mut rng);
        let sde = NeuralSde { drift: &d, diffusion: &s, embed: &e };
        let pts: Vec<(DVector<f64>, f64)> = (0..3)
            .map(|_| (DVector::from_fn(dz, |_, _| rng.random_range(-3.0..3.0)), rng.random_range(0.0..2.0)))
            .collect();
        let p = pde_loss(&val, &sde, &pts, rng.random_range(0.0..0.1)).unwrap();
        let q = mpr_loss(&sde, &pts, rng.random_range(0.01..3.0)).unwrap();
        if !(p >= 0.0 && q >= 0.0) {
            negative += 1;
        }
    }
    rep.check(negative == 0, format!("{negative}/10000 random fixtures negative"));
    rep
}

fn coverage() -> Report {
    let mut rep = Report::default();
    for (k, alpha) in [0.05, 0.1, 0.2].into_iter().enumerate() {
        // y = x + ε with ε iid, predictor ŷ = x: scores are exchangeable
        let draw = |part: u64, n: usize| {
            let x = normals(SEED, Domain::Test, 40 + k as u64, part, n);
            let e = normals(SEED, Domain::Test, 50 + k as u64, part, n);
            let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + 0.5 * b).collect();
            (x, y)
        };
        let (xc, yc) = draw(0, 200);
        let (xt, yt) = draw(1, 1000);
        let cal = CalibrationSet::from_predictions(&yc, &xc).unwrap();
        let q = split_quantile(&cal, alpha).unwrap();
        let iv: Vec<PredictionInterval> = xt.iter().map(|&c| PredictionInterval { center: c, half_width: q, alpha }).collect();
        let cov = coverage_check(&iv, &yt).unwrap();
        let (lo, hi) = binomial_band(1000, 1.0 - alpha, 0.99).unwrap();
        rep.check(cov >= lo, format!("alpha {alpha}: coverage {cov:.3}, band [{lo:.3}, {hi:.3}]"));
    }
    let q = split_quantile(&CalibrationSet::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 0.25).unwrap();
    rep.check(q == 4.0, format!("{{1,2,3,4}} at 0.25 gives {q}"));
    rep
}

fn kelly() -> Report {
    let mut rep = Report::default();
    let mut r = csv::Reader::from_path(fixture("assets3.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        r.records().map(|rec| rec.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    let mu: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let half: Vec<f64> = rows.iter().map(|r| (r[2] - r[1]) / 2.0).collect();
    let p = AllocationProblem::from_intervals(mu, &half, 5.0).unwrap();
    let w = kelly_allocate(&p).unwrap();
    let grid = simplex_grid_argmax(|g| p.objective(g), 1000);
    let dev = w.iter().zip(&grid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    rep.check(dev <= 2e-3, format!("weights {w:.4?}, grid {grid:.3?}, max dev {dev:.1e}"));
    let sum_err = (w.iter().sum::<f64>() - 1.0).abs();
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    rep.check(sum_err <= 1e-10 && min >= -1e-10, format!("|Σw − 1| = {sum_err:.1e}, min w = {min:.1e}"));
    rep
}

fn dslob() -> Report {
    let mut rep = Report::default();
    let truth = VasicekParams { theta: 5.0, mu: 0.5, sigma: 1.0 };
    let path = simulate_vasicek(&truth, false, 0.0, 200_000, 0.01, SEED).unwrap();
    let fit = fit_vasicek_mle(&path, 0.01).unwrap().params;
    let rel = [(fit.theta, truth.theta), (fit.mu, truth.mu), (fit.sigma, truth.sigma)].map(|(a, b)| (a / b - 1.0).abs());
    rep.check(rel.iter().all(|r| *r < 0.10), format!("Vasicek rel errors θ {:.3} μ {:.3} σ {:.3}", rel[0], rel[1], rel[2]));

    let g = GarchParams { omega: 1e-6, alpha: 0.1, beta: 0.85 };
    let eps = normals(SEED, Domain::Test, 60, 0, 20_000);
    let r = simulate_garch(&g, g.unconditional_variance().unwrap(), &eps).unwrap().returns;
    let gp = fit_garch11(&r).unwrap().params;
    rep.check((gp.persistence() - 0.95).abs() < 0.05, format!("GARCH α̂+β̂ {:.4} vs 0.95", gp.persistence()));

    let mut exact = true;
    for (theta, mu, beta) in [(0.3, -1.7, 0.5), (2.0, 100.0, 0.8), (7.5, 0.01, 0.9), (1.0, 3.0, 0.95)] {
        let v = VasicekParams { theta, mu, sigma: 0.4 }.amplified();
        exact &= v.theta == theta * 1.5 && v.mu == mu * 1.2 && v.sigma == 0.4;
        let a = GarchParams { omega: 2e-6, alpha: 0.07, beta }.amplified();
        exact &= a.alpha == 0.07 * 1.2 && a.beta == (1.1 * beta).min(0.95) && a.omega == 2e-6;
    }
    rep.check(exact, "amplification θ×1.5, μ×1.2, α×1.2, β′ = min(0.95, 1.1β)");

    let thresholds = KS_MIN_P == 0.05 && CORR_MAX_DIFF == 0.03 && TAIL_MAX_REL == 0.05;
    let base = DMatrix::from_fn(r.len(), 2, |i, j| if j == 1 { r[i] } else { eps[i] + r[i] * 100.0 });
    let same = validate_synthetic(&base, &base, 1).unwrap();
    let mut scaled = base.clone();
    scaled.column_mut(1).scale_mut(1.5);
    let wide = validate_synthetic(&scaled, &base, 1).unwrap();
    rep.check(
        thresholds && same.pass && !wide.tail_pass && !wide.ks_pass,
        format!("gates KS p > {KS_MIN_P}, |Δcorr| < {CORR_MAX_DIFF}, tail within {TAIL_MAX_REL}"),
    );

    let cfg = RunConfig::load(Some(&common::toy_config()), &[]).unwrap();
    let a = dataset_files(&generate_dslob(&cfg.dslob).unwrap()).unwrap();
    let b = dataset_files(&generate_dslob(&cfg.dslob).unwrap()).unwrap();
    rep.check(a == b, "regeneration byte-identical");
    rep
}

fn ablation() -> Report {
    let mut rep = Report::default();
    let start = Instant::now();
    let cfg = RunConfig::default();
    let ds = generate_dslob(&cfg.dslob).unwrap();
    let total = ds.train.len() + ds.val.len() + ds.test.len();
    let table = run_ablation([&ds.train, &ds.val, &ds.test], &cfg.train, &cfg.physics, &AblationVariant::ALL, &cfg.ablation.seeds)
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let row = |v| table.row(v).unwrap();
    let a0 = row(AblationVariant::A0Full).dir_acc;
    let a4 = row(AblationVariant::A4NoPhysics).dir_acc;
    let a6 = row(AblationVariant::A6Mlp);
    rep.notes.push(format!("{total} windows, {} seeds, E = {}", table.seeds.len(), cfg.train.epochs));
    for r in &table.rows {
        rep.notes.push(format!("{} DirAcc {:.4} RMSE {:.4}", r.variant, r.dir_acc, r.rmse));
    }
    rep.check(a0 > a4, format!("A0 DirAcc {a0:.4} > A4 {a4:.4}"));
    rep.check(a0 > a6.dir_acc, format!("A0 DirAcc {a0:.4} > A6 {:.4}", a6.dir_acc));
    let worst = table.rows.iter().all(|r| r.rmse <= a6.rmse);
    rep.check(worst, format!("A6 RMSE {:.4} is the worst", a6.rmse));
    rep.check(secs < 1800.0, format!("{secs:.0}s"));
    rep
}

fn symbolic() -> Report {
    let mut rep = Report::default();
    let (n, l, dx) = (200, 12, 2);
    let z = normals(SEED, Domain::Test, 70, 0, (n + l) * dx);
    let feats = DMatrix::from_fn(n + l, dx, |i, j| z[i * dx + j] + 0.1 * i as f64);
    let ds = WindowedDataset::from_series(&feats, l, vec![0.0; n]).unwrap();
    let lib = build_library(dx, l, &LibrarySpec::default()).unwrap();
    let windows: Vec<DMatrix<f64>> = (0..ds.len()).map(|i| ds.window(i)).collect();
    let f = lib.feature_matrix(&windows.iter().collect::<Vec<_>>()).unwrap();
    let k = lib.entries.iter().position(|b| b.to_string() == "ma(ch=1,w=5)").unwrap();
    let teacher: Vec<f64> = (0..f.nrows()).map(|i| f[(i, k)]).collect();
    let mut cfg = TrainConfig { distill_epochs: 300, batch: 50, distill_lr: 0.02, ..TrainConfig::default() };
    cfg.weights.lambda4 = 0.0;
    let r = distill_features(&lib, &f, &teacher, &cfg).unwrap();
    rep.check(r.teacher_mse < 1e-6, format!("teacher MSE {:.2e}", r.teacher_mse));

    let terms = parse_expression(&r.expression).unwrap();
    let mut coef = DVector::zeros(r.library.len());
    for (w, b) in &terms {
        coef[r.library.entries.iter().position(|e| e == b).unwrap()] = *w;
    }
    let again = expression_from_coefficients(&coef, &r.library, 0.0);
    let max_dev = windows
        .iter()
        .zip(&teacher)
        .map(|(w, t)| (evaluate_terms(&terms, w).unwrap() - t).abs())
        .fold(0.0, f64::max);
    rep.check(again == r.expression && max_dev < 1e-3, format!("`{}` round-trips, max |Δ| {max_dev:.1e}", r.expression));
    rep
}

fn determinism() -> Report {
    let mut rep = Report::default();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Some(&common::toy_config()), &[]).unwrap();
    // same paths every time: config.txt records the data directory
    let data = tmp.path().join("data");
    let out = tmp.path().join("train");
    let run = |threads: usize| {
        let _ = std::fs::remove_dir_all(&data);
        let _ = std::fs::remove_dir_all(&out);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            cmd_generate(&cfg, &data, None).unwrap();
            cmd_train(&cfg, &data, &out).unwrap();
        });
        (dir_bytes(&data), dir_bytes(&out))
    };
    let a = run(1);
    let b = run(4);
    let c = run(4);
    rep.check(a.0 == b.0 && b.0 == c.0, format!("generate: {} files identical over 1/4/4 threads", a.0.len()));
    rep.check(a.1 == b.1 && b.1 == c.1, format!("train: {} files identical over 1/4/4 threads", a.1.len()));
    rep
}

fn main() {
    env_filter();
    let criteria: [(&str, fn() -> Report); 9] = [
        ("gradient suite", gradients),
        ("SDE oracle", sde_oracle),
        ("physics sanity", physics),
        ("conformal coverage", coverage),
        ("Kelly allocation", kelly),
        ("DSLOB generator", dslob),
        ("ablation ordering", ablation),
        ("symbolic recoverability", symbolic),
        ("determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let line = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(rep) if rep.failed.is_empty() => format!("PASS  {id}. {name}: {}", rep.notes.join("; ")),
            Ok(rep) => {
                failures += 1;
                format!("FAIL  {id}. {name}: {} [ok: {}]", rep.failed.join("; "), rep.notes.join("; "))
            }
            Err(_) => {
                failures += 1;
                format!("FAIL  {id}. {name}: panicked")
            }
        };
        println!("{line} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    println!("acceptance: {failures} criteria failed");
    if failures > 0 {
        std::process::exit(1);
    }
}

/// Keeps library logging quiet unless asked for.
fn env_filter() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).try_init();
}
