use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fit::{pretrain, Plateau};
use super::metrics::{evaluate, MetricsReport};
use super::model::{predict_dataset, Model, Standardizer};
use super::{AblationVariant, TrainConfig};
use crate::dslob::WindowedDataset;
use crate::error::{contract, Error, Result};
use crate::numcore::{AdamState, Mlp1h, ParamSet, Tape};
use crate::physics::PhysicsConfig;
use crate::rng::{stream, Domain};

/// Baseline that flattens the window into one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMlp {
    pub net: Mlp1h,
    pub norm: Standardizer,
}

impl ParamSet for FlatMlp {
    fn block_names(&self) -> Vec<String> {
        Mlp1h::BLOCK_NAMES.iter().map(|n| format!("flat.{n}")).collect()
    }

    fn blocks(&self) -> Vec<&DMatrix<f64>> {
        self.net.blocks().into()
    }

    fn blocks_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.net.blocks_mut().into()
    }
}

impl FlatMlp {
    pub fn new(train: &WindowedDataset, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Domain::Init, 1, 0);
        Ok(Self {
            net: Mlp1h::random(train.window_len * train.dx, hidden, 1, &mut rng),
            norm: Standardizer::fit(train)?,
        })
    }

    /// Standardized, flattened windows as rows.
    fn inputs(&self, ds: &WindowedDataset, idx: &[usize]) -> DMatrix<f64> {
        let width = ds.window_len * ds.dx;
        let mut out = DMatrix::zeros(idx.len(), width);
        for (r, &i) in idx.iter().enumerate() {
            let w = self.norm.window(ds.window_slice(i), ds.window_len);
            for t in 0..ds.window_len {
                for c in 0..ds.dx {
                    out[(r, t * ds.dx + c)] = w[(t, c)];
                }
            }
        }
        out
    }

    pub fn predict(&self, ds: &WindowedDataset) -> Result<Vec<f64>> {
        if ds.window_len * ds.dx != self.net.din() {
            return contract("dataset shape does not match the flat baseline");
        }
        let idx: Vec<usize> = (0..ds.len()).collect();
        let x = self.inputs(ds, &idx);
        let mut tape = Tape::new();
        let v = self.net.to_tape_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = v.forward(&mut tape, xv);
        Ok(tape.value(y).iter().map(|p| self.norm.y_from_std(*p)).collect())
    }

    fn batch_loss(&self, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<(f64, Vec<DMatrix<f64>>)> {
        let mut tape = Tape::new();
        let v = self.net.to_tape(&mut tape, 0);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let p = v.forward(&mut tape, xv);
        let e = tape.sub(p, yv);
        let sq = tape.square(e);
        let loss = tape.mean(sq);
        let adj = tape.backward(loss)?;
        let mut grads = self.zero_grads();
        tape.accumulate_param_grads(&adj, &mut grads);
        Ok((tape.scalar(loss), grads))
    }

    /// MSE training with the same epochs, batches, schedule and
    /// best-validation retention as the main model.
    pub fn fit(&mut self, train: &WindowedDataset, val: &WindowedDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
        let mut adam = AdamState::new(self, cfg.lr);
        let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
        let mut best = (f64::INFINITY, self.net.clone());
        let mut stale = 0;
        let mut vals = Vec::new();
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64, 0));
            for chunk in order.chunks(cfg.batch) {
                let x = self.inputs(train, chunk);
                let y = DMatrix::from_iterator(chunk.len(), 1, chunk.iter().map(|&i| self.norm.y_to_std(train.targets[i])));
                let (l, grads) = self.batch_loss(x, y)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("baseline loss".into()));
                }
                adam.update(self, &grads)?;
            }
            let pred = self.predict(val)?;
            let s = self.norm.y_std;
            let v = pred.iter().zip(&val.targets).map(|(p, y)| ((p - y) / s).powi(2)).sum::<f64>() / val.len() as f64;
            vals.push(v);
            if v < best.0 {
                best = (v, self.net.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            adam.lr = plateau.step(v, adam.lr);
            if stale >= cfg.patience {
                break;
            }
        }
        self.net = best.1;
        Ok(vals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rmse: f64,
    pub rank_ic: f64,
    pub dir_acc: f64,
    pub weighted_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub physics_evals: u64,
}

/// Per-seed runs and per-variant medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.label())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One training run of `variant`; returns test metrics and the physics
/// evaluation count.
pub fn run_variant(
    variant: AblationVariant,
    splits: [&WindowedDataset; 3],
    cfg: &TrainConfig,
    physics: &PhysicsConfig,
) -> Result<(MetricsReport, u64)> {
    let [train, val, test] = splits;
    let center = train.targets.iter().sum::<f64>() / train.len() as f64;
    let c = variant.apply(cfg);
    let (pred, evals) = if variant == AblationVariant::A6Mlp {
        let mut m = FlatMlp::new(train, c.hidden, c.seed)?;
        m.fit(train, val, &c)?;
        (m.predict(test)?, 0)
    } else {
        let mut model = Model::new(train, &c, variant.forward_mode(&c))?;
        let h = pretrain(&mut model, train, val, &c, physics)?;
        (predict_dataset(&model, test)?, h.physics_evals)
    };
    Ok((evaluate(&pred, &test.targets, None, center)?, evals))
}

/// Trains every variant for every seed with otherwise identical settings.
pub fn run_ablation(
    splits: [&WindowedDataset; 3],
    cfg: &TrainConfig,
    physics: &PhysicsConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return contract("ablation needs at least one variant and one seed");
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        for &v in variants {
            let t = std::time::Instant::now();
            let (metrics, physics_evals) = run_variant(v, splits, &c, physics)?;
            log::info!("{v} seed {seed}: {metrics:?} in {:.1}s", t.elapsed().as_secs_f64());
            runs.push(AblationRun { variant: v.label().into(), seed, metrics, physics_evals });
        }
    }
    let rows = variants
        .iter()
        .map(|v| {
            let mine: Vec<&MetricsReport> = runs.iter().filter(|r| r.variant == v.label()).map(|r| &r.metrics).collect();
            let col = |f: fn(&MetricsReport) -> f64| median(mine.iter().map(|m| f(m)).collect());
            AblationRow {
                variant: v.label().into(),
                rmse: col(|m| m.rmse),
                rank_ic: col(|m| m.rank_ic),
                dir_acc: col(|m| m.dir_acc),
                weighted_r2: col(|m| m.weighted_r2),
            }
        })
        .collect();
    Ok(AblationTable { seeds: seeds.to_vec(), rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::toy_dataset;

    fn cfg() -> TrainConfig {
        TrainConfig {
            dz: 2,
            hidden: 4,
            n_freq: 1,
            n_pairs: 1,
            n_real: 1,
            sde_steps: 3,
            batch: 8,
            epochs: 2,
            eval_paths: 1,
            ..TrainConfig::default()
        }
    }

    /// Same windows with time steps reordered by `perm`.
    fn permute_time(ds: &WindowedDataset, perm: &[usize]) -> WindowedDataset {
        let mut values = Vec::new();
        for i in 0..ds.len() {
            let w = ds.window_slice(i);
            for &t in perm {
                values.extend_from_slice(&w[t * ds.dx..(t + 1) * ds.dx]);
            }
        }
        WindowedDataset::new(ds.window_len, ds.dx, values, ds.targets.clone()).unwrap()
    }

    #[test]
    fn flat_baseline_ignores_time_order() {
        let (l, dx) = (5, 2);
        let train = toy_dataset(30, l, dx, 51);
        let val = toy_dataset(10, l, dx, 52);
        let test = toy_dataset(10, l, dx, 53);
        let perm = [3, 0, 4, 1, 2];
        let c = cfg();
        let mut a = FlatMlp::new(&train, 4, 7).unwrap();
        // the permuted model starts from the same function of the permuted input
        let mut b = a.clone();
        for (new_t, &old_t) in perm.iter().enumerate() {
            for ch in 0..dx {
                b.net.w1.set_column(new_t * dx + ch, &a.net.w1.column(old_t * dx + ch));
            }
        }
        a.fit(&train, &val, &c).unwrap();
        b.fit(&permute_time(&train, &perm), &permute_time(&val, &perm), &c).unwrap();
        let pa = a.predict(&test).unwrap();
        let pb = b.predict(&permute_time(&test, &perm)).unwrap();
        let center = train.targets.iter().sum::<f64>() / 30.0;
        let ma = evaluate(&pa, &test.targets, None, center).unwrap();
        let mb = evaluate(&pb, &test.targets, None, center).unwrap();
        assert!((ma.rmse - mb.rmse).abs() < 1e-9);
        assert!((ma.rank_ic - mb.rank_ic).abs() < 1e-9);
        assert_eq!(ma.dir_acc, mb.dir_acc);
    }

    #[test]
    fn table_has_every_variant_and_no_physics_in_a4() {
        let train = toy_dataset(24, 4, 2, 54);
        let val = toy_dataset(8, 4, 2, 55);
        let test = toy_dataset(8, 4, 2, 56);
        let t = run_ablation([&train, &val, &test], &cfg(), &PhysicsConfig::default(), &AblationVariant::ALL, &[1]).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["A0_Full", "A1_NoSDE", "A2_NoPDE", "A3_NoMPR", "A4_NoPhysics", "A5_NoConsistency", "A6_MLP"]);
        let evals = |v: &str| t.runs.iter().find(|r| r.variant == v).unwrap().physics_evals;
        assert_eq!(evals("A4_NoPhysics"), 0);
        assert_eq!(evals("A1_NoSDE"), 0);
        assert!(evals("A0_Full") > 0);
    }

    #[test]
    fn variant_flags() {
        let c = TrainConfig::default();
        let a4 = AblationVariant::A4NoPhysics.apply(&c);
        assert_eq!((a4.weights.lambda1, a4.weights.lambda2, a4.weights.lambda3), (0.0, 0.0, 0.1));
        let a5 = AblationVariant::A5NoConsistency.apply(&c);
        assert_eq!(a5.weights.lambda3, 0.0);
        assert_eq!("a3".parse::<AblationVariant>().unwrap(), AblationVariant::A3NoMpr);
        assert!("A9".parse::<AblationVariant>().is_err());
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
