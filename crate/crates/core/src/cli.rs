//! Experiment commands. Each one reads a [`RunConfig`], writes its outputs
//! plus a `config.txt` echo into an output directory and reports a
//! [`Status`]; the binary maps that to the process exit code.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::conformal::{
    coverage_check, kelly_allocate, split_quantile, AllocationProblem, CalibrationSet, PredictionInterval,
    RollingQuantile,
};
use crate::dslob::{
    dataset_files, generate_dslob, generate_from_seed, read_dataset_dir, read_seed_csv, write_dataset_dir,
    SyntheticDatasetSpec, ValidationReport, WindowedDataset,
};
use crate::error::{Error, Result};
use crate::train::{
    distill, evaluate, predict_dataset, pretrain, read_checkpoint, run_ablation, write_checkpoint, AblationTable,
    ForwardMode, MetricsReport, Model,
};

/// A failed command together with the stage it failed in.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError { stage, source: e.into() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    /// Outputs were written but a statistical check failed.
    SoftFail(String),
}

impl Status {
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::SoftFail(_) => 2,
        }
    }
}

/// Hard errors exit with 1.
pub const EXIT_ERROR: i32 = 1;

fn write_echo(cfg: &RunConfig, dir: &Path, header: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (k, v) in header {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push_str(&cfg.echo());
    std::fs::write(dir.join("config.txt"), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gate_summary(v: &ValidationReport) -> String {
    let mut failed = Vec::new();
    for (name, pass) in [("ks", v.ks_pass), ("acf", v.acf_pass), ("corr", v.corr_pass), ("tail", v.tail_pass)] {
        if !pass {
            failed.push(name);
        }
    }
    format!("validation gates failed: {}", failed.join(", "))
}

/// Generates a dataset directory. A failed validation gate still writes the
/// dataset and returns [`Status::SoftFail`].
pub fn cmd_generate(cfg: &RunConfig, out: &Path, seed_csv: Option<&Path>) -> CliResult<Status> {
    let ds = match seed_csv {
        Some(p) => {
            let seed = read_seed_csv(p).stage("read seed")?;
            generate_from_seed(&cfg.dslob, &seed, &p.display().to_string()).stage("generate")?
        }
        None => generate_dslob(&cfg.dslob).stage("generate")?,
    };
    write_dataset_dir(out, &ds).stage("write dataset")?;
    write_echo(cfg, out, &[("command", "generate".into())]).stage("write dataset")?;
    let v = &ds.manifest.validation;
    for s in &ds.manifest.splits {
        log::info!("{}: {} windows", s.name, s.windows);
    }
    log::info!(
        "KS p {:.3e}, ACF dev {:.4} (band {:.4}), |Δcorr| {:.4}, tail err {:.4}",
        v.ks_p,
        v.acf_max_dev,
        v.acf_band,
        v.corr_mean_absdiff,
        v.tail_rel_err
    );
    Ok(if v.pass { Status::Ok } else { Status::SoftFail(gate_summary(v)) })
}

/// Regenerates a dataset from its manifest, requires byte identity, and
/// reports the validation gates.
pub fn cmd_validate(data: &Path) -> CliResult<(Status, ValidationReport)> {
    let dir = read_dataset_dir(data).stage("read dataset")?;
    let manifest = dir.manifest.ok_or_else(|| Error::Format("dataset has no manifest.json".into())).stage("read dataset")?;
    let spec: SyntheticDatasetSpec =
        serde_json::from_value(manifest["spec"].clone()).stage("read dataset")?;
    let source = manifest["seed_source"].as_str().unwrap_or("builtin").to_string();
    let ds = if source == "builtin" {
        generate_dslob(&spec).stage("regenerate")?
    } else {
        let seed = read_seed_csv(Path::new(&source)).stage("read seed")?;
        generate_from_seed(&spec, &seed, &source).stage("regenerate")?
    };
    let mut mismatched = Vec::new();
    for (name, bytes) in dataset_files(&ds).stage("regenerate")? {
        let on_disk = std::fs::read(data.join(name)).stage("read dataset")?;
        if on_disk != bytes {
            mismatched.push(name.to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError {
            stage: "compare",
            source: Error::Format(format!("regenerated files differ: {}", mismatched.join(", "))),
        });
    }
    let v = ds.manifest.validation;
    let status = if v.pass { Status::Ok } else { Status::SoftFail(gate_summary(&v)) };
    Ok((status, v))
}

/// `calibration.json`: split-conformal state computed on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub alpha: f64,
    /// `None` when the rank exceeds the calibration size (infinite width).
    pub q: Option<f64>,
    pub n: usize,
    /// Sorted absolute residuals.
    pub residuals: Vec<f64>,
    /// The same residuals in time order, for the rolling quantile.
    pub sequence: Vec<f64>,
}

impl CalibrationFile {
    pub fn build(y: &[f64], y_hat: &[f64], alpha: f64) -> Result<Self> {
        let cal = CalibrationSet::from_predictions(y, y_hat)?;
        let q = split_quantile(&cal, alpha)?;
        Ok(Self {
            alpha,
            q: q.is_finite().then_some(q),
            n: cal.len(),
            residuals: cal.residuals().to_vec(),
            sequence: y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("calibration file {}: {e}", path.display()))))?;
        let c: Self = serde_json::from_str(&text)?;
        if c.residuals.len() != c.n || c.sequence.len() != c.n {
            return Err(Error::Format("calibration file counts disagree".into()));
        }
        Ok(c)
    }

    pub fn set(&self) -> Result<CalibrationSet> {
        CalibrationSet::new(self.residuals.clone())
    }
}

/// `metrics.json` written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub test: MetricsReport,
    pub val: MetricsReport,
    pub best_epoch: usize,
    pub best_val_forecast: f64,
    pub epochs_run: usize,
    pub physics_evals: u64,
    pub expression_terms: usize,
    pub distill_teacher_mse: f64,
    pub alpha: f64,
    /// Split-conformal coverage on the test split.
    pub test_coverage: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn intervals(y_hat: &[f64], q: f64, alpha: f64) -> Vec<PredictionInterval> {
    y_hat.iter().map(|&c| PredictionInterval { center: c, half_width: q, alpha }).collect()
}

/// Pretrain, distill, calibrate on the validation split and evaluate on test.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<TrainMetrics> {
    let dir = read_dataset_dir(data).stage("read dataset")?;
    std::fs::create_dir_all(out).stage("write outputs")?;
    write_echo(cfg, out, &[("command", "train".into()), ("data", data.display().to_string())]).stage("write outputs")?;

    let tc = &cfg.train;
    let mut model = Model::new(&dir.train, tc, ForwardMode::Sde).stage("initialize")?;
    let hist = pretrain(&mut model, &dir.train, &dir.val, tc, &cfg.physics).stage("pretrain")?;
    write_checkpoint(&model, &out.join("checkpoint.artp")).stage("write outputs")?;
    hist.write_csv(&out.join("history.csv")).stage("write outputs")?;

    let d = distill(&model, &dir.train, tc).stage("distill")?;
    std::fs::write(out.join("expression.txt"), format!("{}\n", d.expression)).stage("write outputs")?;

    let alpha = cfg.conformal.alpha;
    let val_pred = predict_dataset(&model, &dir.val).stage("calibrate")?;
    let cal = CalibrationFile::build(&dir.val.targets, &val_pred, alpha).stage("calibrate")?;
    write_json(&out.join("calibration.json"), &cal).stage("write outputs")?;

    let center = mean(&dir.train.targets);
    let test_pred = predict_dataset(&model, &dir.test).stage("evaluate")?;
    let q = cal.q.unwrap_or(f64::INFINITY);
    let metrics = TrainMetrics {
        test: evaluate(&test_pred, &dir.test.targets, None, center).stage("evaluate")?,
        val: evaluate(&val_pred, &dir.val.targets, None, center).stage("evaluate")?,
        best_epoch: hist.best_epoch,
        best_val_forecast: hist.best_val,
        epochs_run: hist.epochs.len(),
        physics_evals: hist.physics_evals,
        expression_terms: d.coefficients.iter().filter(|c| c.abs() >= tc.expr_threshold).count(),
        distill_teacher_mse: d.teacher_mse,
        alpha,
        test_coverage: coverage_check(&intervals(&test_pred, q, alpha), &dir.test.targets).stage("evaluate")?,
    };
    write_json(&out.join("metrics.json"), &metrics).stage("write outputs")?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    /// Rolling window; `None` uses the fixed split-conformal width.
    pub adaptive: Option<usize>,
    /// Defaults to `calibration.json` next to the checkpoint.
    pub calibration: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub y_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub target: f64,
}

/// Point predictions with conformal intervals at `cfg.conformal.alpha`.
/// The adaptive mode starts from the last `W` calibration residuals and
/// pushes each realized residual after its row is emitted.
pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> CliResult<Vec<PredictionRow>> {
    let cal_path = args
        .calibration
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("calibration.json"));
    let cal = CalibrationFile::read(&cal_path).stage("read calibration")?;
    let model = read_checkpoint(&args.checkpoint).stage("read checkpoint")?;
    let dir = read_dataset_dir(&args.data).stage("read dataset")?;
    let ds: &WindowedDataset = match args.split {
        Split::Train => &dir.train,
        Split::Val => &dir.val,
        Split::Test => &dir.test,
    };
    if (ds.window_len, ds.dx) != (model.spec.window_len, model.norm.x_mean.len()) {
        return Err(Error::Format("dataset windows do not match the checkpoint".into())).stage("read dataset");
    }
    let alpha = cfg.conformal.alpha;
    let y_hat = predict_dataset(&model, ds).stage("predict")?;

    let mut rows = Vec::with_capacity(ds.len());
    match args.adaptive {
        None => {
            let q = split_quantile(&cal.set().stage("calibrate")?, alpha).stage("calibrate")?;
            for (i, (&p, &y)) in y_hat.iter().zip(&ds.targets).enumerate() {
                rows.push(PredictionRow { index: i, y_hat: p, lo: p - q, hi: p + q, target: y });
            }
        }
        Some(w) => {
            let mut rq = RollingQuantile::new(w, alpha).stage("calibrate")?;
            let start = cal.sequence.len().saturating_sub(w);
            for &r in &cal.sequence[start..] {
                rq.push(r).stage("calibrate")?;
            }
            for (i, (&p, &y)) in y_hat.iter().zip(&ds.targets).enumerate() {
                let q = rq.quantile();
                rows.push(PredictionRow { index: i, y_hat: p, lo: p - q, hi: p + q, target: y });
                rq.push((y - p).abs()).stage("predict")?;
            }
        }
    }

    let header = [
        ("command", "predict".to_string()),
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.display().to_string()),
        ("split", format!("{:?}", args.split).to_lowercase()),
        ("adaptive", args.adaptive.map_or("off".into(), |w| w.to_string())),
    ];
    write_echo(cfg, &args.out, &header).stage("write outputs")?;
    let mut w = csv::Writer::from_path(args.out.join("predictions.csv")).stage("write outputs")?;
    for r in &rows {
        w.serialize(r).stage("write outputs")?;
    }
    w.flush().stage("write outputs")?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRow<'a> {
    variant: &'a str,
    seed: u64,
    rmse: f64,
    rank_ic: f64,
    dir_acc: f64,
    weighted_r2: f64,
    n_test: usize,
    physics_evals: u64,
}

/// Ablation table over `cfg.ablation.variants` × `cfg.ablation.seeds`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<AblationTable> {
    let dir = read_dataset_dir(data).stage("read dataset")?;
    let splits = [&dir.train, &dir.val, &dir.test];
    let table =
        run_ablation(splits, &cfg.train, &cfg.physics, &cfg.ablation.variants, &cfg.ablation.seeds).stage("ablate")?;
    write_echo(cfg, out, &[("command", "ablate".into()), ("data", data.display().to_string())]).stage("write outputs")?;
    table.write_csv(&out.join("table.csv")).stage("write outputs")?;
    write_json(&out.join("table.json"), &table).stage("write outputs")?;
    let mut w = csv::Writer::from_path(out.join("runs.csv")).stage("write outputs")?;
    for r in &table.runs {
        let m = &r.metrics;
        w.serialize(RunRow {
            variant: &r.variant,
            seed: r.seed,
            rmse: m.rmse,
            rank_ic: m.rank_ic,
            dir_acc: m.dir_acc,
            weighted_r2: m.weighted_r2,
            n_test: m.n_test,
            physics_evals: r.physics_evals,
        })
        .stage("write outputs")?;
    }
    w.flush().stage("write outputs")?;
    Ok(table)
}

/// One asset of the allocation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetForecast {
    pub asset: String,
    pub y_hat: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetWeight {
    pub asset: String,
    pub weight: f64,
}

/// Kelly weights from per-asset intervals; `q_p` is the half width.
pub fn cmd_allocate(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Vec<AssetWeight>> {
    let mut r = csv::Reader::from_path(input).stage("read forecasts")?;
    let assets: Vec<AssetForecast> = r.deserialize().collect::<std::result::Result<_, _>>().stage("read forecasts")?;
    if let Some(a) = assets.iter().find(|a| !(a.hi >= a.lo)) {
        return Err(Error::Contract(format!("asset `{}` has hi < lo", a.asset))).stage("read forecasts");
    }
    let mu: Vec<f64> = assets.iter().map(|a| a.y_hat).collect();
    let q: Vec<f64> = assets.iter().map(|a| (a.hi - a.lo) / 2.0).collect();
    let problem = AllocationProblem::from_intervals(mu, &q, cfg.conformal.gamma).stage("allocate")?;
    let w = kelly_allocate(&problem).stage("allocate")?;
    let weights: Vec<AssetWeight> =
        assets.into_iter().zip(w).map(|(a, weight)| AssetWeight { asset: a.asset, weight }).collect();
    write_echo(cfg, out, &[("command", "allocate".into()), ("input", input.display().to_string())])
        .stage("write outputs")?;
    let mut wr = csv::Writer::from_path(out.join("weights.csv")).stage("write outputs")?;
    for row in &weights {
        wr.serialize(row).stage("write outputs")?;
    }
    wr.flush().stage("write outputs")?;
    Ok(weights)
}
