//! Synthetic crash-regime limit-order-book generator.
//!
//! Pipeline: fit a seed (Vasicek level, bar-level GARCH, VAR(1) noise
//! covariance), simulate an amplified mid price, derive order-book features,
//! add correlated noise, warp the training segment, then window and target.

pub mod format;
pub mod garch;
pub mod noise;
pub mod seed;
pub mod validate;
pub mod vasicek;
pub mod warp;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use format::{read_seed_csv, WindowedDataset};
pub use garch::{amplify_and_simulate_garch, fit_garch11, GarchFit, GarchParams, GarchPath};
pub use noise::{add_correlated_noise, fit_var1_cov};
pub use seed::{channel_names, derive_features, realized_vol_target, SeedModel, N_FEATURES};
pub use validate::{cusum_change_point, validate_synthetic, ValidationReport};
pub use vasicek::{fit_vasicek_mle, simulate_vasicek, VasicekFit, VasicekParams};
pub use warp::{time_warp, WarpSpec};

use crate::error::{contract, Error, Result};

/// Stream tags inside the generator's random domain.
pub(crate) mod tags {
    pub const VASICEK: u64 = 1;
    pub const GARCH: u64 = 2;
    pub const SIZES: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const WARP: u64 = 5;
}

/// Relative split sizes (train, val, test).
pub const SPLIT_RATIOS: [f64; 3] = [24_891.0, 9_891.0, 4_891.0];
pub const FORMAT_VERSION: u32 = 1;
/// Shortest seed that still yields 100 one-minute bars.
pub const MIN_SEED_STEPS: usize = 101 * seed::BAR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    pub n_steps: usize,
    pub window_len: usize,
    pub horizon: usize,
    /// Length of the built-in seed series (seconds).
    pub seed_steps: usize,
    pub amplify: bool,
    pub warp: WarpSpec,
    pub seed_model: SeedModel,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_steps: 5_000,
            window_len: 20,
            horizon: 20,
            seed_steps: 36_000,
            amplify: true,
            warp: WarpSpec::default(),
            seed_model: SeedModel::default(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.horizon < 1 {
            return contract("window length must be >= 2 and horizon >= 1");
        }
        let span = self.window_len + self.horizon - 1;
        if self.n_steps < 3 * (span + 1) {
            return contract(format!(
                "n_steps = {} is below one window per split ({} steps needed)",
                self.n_steps,
                3 * (span + 1)
            ));
        }
        if self.seed_steps < MIN_SEED_STEPS {
            return contract(format!("seed_steps must be at least {MIN_SEED_STEPS}"));
        }
        Ok(())
    }
}

/// Parameters estimated on the seed and used for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSeed {
    pub vasicek: VasicekParams,
    pub vasicek_simulated: VasicekParams,
    pub garch: GarchParams,
    pub garch_simulated: GarchParams,
    /// Mean `Σ_ii / Var(f_i)` over the 83 non-price channels of the seed.
    pub noise_ratio: f64,
    pub noise_scale: f64,
    pub noise_cov_trace: f64,
    /// Index where the seed fit starts (change point for external seeds).
    pub fit_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub start_step: usize,
    pub end_step: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SyntheticDatasetSpec,
    pub seed_source: String,
    pub window_len: usize,
    pub dx: usize,
    pub channels: Vec<String>,
    pub splits: Vec<SplitInfo>,
    pub fitted: FittedSeed,
    pub validation: ValidationReport,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub manifest: Manifest,
    /// Full synthetic feature series (after noise and warp).
    pub series: DMatrix<f64>,
}

/// Window counts per split proportional to [`SPLIT_RATIOS`].
pub fn split_counts(total_windows: usize) -> [usize; 3] {
    let sum: f64 = SPLIT_RATIOS.iter().sum();
    let tr = (total_windows as f64 * SPLIT_RATIOS[0] / sum).round() as usize;
    let va = (total_windows as f64 * SPLIT_RATIOS[1] / sum).round() as usize;
    [tr, va, total_windows - tr - va]
}

/// Generates from the built-in parametric seed.
pub fn generate_dslob(spec: &SyntheticDatasetSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let seed = seed::builtin_seed(&spec.seed_model, spec.seed_steps, spec.seed)?;
    generate_from_seed(spec, &seed, "builtin")
}

/// Generates from seed features in the 85-channel layout; an external seed
/// is fitted from its CUSUM change point onward when that leaves enough data.
pub fn generate_from_seed(spec: &SyntheticDatasetSpec, seed_features: &DMatrix<f64>, source: &str) -> Result<GeneratedDataset> {
    spec.validate()?;
    if seed_features.ncols() != N_FEATURES {
        return contract(format!("seed data must have {N_FEATURES} columns, found {}", seed_features.ncols()));
    }
    if seed_features.nrows() < MIN_SEED_STEPS {
        return contract(format!("seed data needs at least {MIN_SEED_STEPS} rows"));
    }
    let full_mid: Vec<f64> = seed_features.column(seed::MID).iter().copied().collect();
    if full_mid.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Format("seed mid prices must be finite and positive".into()));
    }
    let fit_start = if source == "builtin" {
        0
    } else {
        let sq: Vec<f64> = full_mid.windows(2).map(|w| (w[1] / w[0]).ln().powi(2)).collect();
        match cusum_change_point(&sq) {
            Some(k) if full_mid.len() - k >= MIN_SEED_STEPS => k,
            _ => 0,
        }
    };
    let mid = &full_mid[fit_start..];
    let seed_block = seed_features.rows(fit_start, seed_features.nrows() - fit_start).into_owned();

    let dev: Vec<f64> = mid.iter().map(|p| p - mid[0]).collect();
    let vfit = fit_vasicek_mle(&dev, 1.0)?.params;
    let gfit = fit_garch11(&seed::bar_returns(mid))?.params;
    let rest = seed_block.columns(2, N_FEATURES - 2).into_owned();
    let cov = fit_var1_cov(&rest)?;
    let noise_ratio = noise::mean_ratio(&rest, &cov);

    let (vsim, gsim) = if spec.amplify { (vfit.amplified(), gfit.amplified()) } else { (vfit, gfit) };
    if gsim.persistence() >= 1.0 {
        log::warn!("simulated GARCH persistence {:.4} >= 1", gsim.persistence());
    }
    let s0 = gfit.unconditional_variance().unwrap_or(gfit.omega);
    let (r, _) = seed::second_returns(&gsim, s0, spec.n_steps - 1, spec.seed, 2)?;
    let sim_mid = seed::simulate_mid(mid[0], &vsim, &r)?;
    let base = derive_features(&sim_mid, spec.seed ^ 0xa11)?;
    let base_rest = base.columns(2, N_FEATURES - 2).into_owned();
    let noise_scale = noise::snr_scale(&base_rest, &cov, noise_ratio);
    let noisy = add_correlated_noise(&base_rest, &cov, noise_scale, spec.seed)?;
    let mut series = base;
    series.columns_mut(2, N_FEATURES - 2).copy_from(&noisy);

    let span = spec.window_len + spec.horizon - 1;
    let total = spec.n_steps - 3 * span;
    let counts = split_counts(total);
    let names = ["train", "val", "test"];
    let mut splits = Vec::new();
    let mut start = 0;
    for (k, &c) in counts.iter().enumerate() {
        let len = c + span;
        splits.push(SplitInfo { name: names[k].into(), start_step: start, end_step: start + len, windows: c });
        start += len;
    }

    // warp the training segment on one clock for all channels
    let tr = &splits[0];
    let seg = series.rows(tr.start_step, tr.end_step - tr.start_step).into_owned();
    let rate = warp::warp_rate(seg.nrows(), &spec.warp, spec.seed)?;
    let mut warped = warp::apply_warp(&seg, &rate)?;
    for t in 1..warped.nrows() {
        warped[(t, seed::LOG_RETURN)] = (warped[(t, seed::MID)] / warped[(t - 1, seed::MID)]).ln();
    }
    series.rows_mut(tr.start_step, warped.nrows()).copy_from(&warped);

    let mut sets = Vec::new();
    for s in &splits {
        let block = series.rows(s.start_step, s.end_step - s.start_step).into_owned();
        let mid_seg: Vec<f64> = block.column(seed::MID).iter().copied().collect();
        let targets = seed::window_targets(&mid_seg, spec.window_len, spec.horizon)?;
        debug_assert_eq!(targets.len(), s.windows);
        sets.push(WindowedDataset::from_series(&block, spec.window_len, targets)?);
    }
    if sets.iter().flat_map(|d| d.values().iter().chain(&d.targets)).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generated dataset".into()));
    }

    let validation = validate_synthetic(&series, &seed_block, seed::LOG_RETURN)?;
    let fitted = FittedSeed {
        vasicek: vfit,
        vasicek_simulated: vsim,
        garch: gfit,
        garch_simulated: gsim,
        noise_ratio,
        noise_scale,
        noise_cov_trace: cov.trace(),
        fit_start,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        seed_source: source.into(),
        window_len: spec.window_len,
        dx: N_FEATURES,
        channels: channel_names(),
        splits,
        fitted,
        validation,
    };
    let mut it = sets.into_iter();
    let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(GeneratedDataset { train, val, test, manifest, series })
}

pub const SPLIT_FILES: [&str; 3] = ["train.artw", "val.artw", "test.artw"];

/// File name and contents of every file in a dataset directory.
pub fn dataset_files(ds: &GeneratedDataset) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let json = serde_json::to_string_pretty(&ds.manifest)? + "\n";
    Ok(vec![
        (SPLIT_FILES[0], ds.train.artw_bytes()),
        (SPLIT_FILES[1], ds.val.artw_bytes()),
        (SPLIT_FILES[2], ds.test.artw_bytes()),
        ("manifest.json", json.into_bytes()),
    ])
}

/// Writes `manifest.json` and one window file per split.
pub fn write_dataset_dir(dir: &Path, ds: &GeneratedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in dataset_files(ds)? {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Splits of a dataset directory. The manifest is optional for
/// externally produced window files.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub manifest: Option<serde_json::Value>,
}

pub fn read_dataset_dir(dir: &Path) -> Result<DatasetDir> {
    let read = |f: &str| WindowedDataset::read_artw(&dir.join(f));
    let (train, val, test) = (read(SPLIT_FILES[0])?, read(SPLIT_FILES[1])?, read(SPLIT_FILES[2])?);
    for d in [&val, &test] {
        if (d.window_len, d.dx) != (train.window_len, train.dx) {
            return Err(Error::Format("splits disagree on window shape".into()));
        }
    }
    let mpath = dir.join("manifest.json");
    let manifest = if mpath.exists() { Some(serde_json::from_str(&std::fs::read_to_string(mpath)?)?) } else { None };
    Ok(DatasetDir { train, val, test, manifest })
}
