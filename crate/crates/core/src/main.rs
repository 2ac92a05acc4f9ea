use std::path::PathBuf;
use std::process::ExitCode;

use artemis::cli::{
    cmd_ablate, cmd_allocate, cmd_generate, cmd_predict, cmd_train, cmd_validate, CliError, PredictArgs, Split, Status,
    EXIT_ERROR,
};
use artemis::config::RunConfig;
use clap::{Args, Parser, Subcommand};

/// Synthetic order-book generation, physics-regularised SDE forecasting,
/// conformal intervals and allocation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Seed order-book CSV instead of the built-in seed.
        #[arg(long)]
        seed_csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain, distill and calibrate on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Predictions with conformal intervals.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Miscoverage level (overrides conformal.alpha).
        #[arg(long)]
        alpha: Option<f64>,
        /// Rolling-window intervals with window W.
        #[arg(long, value_name = "W")]
        adaptive: Option<usize>,
        /// Defaults to calibration.json next to the checkpoint.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every ablation variant for every seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Kelly weights from a CSV of asset,y_hat,lo,hi.
    Allocate {
        #[arg(long)]
        input: PathBuf,
        /// Risk aversion (overrides conformal.gamma).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Regenerate a dataset from its manifest and check the gates.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn load(c: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig, CliError> {
    let mut set = c.set.clone();
    set.extend(extra);
    RunConfig::load(c.config.as_deref(), &set).map_err(|source| CliError { stage: "config", source })
}

fn run(cmd: Command) -> Result<Status, CliError> {
    match cmd {
        Command::Generate { out, seed_csv, cfg } => cmd_generate(&load(&cfg, vec![])?, &out, seed_csv.as_deref()),
        Command::Train { data, out, cfg } => {
            let m = cmd_train(&load(&cfg, vec![])?, &data, &out)?;
            println!(
                "test rmse {:.4}  rank_ic {:.4}  dir_acc {:.4}  wR2 {:.4}  coverage {:.3}",
                m.test.rmse, m.test.rank_ic, m.test.dir_acc, m.test.weighted_r2, m.test_coverage
            );
            Ok(Status::Ok)
        }
        Command::Predict { checkpoint, data, split, alpha, adaptive, calibration, out, cfg } => {
            let extra = alpha.map(|a| vec![format!("conformal.alpha={a}")]).unwrap_or_default();
            let cfg = load(&cfg, extra)?;
            let rows = cmd_predict(&cfg, &PredictArgs { checkpoint, data, split, adaptive, calibration, out })?;
            let hit = rows.iter().filter(|r| r.lo <= r.target && r.target <= r.hi).count();
            println!("{} predictions, coverage {:.3}", rows.len(), hit as f64 / rows.len().max(1) as f64);
            Ok(Status::Ok)
        }
        Command::Ablate { data, out, cfg } => {
            let t = cmd_ablate(&load(&cfg, vec![])?, &data, &out)?;
            println!("{:18} {:>8} {:>8} {:>8} {:>8}", "variant", "rmse", "rank_ic", "dir_acc", "wR2");
            for r in &t.rows {
                println!("{:18} {:8.4} {:8.4} {:8.4} {:8.4}", r.variant, r.rmse, r.rank_ic, r.dir_acc, r.weighted_r2);
            }
            Ok(Status::Ok)
        }
        Command::Allocate { input, gamma, out, cfg } => {
            let extra = gamma.map(|g| vec![format!("conformal.gamma={g}")]).unwrap_or_default();
            for w in cmd_allocate(&load(&cfg, extra)?, &input, &out)? {
                println!("{} {:.6}", w.asset, w.weight);
            }
            Ok(Status::Ok)
        }
        Command::Validate { data } => {
            let (status, v) = cmd_validate(&data)?;
            println!("regenerated bytes identical");
            println!("KS p {:.3e} ({})", v.ks_p, v.ks_pass);
            println!("ACF dev {:.4} vs band {:.4} ({})", v.acf_max_dev, v.acf_band, v.acf_pass);
            println!("mean |Δcorr| {:.4} ({})", v.corr_mean_absdiff, v.corr_pass);
            println!("tail rel err {:.4} ({})", v.tail_rel_err, v.tail_pass);
            Ok(status)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are hard errors; 2 is reserved for soft failures
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR as u8 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(status) => {
            if let Status::SoftFail(msg) = &status {
                eprintln!("warning: {msg}");
            }
            ExitCode::from(status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
