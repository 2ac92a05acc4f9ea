//! Pretraining with the composite loss, symbolic distillation, evaluation
//! metrics and the ablation harness.

mod ablation;
mod checkpoint;
mod distill;
mod fit;
mod metrics;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::symbolic::LibrarySpec;

pub use ablation::{run_ablation, run_variant, AblationRow, AblationRun, AblationTable, FlatMlp};
pub use checkpoint::{read_checkpoint, write_checkpoint, ARTP_MAGIC, ARTP_VERSION};
pub use distill::{distill, distill_features, DistillResult};
pub use fit::{pretrain, EpochRecord, History, Plateau};
pub use metrics::{evaluate, spearman, MetricsReport};
pub use model::{
    composite_loss, forward_pass, predict_dataset, Batch, ForwardMode, ForwardOutput, LossBreakdown, Model,
    ModelParams, ModelSpec, Standardizer, EVAL_SEED,
};

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Pricing PDE residual.
    pub lambda1: f64,
    /// Market-price-of-risk hinge.
    pub lambda2: f64,
    /// Encoder/SDE consistency.
    pub lambda3: f64,
    /// L1 penalty of the symbolic head.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1, lambda3: 0.1, lambda4: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return contract(format!("loss weights must be finite and >= 0: {self:?}"));
        }
        Ok(())
    }
}

/// Where the SDE starts relative to the observation window `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// `z_0 = enc(T)`, simulate over `[T, 2T]`.
    End,
    /// `z_0 = enc(0)`, simulate over `[0, T]`.
    Start,
}

/// Replacement used by the no-SDE ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoSdeMode {
    /// `ŷ = wᵀenc(T) + b`.
    Encoder,
    /// Drift-only Euler path (`σ ≡ 0`).
    Ode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub distill_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub distill_lr: f64,
    /// Euler steps `M`.
    pub sde_steps: usize,
    pub dz: usize,
    pub hidden: usize,
    pub n_freq: usize,
    pub n_pairs: usize,
    pub n_real: usize,
    /// Initial diffusion scale.
    pub vol0: f64,
    pub seed: u64,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Rescale λ₁..λ₃ once after the first epoch.
    pub rebalance: bool,
    pub anchor: Anchor,
    pub no_sde_mode: NoSdeMode,
    /// Noise paths averaged per prediction.
    pub eval_paths: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Coefficients below this magnitude are dropped from the expression.
    pub expr_threshold: f64,
    /// Least-squares refit on the selected terms after hardening.
    pub refit: bool,
    pub library: LibrarySpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            distill_epochs: 5,
            batch: 64,
            lr: 1e-3,
            distill_lr: 1e-2,
            sde_steps: 20,
            dz: 8,
            hidden: 32,
            n_freq: 4,
            n_pairs: 2,
            n_real: 2,
            vol0: 0.1,
            seed: 0,
            patience: 5,
            plateau_factor: 0.5,
            plateau_patience: 2,
            weights: LossWeights::default(),
            rebalance: true,
            anchor: Anchor::End,
            no_sde_mode: NoSdeMode::Encoder,
            eval_paths: 4,
            tau_start: 1.0,
            tau_end: 0.1,
            expr_threshold: 1e-3,
            refit: true,
            library: LibrarySpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("sde_steps", self.sde_steps),
            ("dz", self.dz),
            ("hidden", self.hidden),
            ("n_freq", self.n_freq),
            ("eval_paths", self.eval_paths),
            ("patience", self.patience),
            ("plateau_patience", self.plateau_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return contract(format!("train.{name} must be >= 1"));
            }
        }
        if self.dz < 2 {
            return contract("train.dz must be >= 2");
        }
        if self.n_pairs + self.n_real == 0 {
            return contract("encoder needs at least one pole");
        }
        if !(self.lr > 0.0 && self.distill_lr > 0.0) {
            return contract("learning rates must be > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return contract("train.plateau_factor must lie in (0, 1)");
        }
        if !(self.vol0 > 0.0) {
            return contract("train.vol0 must be > 0");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return contract("distillation temperatures must be > 0");
        }
        if !(self.expr_threshold >= 0.0) {
            return contract("train.expr_threshold must be >= 0");
        }
        self.weights.validate()
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "A0_Full")]
    A0Full,
    #[serde(rename = "A1_NoSDE")]
    A1NoSde,
    #[serde(rename = "A2_NoPDE")]
    A2NoPde,
    #[serde(rename = "A3_NoMPR")]
    A3NoMpr,
    #[serde(rename = "A4_NoPhysics")]
    A4NoPhysics,
    #[serde(rename = "A5_NoConsistency")]
    A5NoConsistency,
    #[serde(rename = "A6_MLP")]
    A6Mlp,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        Self::A0Full,
        Self::A1NoSde,
        Self::A2NoPde,
        Self::A3NoMpr,
        Self::A4NoPhysics,
        Self::A5NoConsistency,
        Self::A6Mlp,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Self::A0Full => "A0_Full",
            Self::A1NoSde => "A1_NoSDE",
            Self::A2NoPde => "A2_NoPDE",
            Self::A3NoMpr => "A3_NoMPR",
            Self::A4NoPhysics => "A4_NoPhysics",
            Self::A5NoConsistency => "A5_NoConsistency",
            Self::A6Mlp => "A6_MLP",
        }
    }

    /// Training config for this variant.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let w = &mut c.weights;
        match self {
            Self::A0Full | Self::A6Mlp => {}
            Self::A1NoSde => {
                if c.no_sde_mode == NoSdeMode::Encoder {
                    w.lambda1 = 0.0;
                    w.lambda2 = 0.0;
                    w.lambda3 = 0.0;
                }
            }
            Self::A2NoPde => w.lambda1 = 0.0,
            Self::A3NoMpr => w.lambda2 = 0.0,
            Self::A4NoPhysics => {
                w.lambda1 = 0.0;
                w.lambda2 = 0.0;
            }
            Self::A5NoConsistency => w.lambda3 = 0.0,
        }
        c
    }

    pub fn forward_mode(&self, cfg: &TrainConfig) -> ForwardMode {
        match (self, cfg.no_sde_mode) {
            (Self::A1NoSde, NoSdeMode::Encoder) => ForwardMode::EncoderOnly,
            (Self::A1NoSde, NoSdeMode::Ode) => ForwardMode::Ode,
            _ => ForwardMode::Sde,
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.label().eq_ignore_ascii_case(s) || v.label()[..2].eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use nalgebra::DMatrix;

    use crate::dslob::WindowedDataset;
    use crate::rng::{normals, Domain};

    /// Noisy trending channels; the target is a linear function of the last
    /// observation of channel 0.
    pub fn toy_dataset(n: usize, l: usize, dx: usize, seed: u64) -> WindowedDataset {
        let z = normals(seed, Domain::Test, 0, 0, (n + l) * dx);
        let feats = DMatrix::from_fn(n + l, dx, |i, j| z[i * dx + j] + 0.1 * i as f64);
        let targets = (0..n).map(|s| feats[(s + l - 1, 0)] * 0.5 + 0.2).collect();
        WindowedDataset::from_series(&feats, l, targets).unwrap()
    }
}
