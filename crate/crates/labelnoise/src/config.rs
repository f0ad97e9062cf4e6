//! Experiment configuration: a strict JSON schema.
//!
//! Unknown keys are rejected so a typo in a sweep definition fails loudly
//! instead of silently running the wrong experiment. Every knob has a
//! desk-scale default; see the `configs/` directory for ready-made presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::TrainHyper;
use crate::noise::{QSchedule, Regularizer};
use crate::{Error, Result};

/// How training labels are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    None,
    FlipRandom,
    FlipAdversarial,
    Outlier,
}

/// Which model the run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain softmax classifier, no noise layer.
    None,
    /// Noise layer initialized at the identity and learned on schedule.
    LearnedQ,
    /// Noise layer fixed to the generating matrix `Q*`.
    TrueQ,
    /// Noise layer fixed to the outlier matrix built from `alpha`.
    OutlierQ,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::LearnedQ => "learned-q",
            Variant::TrueQ => "true-q",
            Variant::OutlierQ => "outlier-q",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub separation: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_test_size() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    /// Flip modes: off-diagonal probability mass per column.
    pub level: f64,
    /// Flip modes: distinct off-diagonal targets per class.
    pub fan_out: usize,
    /// Outlier mode: outliers carrying a random inlier label.
    pub outliers: usize,
    /// Outlier mode: outliers explicitly labeled with the extra class.
    pub known_outliers: usize,
    /// Outlier mode: use this alpha in the noise matrix instead of the
    /// exact count ratio from synthesis.
    pub alpha_override: Option<f64>,
    /// Outlier mode: distance of the outlier cluster from the class means
    /// (default: 3x the class separation).
    pub outlier_separation: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mode: NoiseMode::None,
            level: 0.0,
            fan_out: 1,
            outliers: 0,
            known_outliers: 0,
            alpha_override: None,
            outlier_separation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 100,
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConfig {
    /// Epochs to keep the noise matrix pinned to the identity.
    pub freeze_epochs: usize,
    /// Diffusion regularizer strength.
    pub lambda: f64,
    pub regularizer: Regularizer,
    /// Step size for the noise matrix; defaults to the model's.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            freeze_epochs: 10,
            lambda: 0.1,
            regularizer: Regularizer::Ridge,
            learning_rate: None,
            momentum: 0.0,
        }
    }
}

impl QConfig {
    pub fn schedule(&self, model_lr: f64) -> QSchedule {
        QSchedule {
            freeze_epochs: self.freeze_epochs,
            lambda: self.lambda,
            regularizer: self.regularizer,
            learning_rate: self.learning_rate.unwrap_or(model_lr),
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Flip modes: noise levels; outlier mode: outlier fractions of the
    /// training set.
    pub noise_levels: Vec<f64>,
    pub train_sizes: Vec<usize>,
}

/// Everything a run needs. A run is a pure function of this value plus
/// the seed, so identical configs reproduce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub q: QConfig,
    /// Defaults per noise mode: none -> `none`, flips -> `learned-q`,
    /// outlier -> `outlier-q`.
    #[serde(default)]
    pub variant: Option<Variant>,
    pub seed: u64,
    /// Seeds per sweep cell (seed, seed+1, ..).
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_num_seeds() -> usize {
    1
}

impl ExperimentConfig {
    pub fn resolved_variant(&self) -> Variant {
        self.variant.unwrap_or(match self.noise.mode {
            NoiseMode::None => Variant::None,
            NoiseMode::FlipRandom | NoiseMode::FlipAdversarial => Variant::LearnedQ,
            NoiseMode::Outlier => Variant::OutlierQ,
        })
    }

    /// Distance of the outlier cluster from the class means.
    pub fn outlier_separation(&self) -> f64 {
        self.noise
            .outlier_separation
            .unwrap_or(3.0 * self.dataset.separation)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(Error::invalid("dataset.classes must be at least 2"));
        }
        if d.dim == 0 {
            return Err(Error::invalid("dataset.dim must be at least 1"));
        }
        if d.train_size < d.classes {
            return Err(Error::invalid("dataset.train_size must cover every class"));
        }
        if d.test_size < d.classes {
            return Err(Error::invalid("dataset.test_size must cover every class"));
        }
        if !(d.separation >= 0.0) || !d.separation.is_finite() {
            return Err(Error::invalid("dataset.separation must be non-negative"));
        }
        self.model.hyper().validate()?;
        if self.model.epochs == 0 {
            return Err(Error::invalid("model.epochs must be at least 1"));
        }
        self.q
            .schedule(self.model.learning_rate)
            .validate(self.model.epochs)?;

        let n = &self.noise;
        match n.mode {
            NoiseMode::None => {}
            NoiseMode::FlipRandom => {
                if !(0.0..1.0).contains(&n.level) {
                    return Err(Error::invalid("noise.level must lie in [0, 1)"));
                }
                if n.fan_out == 0 || n.fan_out >= d.classes {
                    return Err(Error::invalid("noise.fan_out must lie in [1, classes-1]"));
                }
            }
            NoiseMode::FlipAdversarial => {
                if !(0.0..1.0).contains(&n.level) {
                    return Err(Error::invalid("noise.level must lie in [0, 1)"));
                }
            }
            NoiseMode::Outlier => {
                if let Some(a) = n.alpha_override {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::invalid("noise.alpha_override must lie in [0, 1]"));
                    }
                }
                if n.outliers + n.known_outliers == 0 && n.alpha_override.is_none() {
                    return Err(Error::invalid(
                        "outlier mode needs outliers, known_outliers, or alpha_override",
                    ));
                }
            }
        }

        match (self.resolved_variant(), n.mode) {
            (Variant::TrueQ, NoiseMode::FlipRandom | NoiseMode::FlipAdversarial) => {}
            (Variant::TrueQ, _) => {
                return Err(Error::invalid("variant true-q requires a flip noise mode"))
            }
            (Variant::OutlierQ, NoiseMode::Outlier) => {}
            (Variant::OutlierQ, _) => {
                return Err(Error::invalid("variant outlier-q requires outlier noise mode"))
            }
            (Variant::LearnedQ, NoiseMode::Outlier) => {
                return Err(Error::invalid(
                    "the outlier noise matrix is fixed, not learned; use variant outlier-q",
                ))
            }
            _ => {}
        }

        if let Some(sweep) = &self.sweep {
            if sweep.noise_levels.is_empty() || sweep.train_sizes.is_empty() {
                return Err(Error::invalid("sweep grids must be non-empty"));
            }
            for &level in &sweep.noise_levels {
                if !(0.0..1.0).contains(&level) {
                    return Err(Error::invalid("sweep noise levels must lie in [0, 1)"));
                }
            }
            for &size in &sweep.train_sizes {
                if size < d.classes {
                    return Err(Error::invalid("sweep train sizes must cover every class"));
                }
            }
        }
        if self.num_seeds == 0 {
            return Err(Error::invalid("num_seeds must be at least 1"));
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}
