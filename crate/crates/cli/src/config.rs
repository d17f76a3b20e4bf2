//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use deltafm::data::{load_csv, two_gaussians, GaussianMixtureSpec, LabeledPointCloud, DEFAULT_SEPARATION};
use deltafm::metrics::EvalConfig;
use deltafm::model::Architecture;
use deltafm::objective::{MeanTrajectory, MeanTrajectoryMode};
use deltafm::sampler::{GuidanceConfig, GuidanceMode, SamplerConfig};
use deltafm::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "DELTAFM_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoGaussians {
        separation: f64,
        scale: f64,
        n_per_class: usize,
        seed: u64,
    },
    Mixture {
        n_per_class: usize,
        seed: u64,
        spec: GaussianMixtureSpec,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::TwoGaussians {
            separation: DEFAULT_SEPARATION,
            scale: 1.0,
            n_per_class: 5000,
            seed: 0,
        }
    }
}

/// A loaded training set and, for analytic datasets, its generating mixture.
pub struct Dataset {
    pub cloud: LabeledPointCloud,
    pub spec: Option<GaussianMixtureSpec>,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset, CliError> {
        Ok(match self {
            DatasetConfig::TwoGaussians { separation, scale, n_per_class, seed } => {
                let (cloud, spec) = two_gaussians(*separation, *scale, *n_per_class, *seed)?;
                Dataset { cloud, spec: Some(spec) }
            }
            DatasetConfig::Mixture { n_per_class, seed, spec } => Dataset {
                cloud: spec.sample_cloud(*n_per_class, *seed)?,
                spec: Some(spec.clone()),
            },
            DatasetConfig::Csv { path } => Dataset {
                cloud: load_csv(path).map_err(|e| CliError::at_path(path, e))?.cloud,
                spec: None,
            },
        })
    }

    fn validate(&self) -> Result<(), CliError> {
        match self {
            DatasetConfig::TwoGaussians { separation, scale, n_per_class, .. } => {
                if !(*scale > 0.0) {
                    return Err(CliError::field("dataset.scale", "must be positive"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(CliError::field("dataset.separation", "must be finite and non-negative"));
                }
                if *n_per_class == 0 {
                    return Err(CliError::field("dataset.n_per_class", "must be at least 1"));
                }
            }
            DatasetConfig::Mixture { n_per_class, spec, .. } => {
                spec.validate().map_err(|e| CliError::nested("dataset.spec", e))?;
                if *n_per_class == 0 {
                    return Err(CliError::field("dataset.n_per_class", "must be at least 1"));
                }
            }
            DatasetConfig::Csv { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub enabled: bool,
    pub mode: GuidanceMode,
    pub w: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    /// Defaults to `train.lambda`.
    pub lambda: Option<f64>,
    pub mean_trajectory: MeanTrajectoryMode,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: GuidanceMode::HatCfg,
            w: 1.85,
            sigma_low: 0.0,
            sigma_high: 0.65,
            lambda: None,
            mean_trajectory: MeanTrajectoryMode::Analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_class: usize,
    pub flows_per_class: usize,
    pub threshold: f64,
    pub reference_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            samples_per_class: d.samples_per_class,
            flows_per_class: d.flows_per_class,
            threshold: d.threshold,
            reference_seed: d.reference_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub init_seed: u64,
    pub dataset: DatasetConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            init_seed: 0,
            dataset: DatasetConfig::default(),
            model: Architecture::toy(2, 2),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.model.validate().map_err(|e| CliError::nested("model", e))?;
        self.train.validate().map_err(|e| CliError::nested("train", e))?;
        self.sampler.validate().map_err(|e| CliError::nested("sampler", e))?;
        self.guidance_config(None)?
            .validate()
            .map_err(|e| CliError::nested("guidance", e))?;
        if let Some(l) = self.guidance.lambda {
            if !(0.0..1.0).contains(&l) {
                return Err(CliError::field("guidance.lambda", format!("{l} is outside [0, 1)")));
            }
        }
        if self.eval.samples_per_class == 0 || self.eval.flows_per_class == 0 {
            return Err(CliError::field("eval.samples_per_class", "sample counts must be positive"));
        }
        Ok(())
    }

    /// Output directory: explicit config value, then the environment, then `runs`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Guidance settings, with the mean trajectory taken from `data` when given.
    pub fn guidance_config(&self, data: Option<&LabeledPointCloud>) -> Result<GuidanceConfig, CliError> {
        let g = &self.guidance;
        let t_hat = match data {
            Some(d) => Some(mean_trajectory(d, g.mean_trajectory, self.sampler.seed)?),
            None => None,
        };
        Ok(GuidanceConfig {
            enabled: g.enabled,
            w: g.w,
            sigma_low: g.sigma_low,
            sigma_high: g.sigma_high,
            lambda: g.lambda.unwrap_or(self.train.lambda),
            t_hat,
            mode: g.mode,
        })
    }

    pub fn eval_config(&self, guidance: GuidanceConfig) -> EvalConfig {
        EvalConfig {
            samples_per_class: self.eval.samples_per_class,
            flows_per_class: self.eval.flows_per_class,
            sampler: self.sampler,
            guidance,
            threshold: self.eval.threshold,
            reference_seed: self.eval.reference_seed,
        }
    }
}

pub fn mean_trajectory(
    data: &LabeledPointCloud,
    mode: MeanTrajectoryMode,
    seed: u64,
) -> Result<MeanTrajectory, CliError> {
    Ok(match mode {
        MeanTrajectoryMode::Analytic => MeanTrajectory::analytic(data.points())?,
        MeanTrajectoryMode::Empirical => MeanTrajectory::empirical(data.points(), 1_000_000, seed)?,
    })
}
