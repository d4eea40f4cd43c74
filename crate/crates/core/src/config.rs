//! Run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleSpec;
use crate::ensemble::{EnsembleOptions, DEFAULT_MEMBERS, DEFAULT_SWEEP_SIZES};
use crate::metrics::PsnrPeak;
use crate::rng::derive_seed;
use crate::train::{TrainConfig, TrainMode};
use crate::{Error, Result};

/// Schedules leaving more signal than this at `t = T` draw a warning.
pub const TERMINAL_ALPHA_BAR_WARN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub diffusion_dir: PathBuf,
    pub baseline_dir: PathBuf,
    pub predictions_dir: PathBuf,
    pub baseline_predictions_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            diffusion_dir: "diffusion".into(),
            baseline_dir: "baseline".into(),
            predictions_dir: "predictions".into(),
            baseline_predictions_dir: "baseline_predictions".into(),
            reports_dir: "reports".into(),
        }
    }
}

impl Paths {
    /// Resolve relative paths against `root`.
    pub fn under(&self, root: &Path) -> Self {
        let j = |p: &PathBuf| root.join(p);
        Self {
            data_dir: j(&self.data_dir),
            diffusion_dir: j(&self.diffusion_dir),
            baseline_dir: j(&self.baseline_dir),
            predictions_dir: j(&self.predictions_dir),
            baseline_predictions_dir: j(&self.baseline_predictions_dir),
            reports_dir: j(&self.reports_dir),
        }
    }
}

/// Every knob of a run. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub ensemble_size: usize,
    pub sweep_sizes: Vec<usize>,
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub ensemble: EnsembleOptions,
    pub psnr_peak: PsnrPeak,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ensemble_size: DEFAULT_MEMBERS,
            sweep_sizes: DEFAULT_SWEEP_SIZES.to_vec(),
            paths: Paths::default(),
            dataset: DatasetSpec::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleOptions::default(),
            psnr_peak: PsnrPeak::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 1 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if self.sweep_sizes.is_empty()
            || self.sweep_sizes[0] < 1
            || self.sweep_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("sweep_sizes must be ascending and at least 1".into()));
        }
        if self.ensemble.member_batch < 1 {
            return Err(Error::Config("ensemble.member_batch must be at least 1".into()));
        }
        self.dataset.validate()?;
        self.denoiser.validate()?;
        let schedule = self.schedule.build()?;
        let terminal = schedule.alpha_bar(schedule.steps());
        if terminal > TERMINAL_ALPHA_BAR_WARN {
            warn!(
                "alpha_bar at t = T is {terminal:.3}; sampling starts from pure noise, so members will be biased towards what the network reads from the residual signal"
            );
        }
        self.train.validate()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            base_seed: derive_seed(self.seed, "synth", 0),
            ..self.dataset.clone()
        }
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let tag = match mode {
            TrainMode::Diffusion => "train",
            TrainMode::RegressionBaseline => "baseline",
        };
        TrainConfig {
            mode,
            seed: derive_seed(self.seed, tag, 0),
            ..self.train.clone()
        }
    }

    pub fn denoiser_config(&self, mode: TrainMode) -> DenoiserConfig {
        match mode {
            TrainMode::Diffusion => self.denoiser.clone(),
            TrainMode::RegressionBaseline => self.denoiser.as_regression(),
        }
    }

    pub fn retrieve_seed(&self) -> u64 {
        derive_seed(self.seed, "retrieve", 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.ensemble_size, 30);
        assert_eq!(cfg.sweep_sizes, [1, 5, 10, 20, 30]);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"seed": 3}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"dataset": {"base_seed": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            r#"{"ensemble_size": 0}"#,
            r#"{"sweep_sizes": [5, 1]}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"schedule": {"steps": 0, "beta_start": 0.0001, "beta_end": 0.02}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn sub_seeds_differ_by_purpose() {
        let cfg = RunConfig { seed: 5, ..RunConfig::default() };
        let a = cfg.train_config(TrainMode::Diffusion).seed;
        let b = cfg.train_config(TrainMode::RegressionBaseline).seed;
        let c = cfg.dataset_spec().base_seed;
        assert!(a != b && b != c && a != c);
        assert_eq!(cfg.train_config(TrainMode::Diffusion).seed, a);
    }
}
