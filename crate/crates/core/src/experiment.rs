//! The end-to-end desk-scale experiment: synthesize, train the diffusion
//! model and the regression comparator, retrieve ensembles for the test
//! split, and score both.
//!
//! Every stage resumes from what is already on disk, so an interrupted run
//! can be restarted with the same configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::commands::{cmd_evaluate, cmd_retrieve, cmd_synth, cmd_train, prediction_name, read_manifest, Evaluation, RetrieveInput, STD_FILE};
use crate::config::RunConfig;
use crate::dataset::{Split, MANIFEST_NAME};
use crate::denoiser::load_checkpoint;
use crate::train::TrainMode;
use crate::{Error, Result};

pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMINGS_JSON: &str = "timings.json";

/// Trend checks on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    pub ensemble_size: usize,
    pub rmse_single: f64,
    pub rmse_ensemble: f64,
    pub coverage: Vec<(usize, f64)>,
    pub ssim_ensemble: f64,
    pub ssim_baseline: f64,
}

pub const COVERAGE_FLOOR: f64 = 0.8;
pub const SSIM_SLACK: f64 = 0.02;

impl Checks {
    pub fn from_evaluations(diffusion: &Evaluation, baseline: &Evaluation) -> Result<Self> {
        let (first, last) = match (diffusion.sweep.first(), diffusion.sweep.last()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Data("empty ensemble-size sweep".into())),
        };
        Ok(Self {
            ensemble_size: last.size,
            rmse_single: first.rmse,
            rmse_ensemble: last.rmse,
            coverage: diffusion.coverage.iter().map(|r| (r.size, r.pooled)).collect(),
            ssim_ensemble: last.ssim,
            ssim_baseline: baseline.report.overall().ssim,
        })
    }

    /// The ensemble mean beats a single member in RMSE.
    pub fn ensemble_beats_single(&self) -> bool {
        self.rmse_ensemble < self.rmse_single
    }

    pub fn coverage_nondecreasing(&self) -> bool {
        self.coverage.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    pub fn coverage_above_floor(&self) -> bool {
        self.coverage.last().is_some_and(|c| c.1 > COVERAGE_FLOOR)
    }

    pub fn competitive_with_baseline(&self) -> bool {
        self.ssim_ensemble >= self.ssim_baseline - SSIM_SLACK
    }

    pub fn all(&self) -> bool {
        self.ensemble_beats_single() && self.coverage_nondecreasing() && self.coverage_above_floor() && self.competitive_with_baseline()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checks: Checks,
    /// Compute seconds per stage, summed over the invocations that did work.
    pub timings: BTreeMap<String, f64>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub diffusion: Evaluation,
    pub baseline: Evaluation,
    pub summary: Summary,
}

fn read_timings(path: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn training_done(cfg: &RunConfig, mode: TrainMode, dir: &Path, n_train: usize) -> bool {
    load_checkpoint(dir.join("params.nvck"))
        .map(|(_, _, meta)| meta.step as usize == cfg.train_config(mode).total_steps(n_train))
        .unwrap_or(false)
}

fn retrieval_done(root: &Path, data_dir: &Path) -> bool {
    let Ok(manifest) = read_manifest(data_dir) else { return false };
    manifest
        .split(Split::Test)
        .iter()
        .all(|e| root.join(prediction_name(e)).join(STD_FILE).is_file())
}

/// Run or resume the experiment under `root`.
pub fn run_experiment(cfg: &RunConfig, root: &Path) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let paths = cfg.paths.under(root);
    fs::create_dir_all(&paths.reports_dir).map_err(|e| Error::io(&paths.reports_dir, e))?;
    let timings_path = paths.reports_dir.join(TIMINGS_JSON);
    let mut timings = read_timings(&timings_path);
    let mut stage = |name: &str, done: bool, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        if done {
            info!("{name}: already complete");
            return Ok(());
        }
        let start = Instant::now();
        f()?;
        *timings.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        write_json(&timings_path, &timings)
    };

    let data = &paths.data_dir;
    stage("synth", data.join(MANIFEST_NAME).is_file(), &mut || cmd_synth(cfg, data, false).map(drop))?;
    let n_train = read_manifest(data)?.training_entries()?.len();
    for (name, mode, dir) in [
        ("train_diffusion", TrainMode::Diffusion, &paths.diffusion_dir),
        ("train_baseline", TrainMode::RegressionBaseline, &paths.baseline_dir),
    ] {
        stage(name, training_done(cfg, mode, dir, n_train), &mut || {
            cmd_train(cfg, mode, data, dir, false, true).map(drop)
        })?;
    }
    let input = RetrieveInput::Dataset(data.clone());
    for (name, ckpt, out) in [
        ("retrieve_diffusion", &paths.diffusion_dir, &paths.predictions_dir),
        ("retrieve_baseline", &paths.baseline_dir, &paths.baseline_predictions_dir),
    ] {
        stage(name, retrieval_done(out, data), &mut || {
            cmd_retrieve(cfg, ckpt, &input, out, cfg.ensemble_size, false, true)
        })?;
    }
    let start = Instant::now();
    let diffusion = cmd_evaluate(cfg, data, &paths.predictions_dir, &paths.reports_dir.join("diffusion"), None, true)?;
    let baseline = cmd_evaluate(cfg, data, &paths.baseline_predictions_dir, &paths.reports_dir.join("baseline"), Some(&[1]), true)?;
    let eval_secs = start.elapsed().as_secs_f64();
    let mut timings = read_timings(&timings_path);
    timings.insert("evaluate".into(), eval_secs);
    let checks = Checks::from_evaluations(&diffusion, &baseline)?;
    let summary = Summary {
        checks,
        timings,
        threads: rayon::current_num_threads(),
    };
    write_json(&paths.reports_dir.join(SUMMARY_JSON), &summary)?;
    Ok(Outcome {
        diffusion,
        baseline,
        summary,
    })
}
