//! Optimization loop: Adam with bias correction, parameter EMA, seeded
//! batch order and noise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::denoiser::{
    load_checkpoint_expecting, save_checkpoint, Batch, CheckpointMeta, Denoiser, DenoiserConfig, DenoiserParams, ModelKind,
};
use crate::diffusion::NoiseSchedule;
use crate::grid::{normalize_conditions, NormStats};
use crate::nn::{ParamSet, Tensor};
use crate::rng::{self, fill_normal, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Diffusion,
    RegressionBaseline,
}

impl TrainMode {
    pub fn model_kind(self) -> ModelKind {
        match self {
            Self::Diffusion => ModelKind::Diffusion,
            Self::RegressionBaseline => ModelKind::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Derived from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
    /// Write resumable state every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Diffusion,
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

/// Adaptive moment estimation without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub m: DenoiserParams,
    pub v: DenoiserParams,
    pub step: u64,
}

impl Adam {
    pub fn new(like: &DenoiserParams, cfg: &TrainConfig) -> Self {
        let zeros = zeros_like(like);
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            lr: cfg.learning_rate,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.lr / c1) as f32;
        let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                // zero moments give a zero update, so a zero gradient from a
                // fresh state leaves the parameter untouched
                if *m != 0.0 {
                    *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
                }
            }
        }
    }
}

fn zeros_like(p: &DenoiserParams) -> DenoiserParams {
    ParamSet::from_parts(
        p.names().to_vec(),
        p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
    )
}

/// Decay actually applied at optimizer step `step` (1-based): ramps up from
/// 0.1 so early averages are not dominated by the initialization.
pub fn ema_decay_at(decay: f64, step: u64) -> f64 {
    decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

pub fn ema_update(ema: &mut DenoiserParams, params: &DenoiserParams, decay: f64) {
    let d = decay as f32;
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
}

/// Normalized training pairs held in memory.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Per sample `[3, H, W]` reflectance in model space.
    pub r0: Vec<Tensor<f32>>,
    /// Per sample `[K, H, W]` normalized conditions.
    pub y: Vec<Tensor<f32>>,
    pub norm: NormStats,
}

impl TrainingData {
    /// Daytime training split of `manifest`. Normalization statistics are
    /// fitted on it unless `norm` is given.
    pub fn from_manifest(manifest: &Manifest, norm: Option<NormStats>) -> Result<Self> {
        let entries = manifest.training_entries()?;
        if entries.is_empty() {
            return Err(Error::Config("no daytime training samples in the manifest".into()));
        }
        let samples = manifest.load_all(&entries)?;
        let norm = match norm {
            Some(n) => n,
            None => NormStats::fit(samples.iter().map(|s| &s.conditions))?,
        };
        let mut r0 = Vec::with_capacity(samples.len());
        let mut y = Vec::with_capacity(samples.len());
        for s in &samples {
            r0.push(s.target.to_model_tensor());
            y.push(normalize_conditions(&s.conditions, &norm)?);
        }
        Ok(Self { r0, y, norm })
    }

    pub fn len(&self) -> usize {
        self.r0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r0.is_empty()
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub adam: Adam,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn fresh(model: &Denoiser, cfg: &TrainConfig) -> Self {
        let params = model.init_params(rng::derive_seed(cfg.seed, "init", 0));
        Self {
            step: 0,
            ema: params.clone(),
            adam: Adam::new(&params, cfg),
            params,
            losses: Vec::new(),
        }
    }

    /// Write `params.nvck`, `ema.nvck`, `adam_m.nvck`, `adam_v.nvck` and
    /// `loss.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, config: &DenoiserConfig, meta: &CheckpointMeta) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, p) in [
            ("params", &self.params),
            ("ema", &self.ema),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ] {
            let m = CheckpointMeta {
                role: name.into(),
                step: self.step as u64,
                ..meta.clone()
            };
            save_checkpoint(dir.join(format!("{name}.nvck")), p, config, &m)?;
        }
        write_loss_csv(dir.join("loss.csv"), &self.losses)
    }

    pub fn load(dir: impl AsRef<Path>, config: &DenoiserConfig, cfg: &TrainConfig) -> Result<(Self, CheckpointMeta)> {
        let dir = dir.as_ref();
        let (params, meta) = load_checkpoint_expecting(dir.join("params.nvck"), config)?;
        let (ema, _) = load_checkpoint_expecting(dir.join("ema.nvck"), config)?;
        let (m, mm) = load_checkpoint_expecting(dir.join("adam_m.nvck"), config)?;
        let (v, _) = load_checkpoint_expecting(dir.join("adam_v.nvck"), config)?;
        let losses = read_loss_csv(dir.join("loss.csv"))?;
        if mm.step != meta.step || losses.len() as u64 != meta.step {
            return Err(Error::Data(format!("training state in {} is inconsistent", dir.display())));
        }
        let mut adam = Adam::new(&params, cfg);
        adam.m = m;
        adam.v = v;
        adam.step = meta.step;
        Ok((
            Self {
                step: meta.step as usize,
                params,
                ema,
                adam,
                losses,
            },
            meta,
        ))
    }
}

/// Sample order of every epoch, a seeded permutation.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = rng::stream(seed, "shuffle", epoch as u64);
    for i in (1..n).rev() {
        let j = s.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Assemble the batch for 0-based optimizer step `step`.
pub fn make_batch(data: &TrainingData, cfg: &TrainConfig, schedule: &NoiseSchedule, step: usize) -> Batch<f32> {
    let n = data.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let order = epoch_order(cfg.seed, epoch, n);
    let idx = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(n)];
    let pick = |v: &[Tensor<f32>]| {
        let items: Vec<Tensor<f32>> = idx
            .iter()
            .map(|&i| {
                let mut shape = vec![1];
                shape.extend_from_slice(&v[i].shape()[v[i].shape().len() - 3..]);
                Tensor::from_vec(&shape, v[i].data().to_vec())
            })
            .collect();
        Tensor::stack_batch(&items)
    };
    let r0 = pick(&data.r0);
    let y = pick(&data.y);
    let mut s = rng::stream(cfg.seed, "noise", step as u64);
    let t = (0..idx.len()).map(|_| s.gen_range(1..=schedule.steps())).collect();
    let mut eps = Tensor::zeros(r0.shape());
    if cfg.mode == TrainMode::Diffusion {
        fill_normal(&mut s, eps.data_mut());
    }
    Batch { r0, y, t, eps }
}

/// Run optimizer steps until the configured budget is spent, starting
/// from `state`. `on_checkpoint` runs every `checkpoint_every` steps and at
/// the end.
pub fn train_from(
    model: &Denoiser,
    data: &TrainingData,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut state: TrainState,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if model.config().kind != cfg.mode.model_kind() {
        return Err(Error::Config(format!(
            "training mode {:?} does not match model kind {:?}",
            cfg.mode,
            model.config().kind
        )));
    }
    model.check_params(&state.params)?;
    let total = cfg.total_steps(data.len());
    while state.step < total {
        let batch = make_batch(data, cfg, schedule, state.step);
        let (loss, grads) = model.gradient(&state.params, &batch, schedule).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical {
                step: state.step + 1,
                message,
            },
            other => other,
        })?;
        if !grads.all_finite() {
            return Err(Error::Numerical {
                step: state.step + 1,
                message: "non-finite gradient".into(),
            });
        }
        state.adam.update(&mut state.params, &grads);
        state.step += 1;
        ema_update(&mut state.ema, &state.params, ema_decay_at(cfg.ema_decay, state.step as u64));
        state.losses.push(loss);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
            on_checkpoint(&state)?;
        }
    }
    on_checkpoint(&state)?;
    Ok(state)
}

/// Train a fresh diffusion model.
pub fn train(model: &Denoiser, data: &TrainingData, cfg: &TrainConfig, schedule: &NoiseSchedule) -> Result<TrainState> {
    train_from(model, data, cfg, schedule, TrainState::fresh(model, cfg), |_| Ok(()))
}

/// Train the deterministic comparator on the same backbone.
pub fn train_baseline(
    config: &DenoiserConfig,
    data: &TrainingData,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(Denoiser, TrainState)> {
    let model = Denoiser::new(config.as_regression())?;
    let cfg = TrainConfig {
        mode: TrainMode::RegressionBaseline,
        ..cfg.clone()
    };
    let state = train(&model, data, &cfg, schedule)?;
    Ok((model, state))
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss"]).map_err(io)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            rec.get(1)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("{}: malformed loss row", path.display())))
        })
        .collect()
}
