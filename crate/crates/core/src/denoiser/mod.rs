//! Conditional UNet noise predictor.
//!
//! Conditions are concatenated with the noisy reflectance along channels;
//! the timestep enters through a sinusoidal embedding and a learned
//! two-layer projection that adds a per-channel bias inside every residual
//! block. The regression kind drops both the noisy input and the timestep
//! and is trained to output the clean field directly.

mod checkpoint;
mod unet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_batch, NoisePredictor, NoiseSchedule};
use crate::nn::{Init, ParamLayout, ParamSet, Scalar, Tensor};
use crate::rng::{self, Distribution, StandardNormal};
use crate::{Error, Result};
use unet::UNet;

/// Number of reflectance bands predicted.
pub const OUT_CHANNELS: usize = 3;

pub type DenoiserParams = ParamSet<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Noise predictor `eps(r_t, t, y)`.
    Diffusion,
    /// Deterministic comparator `r0(y)`.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: ModelKind,
    /// Width of the normalized condition stack.
    pub cond_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of down/up sampling levels.
    pub depth: usize,
    pub res_blocks_per_level: usize,
    /// Width multiplier per level, `depth + 1` entries; the last one is the bottleneck.
    pub channel_mult: Vec<usize>,
    /// Levels (0 = full resolution, `depth` = bottleneck) carrying self-attention.
    pub attention_levels: Vec<usize>,
    pub attention_heads: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Diffusion,
            cond_channels: crate::grid::CONDITION_CHANNELS,
            out_channels: OUT_CHANNELS,
            base_width: 32,
            depth: 2,
            res_blocks_per_level: 1,
            channel_mult: vec![1, 1, 2],
            attention_levels: vec![2],
            attention_heads: 4,
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        match self.kind {
            ModelKind::Diffusion => self.out_channels + self.cond_channels,
            ModelKind::Regression => self.cond_channels,
        }
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    /// The same backbone configured as the regression comparator.
    pub fn as_regression(&self) -> Self {
        Self {
            kind: ModelKind::Regression,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width < 8 {
            return bad(format!("base_width {} < 8", self.base_width));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.res_blocks_per_level < 1 {
            return bad("res_blocks_per_level must be at least 1".into());
        }
        if self.channel_mult.len() != self.depth + 1 || self.channel_mult.contains(&0) {
            return bad(format!(
                "channel_mult needs {} positive entries, got {:?}",
                self.depth + 1,
                self.channel_mult
            ));
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        for l in 0..=self.depth {
            if self.level_width(l) % self.groups != 0 {
                return bad(format!("level {l} width {} not divisible by {} groups", self.level_width(l), self.groups));
            }
        }
        for &l in &self.attention_levels {
            if l > self.depth {
                return bad(format!("attention level {l} deeper than depth {}", self.depth));
            }
            if self.attention_heads == 0 || self.level_width(l) % self.attention_heads != 0 {
                return bad(format!(
                    "{} heads do not divide width {} at level {l}",
                    self.attention_heads,
                    self.level_width(l)
                ));
            }
        }
        if self.kind == ModelKind::Diffusion && (self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0) {
            return bad(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
        }
        if self.cond_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }
}

/// A built network: configuration, parameter layout and layer graph.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: ParamLayout,
    net: UNet,
}

/// A training batch in model space.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Clean reflectance, `[N, 3, H, W]`, in `[-1, 1]`.
    pub r0: Tensor<T>,
    /// Normalized conditions, `[N, K, H, W]`.
    pub y: Tensor<T>,
    /// Per-element timestep (ignored by the regression kind).
    pub t: Vec<usize>,
    /// Injected noise, same shape as `r0` (ignored by the regression kind).
    pub eps: Tensor<T>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let net = UNet::build(&config, &mut layout);
        Ok(Self { config, layout, net })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_scalars()
    }

    /// Fan-in scaled Gaussian weights, zero biases, unit norm gains; the
    /// output convolution starts at zero so the initial prediction is 0.
    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        self.init_params_as(seed)
    }

    pub fn init_params_as<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut params = self.layout.zeros::<T>();
        let mut stream = rng::stream(seed, "init", 0);
        for (spec, tensor) in self.layout.specs().iter().zip(params.tensors_mut()) {
            match spec.init {
                Init::Zeros => {}
                Init::Ones => tensor.data_mut().fill(T::one()),
                Init::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    for v in tensor.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut stream);
                        *v = T::of((z * std) as f32 as f64);
                    }
                }
            }
        }
        params
    }

    /// Check that `params` has exactly this network's names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, network expects {}",
                params.len(),
                self.layout.len()
            )));
        }
        for (spec, (name, t)) in self.layout.specs().iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.config.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Size(format!("spatial dims {h}x{w} not divisible by {f}")));
        }
        Ok(())
    }

    fn assemble_input<T: Scalar>(&self, r_t: Option<&Tensor<T>>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k, h, w) = y.dims4();
        if k != self.config.cond_channels {
            return Err(Error::Config(format!("{k} condition channels, network expects {}", self.config.cond_channels)));
        }
        self.check_spatial(h, w)?;
        match (self.config.kind, r_t) {
            (ModelKind::Diffusion, Some(r)) => {
                if r.dims4() != (n, self.config.out_channels, h, w) {
                    return Err(Error::Size(format!("noisy field {:?} vs conditions {:?}", r.shape(), y.shape())));
                }
                Ok(Tensor::concat_channels(r, y))
            }
            (ModelKind::Regression, None) => Ok(y.clone()),
            (ModelKind::Diffusion, None) => Err(Error::Config("diffusion model needs a noisy field".into())),
            (ModelKind::Regression, Some(_)) => Err(Error::Config("regression model takes conditions only".into())),
        }
    }

    fn check_t(&self, t: &[usize], n: usize) -> Result<()> {
        if t.len() != n {
            return Err(Error::Size(format!("{} timesteps for batch of {n}", t.len())));
        }
        if t.contains(&0) {
            return Err(Error::Domain("timesteps are 1-based".into()));
        }
        Ok(())
    }

    /// Predicted noise for `(r_t, t, y)`.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, r_t: &Tensor<T>, t: &[usize], y: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.assemble_input(Some(r_t), y)?;
        self.check_t(t, x.dims4().0)?;
        Ok(self.net.forward(params, &x, Some(t)).0)
    }

    /// Regression-kind prediction of the clean field from conditions alone.
    pub fn predict<T: Scalar>(&self, params: &ParamSet<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.assemble_input(None, y)?;
        Ok(self.net.forward(params, &x, None).0)
    }

    /// Mean-squared training loss and its gradient with respect to every
    /// parameter. The diffusion kind regresses the injected noise of
    /// `q_sample(r0, t, eps)`; the regression kind regresses `r0`.
    pub fn gradient<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        batch: &Batch<T>,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, ParamSet<T>)> {
        let n = batch.r0.shape()[0];
        let (x, t, target) = match self.config.kind {
            ModelKind::Diffusion => {
                self.check_t(&batch.t, n)?;
                let r_t = q_sample_batch(&batch.r0, &batch.t, &batch.eps, schedule)?;
                (self.assemble_input(Some(&r_t), &batch.y)?, Some(batch.t.as_slice()), &batch.eps)
            }
            ModelKind::Regression => (self.assemble_input(None, &batch.y)?, None, &batch.r0),
        };
        let (out, cache) = self.net.forward(params, &x, t);
        if out.shape() != target.shape() {
            return Err(Error::Size(format!("prediction {:?} vs target {:?}", out.shape(), target.shape())));
        }
        let count = T::of(out.len() as f64);
        let two = T::of(2.0);
        let mut loss = 0.0;
        let mut gy = Tensor::zeros(out.shape());
        for ((g, &o), &y) in gy.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
            let d = o - y;
            loss += d.to_f64().unwrap().powi(2);
            *g = two * d / count;
        }
        let loss = loss / out.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                message: "non-finite training loss".into(),
            });
        }
        let mut grads = self.layout.zeros::<T>();
        self.net.backward(params, &cache, &gy, &mut grads);
        Ok((loss, grads))
    }

    /// Bind parameters so the network can be used as a [`NoisePredictor`].
    pub fn bind<'a, T: Scalar>(&'a self, params: &'a ParamSet<T>) -> Bound<'a, T> {
        Bound { model: self, params }
    }
}

/// A network together with its parameters.
#[derive(Clone, Copy)]
pub struct Bound<'a, T> {
    pub model: &'a Denoiser,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> NoisePredictor<T> for Bound<'_, T> {
    fn predict_noise(&self, r_t: &Tensor<T>, t: &[usize], y: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.forward(self.params, r_t, t, y)
    }
}

#[cfg(test)]
mod tests;
