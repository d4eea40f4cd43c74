//! Noise schedule, closed-form forward corruption, the noise-prediction
//! objective and ancestral reverse sampling.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `R_0` is the clean
//! field. Tables are stored in `f64`; arithmetic on fields happens in the
//! tensor's scalar type.

use serde::{Deserialize, Serialize};

use crate::nn::{Scalar, Tensor};
use crate::rng::{self, Distribution, StandardNormal};
use crate::{Error, Result};

/// Parameters of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Reverse-step variance, identical to `beta`.
    sigma2: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            spec: ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            sigma2: beta.clone(),
            sigma: beta.iter().map(|b| b.sqrt()).collect(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::Domain(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `r_t = sqrt(abar_t) r0 + sqrt(1 - abar_t) eps` for a single timestep.
pub fn q_sample<T: Scalar>(r0: &[T], t: usize, eps: &[T], schedule: &NoiseSchedule) -> Result<Vec<T>> {
    let i = schedule.idx(t)?;
    if r0.len() != eps.len() {
        return Err(Error::Size(format!("r0 has {} values, eps {}", r0.len(), eps.len())));
    }
    let ab = schedule.alpha_bar[i];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(r0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Batched [`q_sample`] with one timestep per batch element.
pub fn q_sample_batch<T: Scalar>(r0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    check_batch(r0, t, eps)?;
    let mut out = Tensor::zeros(r0.shape());
    for (n, &tn) in t.iter().enumerate() {
        let v = q_sample(r0.item(n), tn, eps.item(n), schedule)?;
        out.item_mut(n).copy_from_slice(&v);
    }
    Ok(out)
}

fn check_batch<T: Scalar>(a: &Tensor<T>, t: &[usize], b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Size(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.shape().first() != Some(&t.len()) {
        return Err(Error::Size(format!("{} timesteps for batch {:?}", t.len(), a.shape())));
    }
    Ok(())
}

/// `r0_hat = (r_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`
pub fn predict_x0<T: Scalar>(r_t: &[T], t: usize, eps_hat: &[T], schedule: &NoiseSchedule) -> Result<Vec<T>> {
    let i = schedule.idx(t)?;
    let ab = schedule.alpha_bar[i];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(r_t.iter().zip(eps_hat).map(|(&x, &e)| (x - b * e) / a).collect())
}

/// One ancestral step given the predicted noise:
/// `r_{t-1} = (r_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step<T: Scalar>(r_t: &[T], t: usize, eps_hat: &[T], z: &[T], schedule: &NoiseSchedule) -> Result<Vec<T>> {
    let i = schedule.idx(t)?;
    if r_t.len() != eps_hat.len() || r_t.len() != z.len() {
        return Err(Error::Size("reverse step operands differ in length".into()));
    }
    let alpha = schedule.alpha[i];
    let inv_sqrt_alpha = T::of(1.0 / alpha.sqrt());
    let coef = T::of((1.0 - alpha) / (1.0 - schedule.alpha_bar[i]).sqrt());
    let sigma = T::of(schedule.sigma[i]);
    Ok(r_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect())
}

/// Anything that predicts the injected noise from `(r_t, t, y)`.
pub trait NoisePredictor<T: Scalar> {
    /// `r_t: [N, 3, H, W]`, `t: [N]`, `y: [N, K, H, W]` -> `[N, 3, H, W]`.
    fn predict_noise(&self, r_t: &Tensor<T>, t: &[usize], y: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Mean squared error between the injected and the predicted noise.
pub fn training_loss<T: Scalar>(
    model: &impl NoisePredictor<T>,
    r0: &Tensor<T>,
    y: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let r_t = q_sample_batch(r0, t, eps, schedule)?;
    let eps_hat = model.predict_noise(&r_t, t, y)?;
    if eps_hat.shape() != eps.shape() {
        return Err(Error::Size(format!("prediction {:?} vs noise {:?}", eps_hat.shape(), eps.shape())));
    }
    Ok(mean_squared_error(eps.data(), eps_hat.data()))
}

pub(crate) fn mean_squared_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// Reverse step for a whole batch at a shared timestep, predicting noise with `model`.
pub fn p_sample_step<T: Scalar>(
    r_t: &Tensor<T>,
    t: usize,
    y: &Tensor<T>,
    z: &Tensor<T>,
    model: &impl NoisePredictor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    schedule.idx(t)?;
    let n = r_t.shape()[0];
    let eps_hat = model.predict_noise(r_t, &vec![t; n], y)?;
    let out = reverse_step(r_t.data(), t, eps_hat.data(), z.data(), schedule)?;
    Ok(Tensor::from_vec(r_t.shape(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOptions {
    /// Clamp the implied clean estimate to `[-1, 1]` at every step and
    /// re-derive the noise from it before stepping.
    pub clamp_x0: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { clamp_x0: true }
    }
}

/// Ancestral sampling of one field per seed, batched.
///
/// `y` holds one condition stack `[1, K, H, W]` shared by every seed. Each
/// seed owns its own random stream, so a member's output does not depend on
/// which other seeds share the batch. Returns model-space fields
/// `[seeds.len(), 3, H, W]`.
pub fn sample_model_space(
    model: &impl NoisePredictor<f32>,
    y: &Tensor<f32>,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    options: SamplerOptions,
) -> Result<Tensor<f32>> {
    let (yn, k, h, w) = y.dims4();
    if yn != 1 {
        return Err(Error::Size(format!("expected a single condition stack, got batch {yn}")));
    }
    let n = seeds.len();
    let per = 3 * h * w;
    let mut streams: Vec<_> = seeds.iter().map(|&s| rng::stream(s, "sample", 0)).collect();
    let mut r = Tensor::zeros(&[n, 3, h, w]);
    for (i, s) in streams.iter_mut().enumerate() {
        rng::fill_normal(s, r.item_mut(i));
    }
    let ys = Tensor::from_vec(&[n, k, h, w], y.data().repeat(n));
    let mut z = vec![0f32; per];
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = model.predict_noise(&r, &vec![t; n], &ys)?;
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
        let mut next = Tensor::zeros(r.shape());
        for (i, s) in streams.iter_mut().enumerate() {
            if t > 1 {
                for v in z.iter_mut() {
                    let x: f64 = StandardNormal.sample(s);
                    *v = x as f32;
                }
            } else {
                z.fill(0.0);
            }
            let rt = r.item(i);
            let mut e = eps_hat.item(i).to_vec();
            if options.clamp_x0 {
                for (ev, &x) in e.iter_mut().zip(rt) {
                    let x0 = ((x - sb * *ev) / sa).clamp(-1.0, 1.0);
                    *ev = (x - sa * x0) / sb;
                }
            }
            let out = reverse_step(rt, t, &e, &z, schedule)?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: t,
                    message: format!("non-finite value in member {i}"),
                });
            }
            next.item_mut(i).copy_from_slice(&out);
        }
        r = next;
    }
    Ok(r)
}

/// Map model space `[-1, 1]` to reflectance `[0, 1]`, clamping.
pub fn to_reflectance(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Map reflectance `[0, 1]` to model space `[-1, 1]`.
pub fn to_model_space(r: f32) -> f32 {
    2.0 * r - 1.0
}
