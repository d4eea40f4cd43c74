//! Multi-member retrieval, ensemble statistics and truth coverage.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Split};
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{sample_model_space, NoiseSchedule, SamplerOptions};
use crate::grid::{normalize_conditions, NormStats, ReflectanceField};
use crate::metrics::{score_field, MetricsReport, PsnrPeak};
use crate::nn::Tensor;
use crate::rng::derive_seed;
use crate::{Error, Result};

pub const DEFAULT_MEMBERS: usize = 30;
pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [1, 5, 10, 20, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleOptions {
    /// Members sampled together in one network batch.
    pub member_batch: usize,
    /// Spread member batches over the rayon pool.
    pub parallel: bool,
    pub sampler: SamplerOptions,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            member_batch: 1,
            parallel: true,
            sampler: SamplerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub members: Vec<ReflectanceField>,
    pub mean: ReflectanceField,
    /// Population standard deviation across members.
    pub std: ReflectanceField,
    pub member_seeds: Vec<u64>,
}

impl EnsembleResult {
    /// Statistics reduced in member order, in f64.
    pub fn from_members(members: Vec<ReflectanceField>, member_seeds: Vec<u64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        if members.len() != member_seeds.len() {
            return Err(Error::Size(format!(
                "{} members but {} seeds",
                members.len(),
                member_seeds.len()
            )));
        }
        let (h, w) = (first.height, first.width);
        if members.iter().any(|m| (m.height, m.width) != (h, w) || m.data.len() != h * w * 3) {
            return Err(Error::Size("ensemble members differ in shape".into()));
        }
        let n = members.len() as f64;
        let len = first.data.len();
        let mut mean = vec![0f64; len];
        for m in &members {
            for (a, &v) in mean.iter_mut().zip(&m.data) {
                *a += v as f64;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0f64; len];
        for m in &members {
            for ((a, &v), &mu) in var.iter_mut().zip(&m.data).zip(&mean) {
                *a += (v as f64 - mu).powi(2);
            }
        }
        let valid: Vec<bool> = (0..h * w).map(|p| members.iter().all(|m| m.valid[p])).collect();
        let field = |data: Vec<f32>| ReflectanceField {
            height: h,
            width: w,
            data,
            valid: valid.clone(),
        };
        let std = field(var.iter().map(|v| (v / n).sqrt() as f32).collect());
        let mean = field(mean.iter().map(|&v| v as f32).collect());
        Ok(Self {
            members,
            mean,
            std,
            member_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn member_seeds(base_seed: u64, n_members: usize) -> Vec<u64> {
    (0..n_members as u64).map(|i| derive_seed(base_seed, "member", i)).collect()
}

/// Sample one reflectance field per seed for conditions `y_norm` `[1, K, H, W]`.
///
/// Each member depends only on its own seed, so the grouping into batches
/// and the thread schedule do not change any output bit.
pub fn sample_members(
    model: &Denoiser,
    params: &DenoiserParams,
    y_norm: &Tensor<f32>,
    valid: &[bool],
    schedule: &NoiseSchedule,
    seeds: &[u64],
    options: &EnsembleOptions,
) -> Result<Vec<ReflectanceField>> {
    let (_, _, h, w) = y_norm.dims4();
    if valid.len() != h * w {
        return Err(Error::Size(format!("mask of {} pixels for a {h}x{w} grid", valid.len())));
    }
    let bound = model.bind(params);
    let chunk = options.member_batch.max(1);
    let run = |group: &[u64]| -> Result<Vec<ReflectanceField>> {
        let t = sample_model_space(&bound, y_norm, schedule, group, options.sampler)?;
        Ok((0..group.len())
            .map(|i| ReflectanceField::from_model_tensor(&t, i, valid.to_vec()))
            .collect())
    };
    let groups: Vec<Vec<ReflectanceField>> = if options.parallel {
        seeds.par_chunks(chunk).map(run).collect::<Result<_>>()?
    } else {
        seeds.chunks(chunk).map(run).collect::<Result<_>>()?
    };
    Ok(groups.into_iter().flatten().collect())
}

/// Draw `n_members` members with seeds `derive(base_seed, "member", i)`.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_ensemble(
    model: &Denoiser,
    params: &DenoiserParams,
    y_norm: &Tensor<f32>,
    valid: &[bool],
    schedule: &NoiseSchedule,
    n_members: usize,
    base_seed: u64,
    options: &EnsembleOptions,
) -> Result<EnsembleResult> {
    if n_members < 1 {
        return Err(Error::Config("n_members must be at least 1".into()));
    }
    let seeds = member_seeds(base_seed, n_members);
    let members = sample_members(model, params, y_norm, valid, schedule, &seeds, options)?;
    EnsembleResult::from_members(members, seeds)
}

/// Counts of valid truth values inside the member envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoverageCounts {
    pub inside: [usize; 3],
    pub n_pixels: usize,
}

impl CoverageCounts {
    pub fn band(&self, b: usize) -> f64 {
        self.inside[b] as f64 / self.n_pixels as f64
    }

    /// All three bands pooled.
    pub fn pooled(&self) -> f64 {
        self.inside.iter().sum::<usize>() as f64 / (3 * self.n_pixels) as f64
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.inside.iter_mut().zip(other.inside) {
            *a += b;
        }
        self.n_pixels += other.n_pixels;
    }
}

fn envelope_check(members: &[ReflectanceField], truth: &ReflectanceField) -> Result<()> {
    if members.is_empty() {
        return Err(Error::Config("coverage needs at least one member".into()));
    }
    if members.iter().any(|m| m.data.len() != truth.data.len()) || truth.valid.len() * 3 != truth.data.len() {
        return Err(Error::Size("members and truth differ in shape".into()));
    }
    Ok(())
}

fn inside(members: &[ReflectanceField], truth: &ReflectanceField, k: usize) -> bool {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for m in members {
        lo = lo.min(m.data[k]);
        hi = hi.max(m.data[k]);
    }
    lo <= truth.data[k] && truth.data[k] <= hi
}

/// Envelope hit counts over the valid pixels of `truth`.
pub fn coverage_counts(members: &[ReflectanceField], truth: &ReflectanceField) -> Result<CoverageCounts> {
    envelope_check(members, truth)?;
    let mut c = CoverageCounts::default();
    for (p, _) in truth.valid.iter().enumerate().filter(|(_, &v)| v) {
        c.n_pixels += 1;
        for b in 0..3 {
            c.inside[b] += inside(members, truth, p * 3 + b) as usize;
        }
    }
    if c.n_pixels == 0 {
        return Err(Error::Domain("no valid pixels".into()));
    }
    Ok(c)
}

/// Fraction of valid truth values within `[min, max]` of the members,
/// bounds inclusive. Returns per-band fractions and the pooled fraction.
pub fn coverage_proportion(members: &[ReflectanceField], truth: &ReflectanceField) -> Result<([f64; 3], f64)> {
    let c = coverage_counts(members, truth)?;
    Ok(([c.band(0), c.band(1), c.band(2)], c.pooled()))
}

/// One `H*W` plane per band, true where the truth lies outside the envelope.
pub fn coverage_mask(members: &[ReflectanceField], truth: &ReflectanceField) -> Result<[Vec<bool>; 3]> {
    envelope_check(members, truth)?;
    let hw = truth.valid.len();
    Ok([0, 1, 2].map(|b| (0..hw).map(|p| !inside(members, truth, p * 3 + b)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    /// Pooled across bands and tiles.
    pub coverage: f64,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes[0] < 1 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sweep sizes {sizes:?} must be ascending and at least 1")));
    }
    Ok(())
}

/// Score the mean of the first `k` members of every tile for each size `k`.
/// `tiles` pairs each tile's member sequence with its truth.
pub fn sweep_from_members(
    tiles: &[(&[ReflectanceField], &ReflectanceField)],
    sizes: &[usize],
    peak: PsnrPeak,
) -> Result<Vec<SweepRow>> {
    check_sizes(sizes)?;
    let largest = *sizes.last().unwrap();
    if let Some((m, _)) = tiles.iter().find(|(m, _)| m.len() < largest) {
        return Err(Error::Config(format!("sweep needs {largest} members, a tile has {}", m.len())));
    }
    sizes
        .iter()
        .map(|&k| {
            let mut scores = Vec::with_capacity(tiles.len());
            let mut cov = CoverageCounts::default();
            for (members, truth) in tiles {
                let prefix = &members[..k];
                let mean = EnsembleResult::from_members(prefix.to_vec(), vec![0; k])?.mean;
                scores.push(score_field(&mean, truth, peak)?);
                cov.merge(&coverage_counts(prefix, truth)?);
            }
            let report = MetricsReport::from_tiles(&scores)?;
            let o = report.overall();
            Ok(SweepRow {
                size: k,
                mae: o.mae,
                rmse: o.rmse,
                ssim: o.ssim,
                psnr: o.psnr,
                coverage: cov.pooled(),
            })
        })
        .collect()
}

/// Per-tile base seed, keyed by the scene seed so it does not depend on
/// manifest order.
pub fn tile_seed(base_seed: u64, scene_seed: u64) -> u64 {
    derive_seed(base_seed, "tile", scene_seed)
}

/// Sample `max(sizes)` members for every test tile of `manifest` and score
/// nested prefixes.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_size_sweep(
    model: &Denoiser,
    params: &DenoiserParams,
    norm: &NormStats,
    manifest: &Manifest,
    schedule: &NoiseSchedule,
    sizes: &[usize],
    base_seed: u64,
    options: &EnsembleOptions,
) -> Result<Vec<SweepRow>> {
    check_sizes(sizes)?;
    let n = *sizes.last().unwrap();
    let entries = manifest.split(Split::Test);
    if entries.is_empty() {
        return Err(Error::Data("manifest has no test tiles".into()));
    }
    let mut tiles = Vec::with_capacity(entries.len());
    for e in entries {
        let s = manifest.load(e)?;
        let y = normalize_conditions(&s.conditions, norm)?;
        let ens = retrieve_ensemble(
            model,
            params,
            &y,
            &s.conditions.valid,
            schedule,
            n,
            tile_seed(base_seed, e.seed),
            options,
        )?;
        tiles.push((ens.members, s.target));
    }
    let refs: Vec<_> = tiles.iter().map(|(m, t)| (m.as_slice(), t)).collect();
    sweep_from_members(&refs, sizes, PsnrPeak::Fixed)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(err)
}
