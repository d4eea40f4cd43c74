//! The pipeline stages behind the command-line tool: synthesize, train,
//! retrieve, evaluate, compose RGB and adjust to the DNB passband.
//!
//! Every command refuses to replace existing outputs unless `force` is set.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_dataset, Manifest, ManifestEntry, Split, MANIFEST_NAME};
use crate::denoiser::{load_checkpoint, CheckpointMeta, Denoiser, DenoiserParams, ModelKind};
use crate::diffusion::NoiseSchedule;
use crate::dnb::{dnb_reflectance, merge_bands, DnbCurves, LunarGeometry};
use crate::ensemble::{
    coverage_counts, sample_members, sweep_from_members, tile_seed, write_sweep_csv, CoverageCounts, EnsembleResult,
    SweepRow, member_seeds,
};
use crate::grid::{
    normalize_conditions, read_tile, tile_partition, tile_stitch, write_tile, ConditionStack, NormStats, RasterTile,
    ReflectanceField, SceneGeometry,
};
use crate::metrics::{score_field, MetricsReport};
use crate::rgb::write_rgb_png;
use crate::train::{train_from, TrainMode, TrainState, TrainingData};
use crate::{Error, Result};

pub const MEAN_FILE: &str = "mean.nvt1";
pub const STD_FILE: &str = "std.nvt1";
pub const RADIANCE_CHANNEL: &str = "dnb_radiance";
pub const DNB_REFLECTANCE_CHANNEL: &str = "dnb_reflectance";
pub const DNB_ADJUSTED_CHANNEL: &str = "dnb_adjusted";

pub fn member_file(i: usize) -> String {
    format!("member_{i:02}.nvt1")
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        ))
    }
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest> {
    Manifest::read(data_dir.join(MANIFEST_NAME))
}

/// Write the synthetic dataset into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    refuse_existing(&out.join(MANIFEST_NAME), force)?;
    create_dir(out)?;
    let spec = cfg.dataset_spec();
    info!("synthesizing {} tiles of {}x{} into {}", spec.n, spec.tile_size, spec.tile_size, out.display());
    generate_dataset(&spec, out)
}

/// Train a model of kind `mode` on the daytime training split in
/// `data_dir`. Resumable state is written to `out`; intermediate states
/// are also kept under `out/steps/`.
pub fn cmd_train(cfg: &RunConfig, mode: TrainMode, data_dir: &Path, out: &Path, force: bool, resume: bool) -> Result<TrainState> {
    require_dir(data_dir)?;
    let manifest = read_manifest(data_dir)?;
    let model = Denoiser::new(cfg.denoiser_config(mode))?;
    let tcfg = cfg.train_config(mode);
    let schedule = cfg.schedule.build()?;
    let existing = out.join("params.nvck").exists();
    let (state, norm) = if resume && existing {
        let (state, meta) = TrainState::load(out, model.config(), &tcfg)?;
        let norm = meta.norm.ok_or_else(|| Error::Format("checkpoint lacks normalization statistics".into()))?;
        info!("resuming {:?} training at step {}", mode, state.step);
        (state, Some(norm))
    } else {
        refuse_existing(&out.join("params.nvck"), force)?;
        (TrainState::fresh(&model, &tcfg), None)
    };
    create_dir(out)?;
    let data = TrainingData::from_manifest(&manifest, norm)?;
    let meta = CheckpointMeta {
        role: String::new(),
        step: 0,
        schedule: Some(cfg.schedule),
        norm: Some(data.norm.clone()),
    };
    let total = tcfg.total_steps(data.len());
    info!("training {:?} on {} samples for {} steps", mode, data.len(), total);
    train_from(&model, &data, &tcfg, &schedule, state, |s| {
        info!("step {}/{} loss {:.5}", s.step, total, s.losses.last().copied().unwrap_or(f64::NAN));
        s.save(out, model.config(), &meta)?;
        if s.step < total {
            s.save(out.join("steps").join(format!("{:06}", s.step)), model.config(), &meta)?;
        }
        Ok(())
    })
}

/// A trained network ready for retrieval.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Denoiser,
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
}

impl LoadedModel {
    /// Accepts a checkpoint file or a training directory (its `ema.nvck`).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join("ema.nvck") } else { path.to_path_buf() };
        let (params, config, meta) = load_checkpoint(&file)?;
        let missing = |what: &str| Error::Format(format!("{}: checkpoint has no {what}", file.display()));
        let schedule = meta.schedule.ok_or_else(|| missing("noise schedule"))?.build()?;
        let norm = meta.norm.ok_or_else(|| missing("normalization statistics"))?;
        let model = Denoiser::new(config)?;
        model.check_params(&params)?;
        Ok(Self {
            model,
            params,
            schedule,
            norm,
        })
    }

    /// Members for one condition stack. The regression comparator yields a
    /// single deterministic member whatever `n_members` is.
    pub fn retrieve(&self, cfg: &RunConfig, cond: &ConditionStack, n_members: usize, base_seed: u64) -> Result<EnsembleResult> {
        let y = normalize_conditions(cond, &self.norm)?;
        if self.model.config().kind == ModelKind::Regression {
            let out = self.model.predict(&self.params, &y)?;
            let field = ReflectanceField::from_model_tensor(&out, 0, cond.valid.clone());
            return EnsembleResult::from_members(vec![field], vec![0]);
        }
        if n_members < 1 {
            return Err(Error::Config("n_members must be at least 1".into()));
        }
        let seeds = member_seeds(base_seed, n_members);
        let members = sample_members(&self.model, &self.params, &y, &cond.valid, &self.schedule, &seeds, &cfg.ensemble)?;
        EnsembleResult::from_members(members, seeds)
    }
}

fn write_ensemble(dir: &Path, ens: &EnsembleResult, like: &RasterTile) -> Result<()> {
    create_dir(dir)?;
    let tile = |f: &ReflectanceField| f.to_tile(like.bbox, like.timestamp, like.resolution_km);
    for (i, m) in ens.members.iter().enumerate() {
        write_tile(&tile(m), dir.join(member_file(i)))?;
    }
    write_tile(&tile(&ens.mean), dir.join(MEAN_FILE))?;
    // written last: its presence marks a complete tile
    write_tile(&tile(&ens.std), dir.join(STD_FILE))
}

/// Name of the prediction directory of a manifest entry.
pub fn prediction_name(entry: &ManifestEntry) -> String {
    Path::new(&entry.cond_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.cond_path.clone())
}

/// What to retrieve from.
#[derive(Debug, Clone, PartialEq)]
pub enum RetrieveInput {
    /// Every test tile of a dataset directory.
    Dataset(PathBuf),
    /// One condition file. With `stitch`, it is cut into model-sized tiles
    /// with the given stride and the results are reassembled.
    Scene { path: PathBuf, stitch: Option<usize> },
}

/// Retrieve ensembles and write `member_XX.nvt1`, `mean.nvt1` and
/// `std.nvt1`. For a dataset each test tile gets its own subdirectory of
/// `out`; with `resume`, tiles already complete are kept.
pub fn cmd_retrieve(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &RetrieveInput,
    out: &Path,
    n_members: usize,
    force: bool,
    resume: bool,
) -> Result<()> {
    let loaded = LoadedModel::load(checkpoint)?;
    let base = cfg.retrieve_seed();
    match input {
        RetrieveInput::Dataset(data_dir) => {
            require_dir(data_dir)?;
            let manifest = read_manifest(data_dir)?;
            let entries = manifest.split(Split::Test);
            if entries.is_empty() {
                return Err(Error::Data("manifest has no test tiles".into()));
            }
            create_dir(out)?;
            for (k, e) in entries.iter().enumerate() {
                let dir = out.join(prediction_name(e));
                if resume && dir.join(STD_FILE).exists() {
                    continue;
                }
                refuse_existing(&dir.join(STD_FILE), force)?;
                let cond_tile = read_tile(manifest.resolve(&e.cond_path))?;
                let cond = ConditionStack::from_tile(&cond_tile)?;
                let ens = loaded.retrieve(cfg, &cond, n_members, tile_seed(base, e.seed))?;
                write_ensemble(&dir, &ens, &cond_tile)?;
                info!("retrieved tile {}/{} ({})", k + 1, entries.len(), prediction_name(e));
            }
            Ok(())
        }
        RetrieveInput::Scene { path, stitch } => {
            refuse_existing(&out.join(STD_FILE), force)?;
            let scene = read_tile(path)?;
            let ens = match stitch {
                None => loaded.retrieve(cfg, &ConditionStack::from_tile(&scene)?, n_members, tile_seed(base, 0))?,
                Some(stride) => retrieve_stitched(cfg, &loaded, &scene, *stride, n_members, base)?,
            };
            write_ensemble(out, &ens, &scene)
        }
    }
}

/// Retrieve every tile of a scene and stitch each member back to the
/// scene grid. Statistics are recomputed from the stitched members.
pub fn retrieve_stitched(
    cfg: &RunConfig,
    loaded: &LoadedModel,
    scene: &RasterTile,
    stride: usize,
    n_members: usize,
    base_seed: u64,
) -> Result<EnsembleResult> {
    let tiles = tile_partition(scene, cfg.dataset.tile_size, stride)?;
    let geom = SceneGeometry::of(scene);
    let mut per_tile = Vec::with_capacity(tiles.len());
    for (k, t) in tiles.iter().enumerate() {
        let ens = loaded.retrieve(cfg, &ConditionStack::from_tile(t)?, n_members, tile_seed(base_seed, k as u64))?;
        per_tile.push(ens);
    }
    let n = per_tile[0].len();
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let parts: Vec<RasterTile> = per_tile
            .iter()
            .zip(&tiles)
            .map(|(e, t)| e.members[i].to_tile(t.bbox, t.timestamp, t.resolution_km))
            .collect();
        members.push(ReflectanceField::from_tile(&tile_stitch(&parts, &geom)?)?);
    }
    EnsembleResult::from_members(members, per_tile[0].member_seeds.clone())
}

/// Load members `member_00.nvt1, member_01.nvt1, ...` of one prediction.
pub fn read_members(dir: &Path) -> Result<Vec<ReflectanceField>> {
    let mut out = Vec::new();
    while dir.join(member_file(out.len())).is_file() {
        out.push(ReflectanceField::from_tile(&read_tile(dir.join(member_file(out.len())))?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub size: usize,
    #[serde(rename = "r_0.47")]
    pub r047: f64,
    #[serde(rename = "r_0.65")]
    pub r065: f64,
    #[serde(rename = "r_0.825")]
    pub r0825: f64,
    pub pooled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Scores of `mean.nvt1` against truth.
    pub report: MetricsReport,
    pub sweep: Vec<SweepRow>,
    pub coverage: Vec<CoverageRow>,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const COVERAGE_CSV: &str = "coverage.csv";

/// Score predictions in `pred_dir` against the test split of `data_dir`.
/// Sweep sizes default to the configured ones that do not exceed the
/// member count of every tile.
pub fn cmd_evaluate(cfg: &RunConfig, data_dir: &Path, pred_dir: &Path, out: &Path, sizes: Option<&[usize]>, force: bool) -> Result<Evaluation> {
    require_dir(data_dir)?;
    require_dir(pred_dir)?;
    for f in [METRICS_CSV, SWEEP_CSV, COVERAGE_CSV] {
        refuse_existing(&out.join(f), force)?;
    }
    let manifest = read_manifest(data_dir)?;
    let entries = manifest.split(Split::Test);
    let mut tiles = Vec::with_capacity(entries.len());
    let mut scores = Vec::with_capacity(entries.len());
    for e in &entries {
        let dir = pred_dir.join(prediction_name(e));
        let name = prediction_name(e);
        if !dir.join(MEAN_FILE).is_file() {
            return Err(Error::Data(format!("no prediction for tile {name}")));
        }
        let truth = ReflectanceField::from_tile(&read_tile(manifest.resolve(&e.target_path))?)?;
        let mean = ReflectanceField::from_tile(&read_tile(dir.join(MEAN_FILE))?)?;
        scores.push(score_field(&mean, &truth, cfg.psnr_peak)?);
        let members = read_members(&dir)?;
        if members.is_empty() {
            return Err(Error::Data(format!("no members for tile {name}")));
        }
        tiles.push((members, truth));
    }
    let report = MetricsReport::from_tiles(&scores)?;
    let available = tiles.iter().map(|(m, _)| m.len()).min().unwrap_or(0);
    let sizes: Vec<usize> = match sizes {
        Some(s) => s.to_vec(),
        None => cfg.sweep_sizes.iter().copied().filter(|&k| k <= available).collect(),
    };
    let refs: Vec<_> = tiles.iter().map(|(m, t)| (m.as_slice(), t)).collect();
    let sweep = sweep_from_members(&refs, &sizes, cfg.psnr_peak)?;
    let coverage = sizes
        .iter()
        .map(|&k| {
            let mut c = CoverageCounts::default();
            for (m, t) in &refs {
                c.merge(&coverage_counts(&m[..k], t)?);
            }
            Ok(CoverageRow {
                size: k,
                r047: c.band(0),
                r065: c.band(1),
                r0825: c.band(2),
                pooled: c.pooled(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    report.write_csv(out.join(METRICS_CSV))?;
    write_sweep_csv(out.join(SWEEP_CSV), &sweep)?;
    let path = out.join(COVERAGE_CSV);
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for r in &coverage {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Evaluation {
        report,
        sweep,
        coverage,
    })
}

pub fn cmd_rgb(tile: &Path, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    write_rgb_png(&read_tile(tile)?, out)
}

/// Inputs of the DNB adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct DnbArgs {
    pub reflectance: PathBuf,
    pub radiance: PathBuf,
    pub curves: PathBuf,
    pub lunar_zenith_deg: f64,
    /// Band-integrated lunar irradiance (W m^-2).
    pub irradiance: f64,
}

/// Write a tile with `dnb_reflectance` from the observed radiance and
/// `dnb_adjusted` from the retrieved 0.65 and 0.825 um reflectance.
/// Returns the band weights `(w_065, w_0825)`.
pub fn cmd_dnb(args: &DnbArgs, out: &Path, force: bool) -> Result<(f64, f64)> {
    refuse_existing(out, force)?;
    let geometry = LunarGeometry::new(args.lunar_zenith_deg)?;
    geometry.cos_zenith()?;
    let curves = DnbCurves::read_dir(&args.curves, args.irradiance)?;
    let (w065, w0825) = curves.weights()?;
    let refl = read_tile(&args.reflectance)?;
    let field = ReflectanceField::from_tile(&refl)?;
    let rad = read_tile(&args.radiance)?;
    let ch = match rad.channel_index(RADIANCE_CHANNEL) {
        Some(c) => c,
        None if rad.num_channels() == 1 => 0,
        None => return Err(Error::Data(format!("radiance tile has no {RADIANCE_CHANNEL} channel"))),
    };
    if (rad.height, rad.width) != (refl.height, refl.width) {
        return Err(Error::Size("radiance and reflectance tiles differ in size".into()));
    }
    let adjusted = merge_bands(&field.band_plane(1), &field.band_plane(2), w065, w0825)?;
    let mut tile = RasterTile::filled(
        refl.height,
        refl.width,
        &[DNB_REFLECTANCE_CHANNEL, DNB_ADJUSTED_CHANNEL],
        0.0,
        refl.bbox,
        refl.timestamp,
        refl.resolution_km,
    );
    for p in 0..refl.num_pixels() {
        let r = rad.data[p * rad.num_channels() + ch] as f64;
        tile.data[p * 2] = dnb_reflectance(r, curves.lunar.adjusted, geometry)? as f32;
        tile.data[p * 2 + 1] = adjusted[p];
        tile.valid_mask[p] = refl.valid_mask[p] && rad.valid_mask[p];
    }
    write_tile(&tile, out)?;
    Ok((w065, w0825))
}
