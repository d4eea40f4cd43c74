//! Masked image-quality metrics and per-band reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::ReflectanceField;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(pred: &[f32], truth: &[f32], mask: &[bool]) -> Result<usize> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Size(format!(
            "prediction {}, truth {}, mask {} lengths differ",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::Domain("no valid pixels".into())),
        n => Ok(n),
    }
}

fn masked_pairs<'a>(pred: &'a [f32], truth: &'a [f32], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p as f64, t as f64))
}

pub fn mae(pred: &[f32], truth: &[f32], mask: &[bool]) -> Result<f64> {
    let n = check(pred, truth, mask)?;
    Ok(masked_pairs(pred, truth, mask).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64)
}

pub fn mse(pred: &[f32], truth: &[f32], mask: &[bool]) -> Result<f64> {
    let n = check(pred, truth, mask)?;
    Ok(masked_pairs(pred, truth, mask).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64)
}

pub fn rmse(pred: &[f32], truth: &[f32], mask: &[bool]) -> Result<f64> {
    mse(pred, truth, mask).map(f64::sqrt)
}

/// `10 log10(max^2 / mse)`; `+inf` when the images agree exactly.
pub fn psnr(pred: &[f32], truth: &[f32], max_value: f64, mask: &[bool]) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Domain(format!("PSNR peak value {max_value} must be positive")));
    }
    let m = mse(pred, truth, mask)?;
    Ok(psnr_from_mse(m, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Peak value used in PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsnrPeak {
    /// Reflectance range, 1.0.
    #[default]
    Fixed,
    /// Largest valid truth value of each image.
    DataMax,
}

impl PsnrPeak {
    fn value(self, truth: &[f32], mask: &[bool]) -> f64 {
        match self {
            Self::Fixed => 1.0,
            Self::DataMax => truth
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&t, _)| t as f64)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filtering over fully interior windows.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0f64; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..SSIM_WINDOW).map(|k| g[k] * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0f64; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * wo + c]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over 11x11 Gaussian (sigma 1.5) windows lying
/// inside the image. Windows touching an invalid pixel are skipped.
pub fn ssim(pred: &[f32], truth: &[f32], h: usize, w: usize, data_range: f64, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != h * w || truth.len() != h * w || mask.is_some_and(|m| m.len() != h * w) {
        return Err(Error::Size(format!("SSIM inputs do not match {h}x{w}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range {data_range} must be positive")));
    }
    let g = gaussian_window();
    let x: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|img| filter_valid(img, h, w, &g));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let wo = w - SSIM_WINDOW + 1;
    let window_ok = |r: usize, c: usize| match mask {
        None => true,
        Some(m) => (r..r + SSIM_WINDOW).all(|rr| m[rr * w + c..rr * w + c + SSIM_WINDOW].iter().all(|&v| v)),
    };
    let (mut total, mut count) = (0.0, 0usize);
    for (i, ((((&ux, &uy), &vxx), &vyy), &vxy)) in mx.iter().zip(&my).zip(&sxx).zip(&syy).zip(&sxy).enumerate() {
        if !window_ok(i / wo, i % wo) {
            continue;
        }
        let (vx, vy, cov) = (vxx - ux * ux, vyy - uy * uy, vxy - ux * uy);
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("no SSIM window free of invalid pixels".into()));
    }
    Ok(total / count as f64)
}

/// Scores of one predicted tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub n_pixels: usize,
}

/// Per-band scores followed by the pooled score of all three bands.
pub fn score_field(pred: &ReflectanceField, truth: &ReflectanceField, peak: PsnrPeak) -> Result<[Scores; 4]> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::Size("prediction and truth differ in size".into()));
    }
    let (h, w) = (truth.height, truth.width);
    let mask = &truth.valid;
    check(&pred.data, &truth.data, &expand_mask(mask))?;
    let mut rows = [Scores {
        mae: 0.0,
        rmse: 0.0,
        ssim: 0.0,
        psnr: 0.0,
        n_pixels: 0,
    }; 4];
    let (mut abs, mut sq) = (0.0, 0.0);
    for b in 0..3 {
        let (p, t) = (pred.band_plane(b), truth.band_plane(b));
        let m = mse(&p, &t, mask)?;
        let a = mae(&p, &t, mask)?;
        let k = mask.iter().filter(|&&v| v).count();
        abs += a * k as f64;
        sq += m * k as f64;
        rows[b] = Scores {
            mae: a,
            rmse: m.sqrt(),
            ssim: ssim(&p, &t, h, w, 1.0, Some(mask))?,
            psnr: psnr_from_mse(m, peak.value(&t, mask)),
            n_pixels: k,
        };
    }
    let k = rows[0].n_pixels;
    let pooled_mse = sq / (3 * k) as f64;
    rows[3] = Scores {
        mae: abs / (3 * k) as f64,
        rmse: pooled_mse.sqrt(),
        ssim: rows[..3].iter().map(|r| r.ssim).sum::<f64>() / 3.0,
        psnr: psnr_from_mse(pooled_mse, peak.value(&truth.data, &expand_mask(mask))),
        n_pixels: k,
    };
    Ok(rows)
}

fn expand_mask(mask: &[bool]) -> Vec<bool> {
    mask.iter().flat_map(|&m| [m; 3]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub band: String,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// 0.47, 0.65, 0.825 um, then overall.
    pub rows: Vec<ReportRow>,
    pub n_tiles: usize,
}

pub const BAND_LABELS: [&str; 4] = ["0.47", "0.65", "0.825", "overall"];

impl MetricsReport {
    /// Average per-tile scores weighted by valid pixel counts.
    pub fn from_tiles(tiles: &[[Scores; 4]]) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::Data("no tiles to report on".into()));
        }
        let rows = (0..4)
            .map(|b| {
                let total: usize = tiles.iter().map(|t| t[b].n_pixels).sum();
                let avg = |f: fn(&Scores) -> f64| {
                    tiles.iter().map(|t| f(&t[b]) * t[b].n_pixels as f64).sum::<f64>() / total as f64
                };
                ReportRow {
                    band: BAND_LABELS[b].to_string(),
                    mae: avg(|s| s.mae),
                    rmse: avg(|s| s.rmse),
                    ssim: avg(|s| s.ssim),
                    psnr: avg(|s| s.psnr),
                    n_pixels: total,
                }
            })
            .collect();
        Ok(Self {
            rows,
            n_tiles: tiles.len(),
        })
    }

    pub fn overall(&self) -> &ReportRow {
        &self.rows[3]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluate predictions for every entry of a test split. `predict` returns
/// `Ok(None)` when a tile has no prediction, which is a data error.
pub fn evaluate_fields<'a>(
    pairs: impl IntoIterator<Item = (&'a str, Option<&'a ReflectanceField>, &'a ReflectanceField)>,
    peak: PsnrPeak,
) -> Result<MetricsReport> {
    let mut tiles = Vec::new();
    for (name, pred, truth) in pairs {
        let pred = pred.ok_or_else(|| Error::Data(format!("no prediction for tile {name}")))?;
        tiles.push(score_field(pred, truth, peak)?);
    }
    MetricsReport::from_tiles(&tiles)
}
