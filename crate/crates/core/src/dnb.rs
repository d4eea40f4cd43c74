//! Lunar top-of-atmosphere reflectance for the day/night band and the
//! spectral adjustment of retrieved reflectance to the DNB passband.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A tabulated curve on a strictly increasing wavelength grid (um).
/// Outside `[first, last]` the curve is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResponse {
    pub band_name: String,
    pub wavelengths: Vec<f64>,
    pub response: Vec<f64>,
}

fn check_grid(what: &str, wl: &[f64], values: &[f64]) -> Result<()> {
    if wl.len() != values.len() {
        return Err(Error::Size(format!(
            "{what}: {} wavelengths but {} values",
            wl.len(),
            values.len()
        )));
    }
    if wl.len() < 2 {
        return Err(Error::Domain(format!("{what}: a curve needs at least two points")));
    }
    if wl.iter().any(|w| !w.is_finite()) || wl.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Domain(format!("{what}: wavelengths must be finite and strictly increasing")));
    }
    Ok(())
}

impl SpectralResponse {
    pub fn new(band_name: impl Into<String>, wavelengths: Vec<f64>, response: Vec<f64>) -> Result<Self> {
        let band_name = band_name.into();
        check_grid(&band_name, &wavelengths, &response)?;
        if let Some(r) = response.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Domain(format!("{band_name}: response {r} outside [0, 1]")));
        }
        Ok(Self {
            band_name,
            wavelengths,
            response,
        })
    }

    /// Response 1 on `[lo, hi]`, 0 elsewhere.
    pub fn rectangular(band_name: impl Into<String>, lo: f64, hi: f64) -> Result<Self> {
        Self::new(band_name, vec![lo, hi], vec![1.0, 1.0])
    }

    pub fn support(&self) -> (f64, f64) {
        (self.wavelengths[0], *self.wavelengths.last().unwrap())
    }

    pub fn read_csv(band_name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let (wl, v) = read_curve_csv(path)?;
        Self::new(band_name, wl, v)
    }
}

/// Spectral lunar irradiance density (W m^-2 um^-1) together with the
/// band-integrated irradiance `adjusted` (W m^-2) for one phase and
/// Earth-Moon distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LunarIrradianceSpectrum {
    pub wavelengths: Vec<f64>,
    pub irradiance: Vec<f64>,
    pub adjusted: f64,
}

impl LunarIrradianceSpectrum {
    pub fn new(wavelengths: Vec<f64>, irradiance: Vec<f64>, adjusted: f64) -> Result<Self> {
        check_grid("lunar irradiance", &wavelengths, &irradiance)?;
        if irradiance.iter().any(|v| !(*v >= 0.0)) || !(adjusted >= 0.0) {
            return Err(Error::Domain("lunar irradiance must be nonnegative".into()));
        }
        Ok(Self {
            wavelengths,
            irradiance,
            adjusted,
        })
    }

    /// Constant density `level` on `[lo, hi]`.
    pub fn flat(lo: f64, hi: f64, level: f64, adjusted: f64) -> Result<Self> {
        Self::new(vec![lo, hi], vec![level, level], adjusted)
    }

    pub fn read_csv(path: impl AsRef<Path>, adjusted: f64) -> Result<Self> {
        let (wl, v) = read_curve_csv(path)?;
        Self::new(wl, v, adjusted)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            wavelengths: self.wavelengths.clone(),
            irradiance: self.irradiance.iter().map(|v| v * k).collect(),
            adjusted: self.adjusted * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LunarGeometry {
    pub lunar_zenith_deg: f64,
}

impl LunarGeometry {
    pub fn new(lunar_zenith_deg: f64) -> Result<Self> {
        if !(0.0..180.0).contains(&lunar_zenith_deg) {
            return Err(Error::Domain(format!("lunar zenith {lunar_zenith_deg} outside [0, 180)")));
        }
        Ok(Self { lunar_zenith_deg })
    }

    /// `cos(theta)`, or an illumination error when the moon is down.
    pub fn cos_zenith(&self) -> Result<f64> {
        if self.lunar_zenith_deg >= 90.0 {
            return Err(Error::Illumination(self.lunar_zenith_deg));
        }
        Ok(self.lunar_zenith_deg.to_radians().cos())
    }
}

/// `pi R_a / (I cos(theta))` for radiance `R_a` (W m^-2 sr^-1 um^-1).
pub fn dnb_reflectance(radiance: f64, irradiance_adj: f64, geometry: LunarGeometry) -> Result<f64> {
    let cos = geometry.cos_zenith()?;
    if !(irradiance_adj > 0.0) {
        return Err(Error::Domain(format!("lunar irradiance {irradiance_adj} must be positive")));
    }
    Ok(PI * radiance / (irradiance_adj * cos))
}

/// Value of a zero-extended piecewise-linear curve on `[a, b]`, which must
/// lie entirely inside or outside its support.
fn segment_values(wl: &[f64], v: &[f64], a: f64, b: f64) -> (f64, f64) {
    if a < wl[0] || b > *wl.last().unwrap() {
        return (0.0, 0.0);
    }
    (interp(wl, v, a), interp(wl, v, b))
}

fn interp(wl: &[f64], v: &[f64], x: f64) -> f64 {
    let i = wl.partition_point(|&w| w <= x);
    if i == 0 {
        return v[0];
    }
    if i == wl.len() {
        return v[i - 1];
    }
    let (x0, x1) = (wl[i - 1], wl[i]);
    v[i - 1] + (v[i] - v[i - 1]) * (x - x0) / (x1 - x0)
}

/// Spectral weight of `f_band` inside the DNB passband under lunar
/// illumination:
///
/// `w = int(F_band F_dnb I) / int(F_dnb I)`
///
/// All curves are linearly interpolated onto the union of their grids
/// restricted to the DNB support, with zero outside each curve's own
/// support, and integrated with the trapezoid rule. Curve end points are
/// knots of the union grid, so rectangular responses integrate exactly.
pub fn band_weight(
    f_band: &SpectralResponse,
    f_dnb: &SpectralResponse,
    lunar: &LunarIrradianceSpectrum,
) -> Result<f64> {
    let (lo, hi) = f_dnb.support();
    let mut grid: Vec<f64> = f_band
        .wavelengths
        .iter()
        .chain(&f_dnb.wavelengths)
        .chain(&lunar.wavelengths)
        .copied()
        .filter(|&w| (lo..=hi).contains(&w))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for seg in grid.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let fb = segment_values(&f_band.wavelengths, &f_band.response, a, b);
        let fd = segment_values(&f_dnb.wavelengths, &f_dnb.response, a, b);
        let li = segment_values(&lunar.wavelengths, &lunar.irradiance, a, b);
        let d = 0.5 * (b - a) * (fd.0 * li.0 + fd.1 * li.1);
        num += 0.5 * (b - a) * (fb.0 * fd.0 * li.0 + fb.1 * fd.1 * li.1);
        den += d;
    }
    if den <= 0.0 {
        return Err(Error::Degenerate(
            "DNB response and lunar irradiance do not overlap".into(),
        ));
    }
    Ok(num / den)
}

/// `w_065 r_065 + w_0825 r_0825` per pixel.
pub fn merge_bands(r_065: &[f32], r_0825: &[f32], w_065: f64, w_0825: f64) -> Result<Vec<f32>> {
    if r_065.len() != r_0825.len() {
        return Err(Error::Size(format!(
            "0.65 um field has {} pixels, 0.825 um field {}",
            r_065.len(),
            r_0825.len()
        )));
    }
    if !(w_065 >= 0.0 && w_0825 >= 0.0) {
        return Err(Error::Domain(format!("negative band weight ({w_065}, {w_0825})")));
    }
    Ok(r_065
        .iter()
        .zip(r_0825)
        .map(|(&a, &b)| (w_065 * a as f64 + w_0825 * b as f64) as f32)
        .collect())
}

/// Two-column CSV with a header row: `wavelength_um,value`.
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (mut wl, mut v) = (Vec::new(), Vec::new());
    for rec in reader.deserialize::<(f64, f64)>() {
        let (a, b) = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        wl.push(a);
        v.push(b);
    }
    Ok((wl, v))
}

/// The response curves and irradiance the adjustment chain consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DnbCurves {
    pub dnb: SpectralResponse,
    pub band_065: SpectralResponse,
    pub band_0825: SpectralResponse,
    pub lunar: LunarIrradianceSpectrum,
}

pub const CURVE_FILES: [&str; 4] = ["dnb.csv", "agri_065.csv", "agri_0825.csv", "lunar_irradiance.csv"];

impl DnbCurves {
    /// Load the four curves from `dir` (see [`CURVE_FILES`]).
    pub fn read_dir(dir: impl AsRef<Path>, lunar_adjusted: f64) -> Result<Self> {
        let dir = dir.as_ref();
        for f in CURVE_FILES {
            if !dir.join(f).is_file() {
                return Err(Error::io(
                    dir.join(f),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "curve file missing"),
                ));
            }
        }
        Ok(Self {
            dnb: SpectralResponse::read_csv("dnb", dir.join(CURVE_FILES[0]))?,
            band_065: SpectralResponse::read_csv("0.65", dir.join(CURVE_FILES[1]))?,
            band_0825: SpectralResponse::read_csv("0.825", dir.join(CURVE_FILES[2]))?,
            lunar: LunarIrradianceSpectrum::read_csv(dir.join(CURVE_FILES[3]), lunar_adjusted)?,
        })
    }

    /// `(w_065, w_0825)`.
    pub fn weights(&self) -> Result<(f64, f64)> {
        Ok((
            band_weight(&self.band_065, &self.dnb, &self.lunar)?,
            band_weight(&self.band_0825, &self.dnb, &self.lunar)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat() -> LunarIrradianceSpectrum {
        LunarIrradianceSpectrum::flat(0.3, 1.2, 1.0, 1.0).unwrap()
    }

    fn gaussian(name: &str, centre: f64, width: f64, lo: f64, hi: f64, h: f64) -> SpectralResponse {
        let n = ((hi - lo) / h).round() as usize;
        let wl: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let r = wl.iter().map(|w| (-((w - centre) / width).powi(2) / 2.0).exp()).collect();
        SpectralResponse::new(name, wl, r).unwrap()
    }

    #[test]
    fn reflectance_examples() {
        let g = LunarGeometry::new(60.0).unwrap();
        assert!((dnb_reflectance(0.5, PI, g).unwrap() - 1.0).abs() < 1e-15);
        let g0 = LunarGeometry::new(0.0).unwrap();
        assert_eq!(dnb_reflectance(2.0 / PI, 2.0, g0).unwrap(), 1.0);
        assert!(matches!(
            dnb_reflectance(1.0, 1.0, LunarGeometry::new(90.0).unwrap()),
            Err(Error::Illumination(_))
        ));
        assert!(matches!(dnb_reflectance(1.0, 0.0, g), Err(Error::Domain(_))));
        assert!(LunarGeometry::new(180.0).is_err());
    }

    #[test]
    fn rectangular_weight_matches_closed_form() {
        let dnb = SpectralResponse::rectangular("dnb", 0.5, 0.9).unwrap();
        let red = SpectralResponse::rectangular("0.65", 0.55, 0.75).unwrap();
        let w = band_weight(&red, &dnb, &flat()).unwrap();
        assert!((w - 0.5).abs() < 1e-12, "{w}");
        let all = SpectralResponse::rectangular("wide", 0.4, 1.0).unwrap();
        assert!((band_weight(&all, &dnb, &flat()).unwrap() - 1.0).abs() < 1e-12);
        let blue = SpectralResponse::rectangular("0.47", 0.45, 0.49).unwrap();
        assert_eq!(band_weight(&blue, &dnb, &flat()).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_irradiance_is_degenerate() {
        let dnb = SpectralResponse::rectangular("dnb", 0.5, 0.9).unwrap();
        let lunar = LunarIrradianceSpectrum::flat(1.0, 1.5, 1.0, 1.0).unwrap();
        assert!(matches!(band_weight(&dnb, &dnb, &lunar), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weight_converges_quadratically_on_smooth_curves() {
        let lunar = LunarIrradianceSpectrum::new(
            (0..=90).map(|i| 0.3 + i as f64 * 0.01).collect(),
            (0..=90).map(|i| 2.0 - (0.3 + i as f64 * 0.01)).collect(),
            1.0,
        )
        .unwrap();
        let w = |h: f64| {
            band_weight(
                &gaussian("b", 0.65, 0.05, 0.5, 0.8, h),
                &gaussian("dnb", 0.7, 0.1, 0.5, 0.9, h),
                &lunar,
            )
            .unwrap()
        };
        let (coarse, fine, finer) = (w(0.001), w(0.0005), w(0.00025));
        assert!((coarse - fine).abs() < 1e-6);
        let ratio = (coarse - fine) / (fine - finer);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn merge_examples() {
        assert!((merge_bands(&[0.4], &[0.6], 0.5, 0.5).unwrap()[0] - 0.5).abs() < 1e-7);
        assert_eq!(merge_bands(&[0.4], &[0.6], 0.3, 0.0).unwrap()[0], (0.3 * 0.4f32 as f64) as f32);
        assert!(matches!(merge_bands(&[0.4], &[0.6, 0.1], 0.5, 0.5), Err(Error::Size(_))));
        assert!(merge_bands(&[0.4], &[0.6], -0.1, 0.5).is_err());
    }

    #[test]
    fn shipped_curves_give_rectangle_weights() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/curves");
        let curves = DnbCurves::read_dir(&dir, 1.0).unwrap();
        let (a, b) = curves.weights().unwrap();
        assert!((a - 0.5).abs() < 1e-12 && (b - 0.375).abs() < 1e-12, "{a} {b}");
    }

    #[test]
    fn curve_validation() {
        assert!(SpectralResponse::new("x", vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
        assert!(SpectralResponse::new("x", vec![0.5, 0.6], vec![1.0, 1.5]).is_err());
        assert!(SpectralResponse::new("x", vec![0.5], vec![1.0]).is_err());
        assert!(LunarIrradianceSpectrum::new(vec![0.5, 0.6], vec![1.0, -1.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn weight_ignores_irradiance_scale(k in 1e-3f64..1e3, lo in 0.45f64..0.7, span in 0.01f64..0.3) {
            let dnb = gaussian("dnb", 0.7, 0.1, 0.5, 0.9, 0.01);
            let band = SpectralResponse::rectangular("b", lo, lo + span).unwrap();
            let lunar = LunarIrradianceSpectrum::new(vec![0.3, 0.6, 1.2], vec![1.0, 3.0, 0.5], 1.0).unwrap();
            let a = band_weight(&band, &dnb, &lunar).unwrap();
            let b = band_weight(&band, &dnb, &lunar.scaled(k)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn reflectance_is_linear_in_radiance(r in 0.0f64..10.0, s in 0.0f64..10.0, theta in 0.0f64..89.0) {
            let g = LunarGeometry::new(theta).unwrap();
            let f = |x| dnb_reflectance(x, 0.7, g).unwrap();
            prop_assert!((f(r + s) - f(r) - f(s)).abs() <= 1e-12 * (1.0 + f(r + s).abs()));
            prop_assert!((f(r) * g.cos_zenith().unwrap() - dnb_reflectance(r, 0.7, LunarGeometry::new(0.0).unwrap()).unwrap()).abs() < 1e-12 * (1.0 + f(r)));
        }

        #[test]
        fn merge_is_linear(a in 0f32..1.0, b in 0f32..1.0, w1 in 0.0f64..1.0, w2 in 0.0f64..1.0) {
            let c = merge_bands(&[a], &[a], w1, w2).unwrap()[0];
            prop_assert!((c as f64 - (w1 + w2) * a as f64).abs() < 1e-6);
            let m = merge_bands(&[a], &[b], w1, w2).unwrap()[0] as f64;
            prop_assert!((m - (w1 * a as f64 + w2 * b as f64)).abs() < 1e-6);
        }
    }
}
