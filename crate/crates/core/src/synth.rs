//! Procedural paired scenes: infrared conditions and the visible
//! reflectance they were rendered alongside.
//!
//! Clouds are a thresholded multi-octave value-noise optical thickness
//! `tau`. Reflectance blends surface albedo towards cloud albedo with
//! opacity `1 - exp(-tau)`; brightness temperatures drop by a per-channel
//! contrast scaled by the same opacity and by a hidden cloud-top factor in
//! `[0.6, 1]`. The hidden factor and a hidden surface texture keep the
//! reflectance only partly determined by the infrared.

use serde::{Deserialize, Serialize};

use crate::grid::{ConditionStack, LandSuperclass, ReflectanceField, NUM_LAND_CLASSES};
use crate::rng::{self, hash_unit, Distribution, Rng, StandardNormal};
use crate::{Error, Result};

pub const CLOUD_ALBEDO: [f32; 3] = [0.85, 0.80, 0.78];

/// Surface albedo at 0.47, 0.65, 0.825 um per superclass.
pub const SURFACE_ALBEDO: [[f32; 3]; NUM_LAND_CLASSES] = [
    [0.06, 0.04, 0.03], // water
    [0.04, 0.05, 0.30], // forest
    [0.07, 0.10, 0.30], // grass/shrub
    [0.06, 0.08, 0.35], // crop
    [0.20, 0.30, 0.35], // bare
    [0.12, 0.14, 0.18], // urban
    [0.75, 0.72, 0.65], // snow/ice
    [0.05, 0.06, 0.20], // wetland
];

/// Clear-sky 10.8 um brightness temperature (K) per superclass.
pub const SURFACE_BT: [f32; NUM_LAND_CLASSES] = [290.0, 295.0, 300.0, 298.0, 310.0, 305.0, 258.0, 292.0];

/// Clear-sky offset of each infrared channel from the 10.8 um value (K).
/// The water-vapour channels sit far below the window channels.
pub const CLEAR_SKY_OFFSET: [f32; 7] = [-60.0, -50.0, -40.0, -2.0, 0.0, -1.5, -8.0];

/// Full-opacity, full-height cloud contrast per channel (K).
pub const CLOUD_CONTRAST: [f32; 7] = [12.0, 20.0, 30.0, 66.0, 72.0, 70.0, 50.0];

pub const BT_NOISE_K: f32 = 0.3;
pub const BT_CLAMP_K: (f32, f32) = (180.0, 330.0);
pub const TAU_MAX: f64 = 6.0;
pub const NOISE_OCTAVES: usize = 4;
pub const NOISE_PERSISTENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Target fraction of pixels with `tau > 0`.
    pub cloud_fraction: f64,
    /// Relative weight of each land superclass.
    pub surface_mix: [f64; NUM_LAND_CLASSES],
    /// Satellite zenith at the western edge (deg).
    pub saz_base: f64,
    /// Increase in satellite zenith across the scene (deg).
    pub saz_gradient: f64,
}

impl SceneRecipe {
    /// Recipe with cloud cover, surface mix and viewing geometry drawn from `seed`.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut s = rng::stream(seed, "recipe", 0);
        let mut surface_mix = [0.0; NUM_LAND_CLASSES];
        for w in surface_mix.iter_mut() {
            *w = s.gen::<f64>().powi(2);
        }
        // keep snow uncommon so bright surfaces do not dominate
        surface_mix[LandSuperclass::SnowIce.index()] *= 0.3;
        Self {
            seed,
            height,
            width,
            cloud_fraction: s.gen_range(0.1..0.9),
            surface_mix,
            saz_base: s.gen_range(5.0..45.0),
            saz_gradient: s.gen_range(0.0..20.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!("scene {}x{} smaller than 32x32", self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&self.cloud_fraction) {
            return Err(Error::Config(format!("cloud fraction {} outside [0, 1]", self.cloud_fraction)));
        }
        if self.surface_mix.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.surface_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("surface mix needs non-negative weights with a positive sum".into()));
        }
        let far = self.saz_base + self.saz_gradient;
        if !(self.saz_base >= 0.0 && far >= 0.0 && self.saz_base < 90.0 && far < 90.0) {
            return Err(Error::Config(format!("satellite zenith range [{}, {far}] leaves [0, 90)", self.saz_base)));
        }
        Ok(())
    }
}

/// Multi-octave value noise on an `h x w` grid, normalized to `[0, 1)`.
/// The coarsest lattice has `cells` cells along the longer side.
pub fn value_noise(seed: u64, h: usize, w: usize, cells: usize, octaves: usize, persistence: f64) -> Vec<f64> {
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0f64; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    let span = h.max(w) as f64;
    for o in 0..octaves {
        let freq = (cells << o) as f64 / span;
        let oseed = rng::derive_seed(seed, "octave", o as u64);
        for r in 0..h {
            let y = r as f64 * freq;
            let (y0, fy) = (y.floor(), smooth(y - y.floor()));
            for c in 0..w {
                let x = c as f64 * freq;
                let (x0, fx) = (x.floor(), smooth(x - x.floor()));
                let (xi, yi) = (x0 as i64, y0 as i64);
                let v00 = hash_unit(oseed, xi, yi);
                let v10 = hash_unit(oseed, xi + 1, yi);
                let v01 = hash_unit(oseed, xi, yi + 1);
                let v11 = hash_unit(oseed, xi + 1, yi + 1);
                let top = v00 + (v10 - v00) * fx;
                let bottom = v01 + (v11 - v01) * fx;
                out[r * w + c] += amp * (top + (bottom - top) * fy);
            }
        }
        total += amp;
        amp *= persistence;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Latent fields behind a scene. Only `land` is visible to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFields {
    pub land: Vec<u8>,
    /// Cloud optical thickness, `>= 0`.
    pub tau: Vec<f64>,
    /// Hidden cloud-top factor in `[0.6, 1]`.
    pub cloud_top: Vec<f64>,
    /// Hidden multiplicative surface texture in `[0.85, 1.15]`.
    pub texture: Vec<f64>,
    /// Surface temperature anomaly (K).
    pub temp_anomaly: Vec<f64>,
    /// Channel noise (K), pixel-interleaved, 7 per pixel.
    pub bt_noise: Vec<f32>,
}

pub fn scene_fields(recipe: &SceneRecipe) -> Result<SceneFields> {
    recipe.validate()?;
    let (h, w, seed) = (recipe.height, recipe.width, recipe.seed);
    let n = h * w;
    let field = |tag: &str, cells: usize| {
        value_noise(rng::derive_seed(seed, tag, 0), h, w, cells, NOISE_OCTAVES, NOISE_PERSISTENCE)
    };

    let total: f64 = recipe.surface_mix.iter().sum();
    let mut cdf = [0f64; NUM_LAND_CLASSES];
    let mut acc = 0.0;
    for (c, wt) in cdf.iter_mut().zip(&recipe.surface_mix) {
        acc += wt / total;
        *c = acc;
    }
    // rank-transform the land field so class areas follow the mix
    let land_field = field("land", 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| land_field[a].total_cmp(&land_field[b]).then(a.cmp(&b)));
    let mut land = vec![0u8; n];
    for (rank, &p) in order.iter().enumerate() {
        let u = (rank as f64 + 0.5) / n as f64;
        land[p] = cdf.iter().position(|&c| u < c).unwrap_or(NUM_LAND_CLASSES - 1) as u8;
    }

    let cloud_field = field("cloud", 3);
    let mut sorted = cloud_field.clone();
    sorted.sort_by(f64::total_cmp);
    let cloudy = (recipe.cloud_fraction * n as f64).round() as usize;
    let tau = if cloudy == 0 {
        vec![0.0; n]
    } else {
        let q = sorted[n - cloudy];
        let top = sorted[n - 1];
        // pixels at or above the quantile get tau > 0, except that a tied
        // minimum keeps tau = 0; scale so the thickest pixel reaches TAU_MAX
        let lo = if cloudy == n { q - 1e-9 } else { sorted[n - cloudy - 1] };
        cloud_field
            .iter()
            .map(|&v| if v > lo { TAU_MAX * (v - lo) / (top - lo) } else { 0.0 })
            .collect()
    };

    let cloud_top = field("cloud_top", 2).iter().map(|v| 0.6 + 0.4 * v).collect();
    let texture = field("texture", 8).iter().map(|v| 0.85 + 0.3 * v).collect();
    let temp_anomaly = field("temperature", 1).iter().map(|v| 10.0 * (v - 0.5)).collect();
    let mut s = rng::stream(seed, "bt_noise", 0);
    let bt_noise = (0..n * 7)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut s);
            BT_NOISE_K * z as f32
        })
        .collect();
    Ok(SceneFields {
        land,
        tau,
        cloud_top,
        texture,
        temp_anomaly,
        bt_noise,
    })
}

/// Render conditions and reflectance from latent fields.
pub fn render_scene(recipe: &SceneRecipe, f: &SceneFields) -> (ConditionStack, ReflectanceField) {
    let (h, w) = (recipe.height, recipe.width);
    let n = h * w;
    let mut bt = vec![0f32; n * 7];
    let mut refl = vec![0f32; n * 3];
    let mut saz = vec![0f32; n];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let class = f.land[p] as usize;
            let opacity = 1.0 - (-f.tau[p]).exp();
            for b in 0..3 {
                let surf = ((SURFACE_ALBEDO[class][b] as f64) * f.texture[p]).min(CLOUD_ALBEDO[b] as f64);
                let v = surf + (CLOUD_ALBEDO[b] as f64 - surf) * opacity;
                refl[p * 3 + b] = v.clamp(0.0, 1.0) as f32;
            }
            let zenith = recipe.saz_base + recipe.saz_gradient * c as f64 / (w - 1) as f64;
            saz[p] = zenith as f32;
            // longer slant path through water vapour darkens the absorbing channels
            let path = 1.0 / zenith.to_radians().cos() - 1.0;
            for ch in 0..7 {
                let absorbing = CLEAR_SKY_OFFSET[ch] < -5.0;
                let clear = SURFACE_BT[class] as f64 + f.temp_anomaly[p] + CLEAR_SKY_OFFSET[ch] as f64
                    - if absorbing { 3.0 * path } else { 0.0 };
                let v = clear - CLOUD_CONTRAST[ch] as f64 * f.cloud_top[p] * opacity + f.bt_noise[p * 7 + ch] as f64;
                bt[p * 7 + ch] = (v as f32).clamp(BT_CLAMP_K.0, BT_CLAMP_K.1);
            }
        }
    }
    (
        ConditionStack {
            height: h,
            width: w,
            bt,
            land_cover: f.land.clone(),
            saz,
            valid: vec![true; n],
        },
        ReflectanceField {
            height: h,
            width: w,
            data: refl,
            valid: vec![true; n],
        },
    )
}

pub fn generate_scene(recipe: &SceneRecipe) -> Result<(ConditionStack, ReflectanceField)> {
    let fields = scene_fields(recipe)?;
    Ok(render_scene(recipe, &fields))
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(seed: u64) -> SceneRecipe {
        SceneRecipe::random(seed, 32, 32)
    }

    #[test]
    fn same_recipe_same_scene() {
        let r = recipe(5);
        let (a, b) = generate_scene(&r).unwrap();
        let (c, d) = generate_scene(&r).unwrap();
        assert_eq!(a.bt.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.bt.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(b, d);
        let (e, _) = generate_scene(&recipe(6)).unwrap();
        assert_ne!(a.bt, e.bt);
    }

    #[test]
    fn clear_scene_shows_surface_albedo() {
        let mut r = recipe(9);
        r.cloud_fraction = 0.0;
        let mut f = scene_fields(&r).unwrap();
        assert!(f.tau.iter().all(|&t| t == 0.0));
        f.texture.fill(1.0);
        let (_, refl) = render_scene(&r, &f);
        for p in 0..32 * 32 {
            let class = f.land[p] as usize;
            assert_eq!(&refl.data[p * 3..p * 3 + 3], &SURFACE_ALBEDO[class]);
        }
    }

    #[test]
    fn outputs_stay_in_physical_ranges() {
        for seed in 0..20 {
            let (cond, refl) = generate_scene(&recipe(seed)).unwrap();
            assert!(refl.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(cond.bt.iter().all(|v| (180.0..=330.0).contains(v)));
            cond.validate().unwrap();
        }
    }

    #[test]
    fn cloud_fraction_is_hit() {
        for &cf in &[0.0, 0.25, 0.5, 1.0] {
            let mut r = recipe(3);
            r.cloud_fraction = cf;
            let f = scene_fields(&r).unwrap();
            let got = f.tau.iter().filter(|&&t| t > 0.0).count() as f64 / f.tau.len() as f64;
            assert!((got - cf).abs() <= 1.0 / 1024.0 + 1e-12, "{cf} -> {got}");
        }
    }

    #[test]
    fn thicker_cloud_is_brighter_and_colder() {
        let r = recipe(11);
        let f = scene_fields(&r).unwrap();
        let (c0, r0) = render_scene(&r, &f);
        for &p in &[0usize, 100, 517, 1023] {
            let mut g = f.clone();
            g.tau[p] += 0.7;
            let (c1, r1) = render_scene(&r, &g);
            for b in 0..3 {
                assert!(r1.data[p * 3 + b] >= r0.data[p * 3 + b]);
            }
            for ch in 3..7 {
                assert!(c1.bt[p * 7 + ch] <= c0.bt[p * 7 + ch]);
            }
        }
    }

    #[test]
    fn window_bt_anticorrelates_with_red_reflectance() {
        let mut total = 0.0;
        let count = 200;
        for seed in 0..count {
            let (cond, refl) = generate_scene(&recipe(1000 + seed)).unwrap();
            let bt108: Vec<f32> = cond.bt.iter().skip(4).step_by(7).copied().collect();
            total += pearson(&bt108, &refl.band_plane(1));
        }
        assert!(total / count as f64 <= -0.5, "{}", total / count as f64);
    }

    #[test]
    fn recipe_validation() {
        let mut r = recipe(1);
        r.height = 16;
        assert!(matches!(generate_scene(&r), Err(Error::Config(_))));
        let mut r = recipe(1);
        r.cloud_fraction = 1.5;
        assert!(r.validate().is_err());
        let mut r = recipe(1);
        r.saz_base = 80.0;
        r.saz_gradient = 15.0;
        assert!(r.validate().is_err());
    }
}
