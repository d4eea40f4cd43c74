use serde::{Deserialize, Serialize};

use super::{BBox, RasterTile};
use crate::diffusion::{to_model_space, to_reflectance};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Thermal-infrared condition bands (um): three water-vapour, four long-wave.
pub const IR_BANDS_UM: [f32; 7] = [6.25, 6.96, 7.42, 8.55, 10.8, 12.0, 13.3];
pub const IR_CHANNEL_NAMES: [&str; 7] = ["bt_6.25", "bt_6.96", "bt_7.42", "bt_8.55", "bt_10.8", "bt_12.0", "bt_13.3"];
pub const LAND_CHANNEL: &str = "land_cover";
pub const SAZ_CHANNEL: &str = "saz";

/// Retrieved visible/near-infrared bands (um).
pub const VIS_BANDS_UM: [f32; 3] = [0.47, 0.65, 0.825];
pub const VIS_CHANNEL_NAMES: [&str; 3] = ["r_0.47", "r_0.65", "r_0.825"];

pub const NUM_LAND_CLASSES: usize = 8;
/// 7 brightness temperatures, 8 one-hot land classes, 1 zenith angle.
pub const CONDITION_CHANNELS: usize = IR_BANDS_UM.len() + NUM_LAND_CLASSES + 1;

pub const BT_RANGE_K: (f32, f32) = (150.0, 350.0);

/// Coarse land-cover classes used as model conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LandSuperclass {
    Water = 0,
    Forest = 1,
    GrassShrub = 2,
    Crop = 3,
    Bare = 4,
    Urban = 5,
    SnowIce = 6,
    Wetland = 7,
}

impl LandSuperclass {
    pub const ALL: [LandSuperclass; NUM_LAND_CLASSES] = [
        Self::Water,
        Self::Forest,
        Self::GrassShrub,
        Self::Crop,
        Self::Bare,
        Self::Urban,
        Self::SnowIce,
        Self::Wetland,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Collapse an ESA CCI land-cover legend code into a superclass.
    /// Unknown codes (including 0, no data) yield `None`.
    pub fn from_esa_cci(code: u16) -> Option<Self> {
        Some(match code {
            10..=30 => Self::Crop,
            40 => Self::Crop,
            50..=90 => Self::Forest,
            100 | 110 | 120..=122 | 130 | 140 | 150..=153 => Self::GrassShrub,
            160 | 170 | 180 => Self::Wetland,
            190 => Self::Urban,
            200..=202 => Self::Bare,
            210 => Self::Water,
            220 => Self::SnowIce,
            _ => return None,
        })
    }
}

/// Model conditions for one scene: brightness temperatures, land cover and
/// satellite zenith angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    pub height: usize,
    pub width: usize,
    /// Brightness temperature (K), pixel-interleaved, 7 per pixel.
    pub bt: Vec<f32>,
    /// Superclass index per pixel.
    pub land_cover: Vec<u8>,
    /// Satellite zenith angle (deg).
    pub saz: Vec<f32>,
    pub valid: Vec<bool>,
}

impl ConditionStack {
    pub fn num_ir(&self) -> usize {
        if self.height * self.width == 0 {
            0
        } else {
            self.bt.len() / (self.height * self.width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 || self.bt.len() != n * IR_BANDS_UM.len() || self.land_cover.len() != n || self.saz.len() != n || self.valid.len() != n {
            return Err(Error::Size("condition stack arrays disagree with its dimensions".into()));
        }
        for p in (0..n).filter(|&p| self.valid[p]) {
            let bts = &self.bt[p * 7..(p + 1) * 7];
            if bts.iter().any(|&v| !(BT_RANGE_K.0..=BT_RANGE_K.1).contains(&v)) {
                return Err(Error::Domain(format!("brightness temperature out of range at pixel {p}: {bts:?}")));
            }
            if !(0.0..90.0).contains(&self.saz[p]) {
                return Err(Error::Domain(format!("satellite zenith {} out of range at pixel {p}", self.saz[p])));
            }
            if self.land_cover[p] as usize >= NUM_LAND_CLASSES {
                return Err(Error::Domain(format!("land class {} out of range at pixel {p}", self.land_cover[p])));
            }
        }
        Ok(())
    }

    pub fn to_tile(&self, bbox: BBox, timestamp: i64, resolution_km: f32) -> RasterTile {
        let mut names: Vec<&str> = IR_CHANNEL_NAMES.to_vec();
        names.extend([LAND_CHANNEL, SAZ_CHANNEL]);
        let mut tile = RasterTile::filled(self.height, self.width, &names, 0.0, bbox, timestamp, resolution_km);
        for p in 0..self.height * self.width {
            let dst = &mut tile.data[p * 9..(p + 1) * 9];
            dst[..7].copy_from_slice(&self.bt[p * 7..(p + 1) * 7]);
            dst[7] = self.land_cover[p] as f32;
            dst[8] = self.saz[p];
        }
        tile.valid_mask.clone_from(&self.valid);
        tile
    }

    pub fn from_tile(tile: &RasterTile) -> Result<Self> {
        let find = |name: &str| {
            tile.channel_index(name)
                .ok_or_else(|| Error::Data(format!("condition tile lacks channel {name}")))
        };
        let ir: Vec<usize> = IR_CHANNEL_NAMES.iter().map(|n| find(n)).collect::<Result<_>>()?;
        let lc = find(LAND_CHANNEL)?;
        let sz = find(SAZ_CHANNEL)?;
        let c = tile.num_channels();
        let n = tile.num_pixels();
        let mut stack = Self {
            height: tile.height,
            width: tile.width,
            bt: Vec::with_capacity(n * 7),
            land_cover: Vec::with_capacity(n),
            saz: Vec::with_capacity(n),
            valid: tile.valid_mask.clone(),
        };
        for p in 0..n {
            let px = &tile.data[p * c..(p + 1) * c];
            stack.bt.extend(ir.iter().map(|&i| px[i]));
            let class = px[lc];
            stack.land_cover.push(if class.is_finite() && class >= 0.0 { class.round() as u8 } else { 0 });
            stack.saz.push(px[sz]);
        }
        stack.validate()?;
        Ok(stack)
    }
}

/// Three-band top-of-atmosphere reflectance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceField {
    pub height: usize,
    pub width: usize,
    /// Pixel-interleaved 0.47, 0.65, 0.825 um reflectance.
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl ReflectanceField {
    pub fn band_plane(&self, band: usize) -> Vec<f32> {
        self.data.iter().skip(band).step_by(3).copied().collect()
    }

    pub fn to_tile(&self, bbox: BBox, timestamp: i64, resolution_km: f32) -> RasterTile {
        let mut tile = RasterTile::filled(self.height, self.width, &VIS_CHANNEL_NAMES, 0.0, bbox, timestamp, resolution_km);
        tile.data.clone_from(&self.data);
        tile.valid_mask.clone_from(&self.valid);
        tile
    }

    pub fn from_tile(tile: &RasterTile) -> Result<Self> {
        let idx: Vec<usize> = VIS_CHANNEL_NAMES
            .iter()
            .map(|n| tile.channel_index(n).ok_or_else(|| Error::Data(format!("reflectance tile lacks band {n}"))))
            .collect::<Result<_>>()?;
        let c = tile.num_channels();
        let data = (0..tile.num_pixels())
            .flat_map(|p| idx.iter().map(move |&i| p * c + i))
            .map(|k| tile.data[k])
            .collect();
        Ok(Self {
            height: tile.height,
            width: tile.width,
            data,
            valid: tile.valid_mask.clone(),
        })
    }

    /// `[1, 3, H, W]` in model space `[-1, 1]`; invalid pixels map to 0.
    pub fn to_model_tensor(&self) -> Tensor<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0f32; 3 * hw];
        for p in (0..hw).filter(|&p| self.valid[p]) {
            for b in 0..3 {
                out[b * hw + p] = to_model_space(self.data[p * 3 + b]);
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out)
    }

    /// Inverse of [`ReflectanceField::to_model_tensor`] for batch element `n`,
    /// clamping to `[0, 1]`.
    pub fn from_model_tensor(t: &Tensor<f32>, n: usize, valid: Vec<bool>) -> Self {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 3);
        let item = t.item(n);
        let hw = h * w;
        let data = (0..hw)
            .flat_map(|p| (0..3).map(move |b| b * hw + p))
            .map(|k| to_reflectance(item[k]))
            .collect();
        Self {
            height: h,
            width: w,
            data,
            valid,
        }
    }
}

/// Per-channel normalization constants for the condition stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub ir_mean: Vec<f32>,
    pub ir_std: Vec<f32>,
    /// Divisor applied to the satellite zenith angle (deg).
    pub saz_scale: f32,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.ir_mean.len() != self.ir_std.len() {
            return Err(Error::Config("normalization mean/std lengths differ".into()));
        }
        if let Some(s) = self.ir_std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalization std must be positive, got {s}")));
        }
        if !(self.saz_scale > 0.0) {
            return Err(Error::Config("saz_scale must be positive".into()));
        }
        Ok(())
    }

    /// Mean and population standard deviation over valid pixels.
    pub fn fit<'a>(stacks: impl IntoIterator<Item = &'a ConditionStack>) -> Result<Self> {
        let mut sum = [0f64; 7];
        let mut sq = [0f64; 7];
        let mut n = 0usize;
        for s in stacks {
            for p in (0..s.valid.len()).filter(|&p| s.valid[p]) {
                for c in 0..7 {
                    let v = s.bt[p * 7 + c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Config("no valid pixels to fit normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        let stats = Self {
            ir_mean: mean.iter().map(|&m| m as f32).collect(),
            ir_std: std,
            saz_scale: 90.0,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// Normalized model conditions, `[1, K, H, W]` with `K = 16`:
/// standardized brightness temperatures, one-hot land class, `saz / saz_scale`.
/// Invalid pixels are zero in every channel.
pub fn normalize_conditions(stack: &ConditionStack, stats: &NormStats) -> Result<Tensor<f32>> {
    stats.validate()?;
    let nir = stack.num_ir();
    if stats.ir_mean.len() != nir || nir != IR_BANDS_UM.len() {
        return Err(Error::Config(format!(
            "normalization has {} infrared channels, stack has {nir}",
            stats.ir_mean.len()
        )));
    }
    let hw = stack.height * stack.width;
    let mut out = vec![0f32; CONDITION_CHANNELS * hw];
    for p in (0..hw).filter(|&p| stack.valid[p]) {
        for c in 0..nir {
            out[c * hw + p] = (stack.bt[p * nir + c] - stats.ir_mean[c]) / stats.ir_std[c];
        }
        let class = stack.land_cover[p] as usize;
        if class >= NUM_LAND_CLASSES {
            return Err(Error::Domain(format!("land class {class} out of range")));
        }
        out[(nir + class) * hw + p] = 1.0;
        out[(nir + NUM_LAND_CLASSES) * hw + p] = stack.saz[p] / stats.saz_scale;
    }
    Ok(Tensor::from_vec(&[1, CONDITION_CHANNELS, stack.height, stack.width], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_1px(bt: f32, class: u8, saz: f32) -> ConditionStack {
        ConditionStack {
            height: 1,
            width: 1,
            bt: vec![bt; 7],
            land_cover: vec![class],
            saz: vec![saz],
            valid: vec![true],
        }
    }

    fn stats() -> NormStats {
        NormStats {
            ir_mean: vec![280.0; 7],
            ir_std: vec![20.0; 7],
            saz_scale: 90.0,
        }
    }

    #[test]
    fn normalization_examples() {
        let y = normalize_conditions(&stack_1px(300.0, 5, 45.0), &stats()).unwrap();
        assert_eq!(y.shape(), &[1, 16, 1, 1]);
        let v = y.data();
        assert_eq!(&v[..7], &[1.0; 7]);
        let onehot = &v[7..15];
        assert_eq!(onehot, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(v[15], 0.5);
    }

    #[test]
    fn invalid_pixels_are_zero() {
        let mut s = stack_1px(300.0, 2, 10.0);
        s.valid[0] = false;
        let y = normalize_conditions(&s, &stats()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_stats_are_config_errors() {
        let mut st = stats();
        st.ir_mean.pop();
        st.ir_std.pop();
        assert!(matches!(normalize_conditions(&stack_1px(300.0, 0, 0.0), &st), Err(Error::Config(_))));
        let mut st = stats();
        st.ir_std[3] = 0.0;
        assert!(matches!(normalize_conditions(&stack_1px(300.0, 0, 0.0), &st), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_is_affine_per_channel() {
        // normalize(a x + b) under stats (a m + b, a s) equals normalize(x) under (m, s)
        let base = ConditionStack {
            height: 1,
            width: 3,
            bt: (0..21).map(|i| 220.0 + 3.5 * i as f32).collect(),
            land_cover: vec![0, 1, 2],
            saz: vec![0.0, 30.0, 60.0],
            valid: vec![true; 3],
        };
        let (a, b) = (1.5f32, -40.0f32);
        let mut moved = base.clone();
        moved.bt.iter_mut().for_each(|v| *v = a * *v + b);
        let st = stats();
        let st2 = NormStats {
            ir_mean: st.ir_mean.iter().map(|m| a * m + b).collect(),
            ir_std: st.ir_std.iter().map(|s| a * s).collect(),
            saz_scale: 90.0,
        };
        let y1 = normalize_conditions(&base, &st).unwrap();
        let y2 = normalize_conditions(&moved, &st2).unwrap();
        for (u, v) in y1.data().iter().zip(y2.data()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
        // shifting the data by b shifts each standardized channel by b / s
        let mut shifted = base.clone();
        shifted.bt.iter_mut().for_each(|v| *v += 10.0);
        let y3 = normalize_conditions(&shifted, &st).unwrap();
        for c in 0..7 {
            for p in 0..3 {
                let d = y3.data()[c * 3 + p] - y1.data()[c * 3 + p];
                assert!((d - 0.5).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stack_tile_round_trip() {
        let s = stack_1px(250.0, 6, 12.5);
        let t = s.to_tile(BBox::new(0.0, 1.0, 0.0, 1.0), 0, 4.0);
        assert_eq!(ConditionStack::from_tile(&t).unwrap(), s);
    }

    #[test]
    fn esa_codes_collapse() {
        assert_eq!(LandSuperclass::from_esa_cci(210), Some(LandSuperclass::Water));
        assert_eq!(LandSuperclass::from_esa_cci(60), Some(LandSuperclass::Forest));
        assert_eq!(LandSuperclass::from_esa_cci(190), Some(LandSuperclass::Urban));
        assert_eq!(LandSuperclass::from_esa_cci(220), Some(LandSuperclass::SnowIce));
        assert_eq!(LandSuperclass::from_esa_cci(0), None);
    }

    #[test]
    fn model_space_round_trip() {
        let f = ReflectanceField {
            height: 1,
            width: 2,
            data: vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125],
            valid: vec![true, true],
        };
        let t = f.to_model_tensor();
        assert_eq!(t.data(), &[-1.0, -0.5, 0.0, 0.5, 1.0, -0.75]);
        assert_eq!(ReflectanceField::from_model_tensor(&t, 0, f.valid.clone()), f);
    }
}
