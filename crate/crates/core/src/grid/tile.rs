use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geographic extent in degrees, `lon_min < lon_max`, `-90 <= lat_min < lat_max <= 90`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Self {
        Self {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lon_min < self.lon_max
            && -90.0 <= self.lat_min
            && self.lat_min < self.lat_max
            && self.lat_max <= 90.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!("invalid bounding box {self:?}")))
        }
    }
}

/// `H x W x C` float raster with channel names, validity mask and
/// georeferencing. Pixel `(row, col)` channel `c` lives at
/// `(row * W + col) * C + c`; row 0 is the northern edge.
#[derive(Debug, Clone)]
pub struct RasterTile {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<String>,
    pub data: Vec<f32>,
    pub valid_mask: Vec<bool>,
    pub bbox: BBox,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub resolution_km: f32,
}

impl RasterTile {
    /// A tile filled with `fill`, every pixel valid.
    pub fn filled(height: usize, width: usize, channels: &[&str], fill: f32, bbox: BBox, timestamp: i64, resolution_km: f32) -> Self {
        Self {
            height,
            width,
            channels: channels.iter().map(|c| c.to_string()).collect(),
            data: vec![fill; height * width * channels.len()],
            valid_mask: vec![true; height * width],
            bbox,
            timestamp,
            resolution_km,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.num_channels() + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let c = self.num_channels();
        self.data[(row * self.width + col) * c + ch] = v;
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// One channel as a row-major `H x W` plane.
    pub fn channel_plane(&self, ch: usize) -> Vec<f32> {
        let c = self.num_channels();
        self.data.iter().skip(ch).step_by(c).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_channels();
        if self.height == 0 || self.width == 0 || c == 0 {
            return Err(Error::Size(format!("empty tile {}x{}x{c}", self.height, self.width)));
        }
        if self.data.len() != self.height * self.width * c {
            return Err(Error::Size(format!(
                "{} values for a {}x{}x{c} tile",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        if self.valid_mask.len() != self.num_pixels() {
            return Err(Error::Size("mask length differs from pixel count".into()));
        }
        self.bbox.validate()?;
        for (p, &ok) in self.valid_mask.iter().enumerate() {
            if ok && self.data[p * c..(p + 1) * c].iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite value at valid pixel {p}")));
            }
        }
        Ok(())
    }

    /// Bitwise equality, including NaN payloads and metadata.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.valid_mask == other.valid_mask
            && self.bbox.lon_min.to_bits() == other.bbox.lon_min.to_bits()
            && self.bbox.lon_max.to_bits() == other.bbox.lon_max.to_bits()
            && self.bbox.lat_min.to_bits() == other.bbox.lat_min.to_bits()
            && self.bbox.lat_max.to_bits() == other.bbox.lat_max.to_bits()
            && self.timestamp == other.timestamp
            && self.resolution_km.to_bits() == other.resolution_km.to_bits()
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
