use super::{BBox, RasterTile};
use crate::{Error, Result};

/// Solar zenith threshold (deg) below which a scene counts as daytime.
pub const DAY_SOZ_LIMIT: f64 = 85.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Illumination {
    Day,
    Night,
}

pub fn day_night_filter(soz_degrees: f64) -> Result<Illumination> {
    if !(0.0..=180.0).contains(&soz_degrees) {
        return Err(Error::Domain(format!("solar zenith {soz_degrees} outside [0, 180]")));
    }
    Ok(if soz_degrees < DAY_SOZ_LIMIT {
        Illumination::Day
    } else {
        Illumination::Night
    })
}

/// Extent and pixel grid of a full scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    pub bbox: BBox,
    pub resolution_km: f32,
}

impl SceneGeometry {
    pub fn of(tile: &RasterTile) -> Self {
        Self {
            height: tile.height,
            width: tile.width,
            bbox: tile.bbox,
            resolution_km: tile.resolution_km,
        }
    }

    fn deg_per_pixel(&self) -> (f64, f64) {
        (
            (self.bbox.lon_max - self.bbox.lon_min) / self.width as f64,
            (self.bbox.lat_max - self.bbox.lat_min) / self.height as f64,
        )
    }

    /// Extent of the `rows x cols` window whose top-left pixel is `(row, col)`.
    pub fn window_bbox(&self, row: usize, col: usize, rows: usize, cols: usize) -> BBox {
        let (dlon, dlat) = self.deg_per_pixel();
        BBox::new(
            self.bbox.lon_min + col as f64 * dlon,
            self.bbox.lon_min + (col + cols) as f64 * dlon,
            self.bbox.lat_max - (row + rows) as f64 * dlat,
            self.bbox.lat_max - row as f64 * dlat,
        )
    }

    /// Pixel offset of a tile inside the scene, recovered from its extent.
    fn locate(&self, tile: &RasterTile) -> Result<(usize, usize)> {
        let (dlon, dlat) = self.deg_per_pixel();
        let col = (tile.bbox.lon_min - self.bbox.lon_min) / dlon;
        let row = (self.bbox.lat_max - tile.bbox.lat_max) / dlat;
        let snap = |v: f64| {
            let r = v.round();
            ((v - r).abs() < 1e-6 && r >= 0.0).then_some(r as usize)
        };
        match (snap(row), snap(col)) {
            (Some(r), Some(c)) if r + tile.height <= self.height && c + tile.width <= self.width => Ok((r, c)),
            _ => Err(Error::Geometry(format!(
                "tile extent {:?} does not align with the scene grid",
                tile.bbox
            ))),
        }
    }
}

/// Window origins along one axis: every `stride`, with the last window moved
/// inward so it ends on the boundary.
fn axis_starts(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + size < dim).collect();
    starts.push(dim - size);
    starts
}

/// Split a scene into `tile_size x tile_size` tiles, north-up, row-major.
/// Every pixel is covered when `stride <= tile_size`, which is required.
pub fn tile_partition(scene: &RasterTile, tile_size: usize, stride: usize) -> Result<Vec<RasterTile>> {
    if stride == 0 || stride > tile_size {
        return Err(Error::Config(format!("stride {stride} must lie in [1, {tile_size}]")));
    }
    if tile_size == 0 || tile_size > scene.height || tile_size > scene.width {
        return Err(Error::Size(format!(
            "tile size {tile_size} does not fit a {}x{} scene",
            scene.height, scene.width
        )));
    }
    let geom = SceneGeometry::of(scene);
    let c = scene.num_channels();
    let names: Vec<&str> = scene.channels.iter().map(String::as_str).collect();
    let mut tiles = Vec::new();
    for &r0 in &axis_starts(scene.height, tile_size, stride) {
        for &c0 in &axis_starts(scene.width, tile_size, stride) {
            let bbox = geom.window_bbox(r0, c0, tile_size, tile_size);
            let mut t = RasterTile::filled(tile_size, tile_size, &names, 0.0, bbox, scene.timestamp, scene.resolution_km);
            for r in 0..tile_size {
                let src = ((r0 + r) * scene.width + c0) * c;
                t.data[r * tile_size * c..(r + 1) * tile_size * c].copy_from_slice(&scene.data[src..src + tile_size * c]);
                let ms = (r0 + r) * scene.width + c0;
                t.valid_mask[r * tile_size..(r + 1) * tile_size].copy_from_slice(&scene.valid_mask[ms..ms + tile_size]);
            }
            tiles.push(t);
        }
    }
    Ok(tiles)
}

/// Reassemble tiles onto the scene grid. Each pixel is the equal-weight mean
/// of its valid contributions (or of all contributions when none is valid, in
/// which case the pixel is marked invalid). Uncovered pixels are zero and
/// invalid.
pub fn tile_stitch(tiles: &[RasterTile], scene: &SceneGeometry) -> Result<RasterTile> {
    let first = tiles.first().ok_or_else(|| Error::Geometry("no tiles to stitch".into()))?;
    scene.bbox.validate()?;
    if scene.height == 0 || scene.width == 0 {
        return Err(Error::Geometry("empty scene".into()));
    }
    let c = first.num_channels();
    let n = scene.height * scene.width;
    let mut sum_valid = vec![0f64; n * c];
    let mut sum_all = vec![0f64; n * c];
    let mut n_valid = vec![0u32; n];
    let mut n_all = vec![0u32; n];
    for t in tiles {
        if t.channels != first.channels {
            return Err(Error::Geometry("tiles carry different channels".into()));
        }
        if t.resolution_km.to_bits() != scene.resolution_km.to_bits() {
            return Err(Error::Geometry("tile resolution differs from the scene".into()));
        }
        let (r0, c0) = scene.locate(t)?;
        for r in 0..t.height {
            for col in 0..t.width {
                let p = (r0 + r) * scene.width + c0 + col;
                let q = r * t.width + col;
                let src = &t.data[q * c..(q + 1) * c];
                for (k, &v) in src.iter().enumerate() {
                    sum_all[p * c + k] += v as f64;
                }
                n_all[p] += 1;
                if t.valid_mask[q] {
                    for (k, &v) in src.iter().enumerate() {
                        sum_valid[p * c + k] += v as f64;
                    }
                    n_valid[p] += 1;
                }
            }
        }
    }
    let names: Vec<&str> = first.channels.iter().map(String::as_str).collect();
    let mut out = RasterTile::filled(scene.height, scene.width, &names, 0.0, scene.bbox, first.timestamp, scene.resolution_km);
    for p in 0..n {
        let (sums, count) = if n_valid[p] > 0 {
            (&sum_valid, n_valid[p])
        } else {
            (&sum_all, n_all[p])
        };
        out.valid_mask[p] = n_valid[p] > 0;
        if count > 0 {
            for k in 0..c {
                out.data[p * c + k] = (sums[p * c + k] / count as f64) as f32;
            }
        }
    }
    Ok(out)
}
