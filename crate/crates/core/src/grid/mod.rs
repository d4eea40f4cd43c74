//! Raster tiles, the on-disk tile format, condition stacks and tiling.

mod condition;
mod format;
mod tile;
mod tiling;

pub use condition::*;
pub use format::{decode_tile, encode_tile, read_tile, write_tile, TILE_MAGIC};
pub use tile::{BBox, RasterTile};
pub use tiling::{day_night_filter, tile_partition, tile_stitch, Illumination, SceneGeometry, DAY_SOZ_LIMIT};
