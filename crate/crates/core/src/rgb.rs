//! True-colour composites of three-band reflectance.
//!
//! The imager has no green channel, so green is synthesized as
//! `0.45 R(0.65) + 0.10 R(0.47) + 0.45 R(0.825)`.

use std::fs;
use std::path::Path;

use crate::grid::{RasterTile, VIS_CHANNEL_NAMES};
use crate::{Error, Result};

pub const GREEN_MIX: [f32; 3] = [0.10, 0.45, 0.45];
pub const GAMMA: f32 = 1.0 / 2.2;

fn encode(v: f32) -> u8 {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    (v.powf(GAMMA) * 255.0).round() as u8
}

/// Row-major RGB bytes of a tile with the three reflectance channels.
/// Invalid pixels are black.
pub fn compose_rgb(tile: &RasterTile) -> Result<Vec<u8>> {
    let idx: Vec<usize> = VIS_CHANNEL_NAMES
        .iter()
        .map(|name| {
            tile.channel_index(name)
                .ok_or_else(|| Error::Data(format!("tile has no reflectance channel {name}")))
        })
        .collect::<Result<_>>()?;
    let c = tile.num_channels();
    let mut out = Vec::with_capacity(tile.num_pixels() * 3);
    for p in 0..tile.num_pixels() {
        if !tile.valid_mask[p] {
            out.extend([0, 0, 0]);
            continue;
        }
        let [b047, r065, r0825] = [0, 1, 2].map(|k| tile.data[p * c + idx[k]]);
        let g = GREEN_MIX[0] * b047 + GREEN_MIX[1] * r065 + GREEN_MIX[2] * r0825;
        out.extend([encode(r065), encode(g), encode(b047)]);
    }
    Ok(out)
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Format(format!("png: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(rgb).map_err(err)?;
    }
    Ok(buf)
}

pub fn write_rgb_png(tile: &RasterTile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(tile.width, tile.height, &compose_rgb(tile)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BBox;

    fn tile(v: f32) -> RasterTile {
        RasterTile::filled(4, 5, &VIS_CHANNEL_NAMES, v, BBox::new(0.0, 1.0, 0.0, 1.0), 0, 4.0)
    }

    #[test]
    fn black_and_white() {
        assert!(compose_rgb(&tile(0.0)).unwrap().iter().all(|&b| b == 0));
        assert!(compose_rgb(&tile(1.0)).unwrap().iter().all(|&b| b == 255));
        assert!(compose_rgb(&tile(7.0)).unwrap().iter().all(|&b| b == 255));
    }

    #[test]
    fn gamma_and_green_mix() {
        let mut t = tile(0.0);
        for p in 0..20 {
            t.data[p * 3] = 0.2;
            t.data[p * 3 + 1] = 0.5;
            t.data[p * 3 + 2] = 0.3;
        }
        let px = &compose_rgb(&t).unwrap()[..3];
        let g = 0.10 * 0.2 + 0.45 * 0.5 + 0.45 * 0.3f32;
        assert_eq!(px, [encode(0.5), encode(g), encode(0.2)]);
        assert_eq!(encode(0.5), (0.5f32.powf(1.0 / 2.2) * 255.0).round() as u8);
    }

    #[test]
    fn png_bytes_are_deterministic_and_decodable() {
        let t = tile(0.4);
        let a = encode_png(5, 4, &compose_rgb(&t).unwrap()).unwrap();
        assert_eq!(a, encode_png(5, 4, &compose_rgb(&t).unwrap()).unwrap());
        let dec = png::Decoder::new(std::io::Cursor::new(&a));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 4));
        assert_eq!(&buf[..info.buffer_size()], &compose_rgb(&t).unwrap()[..]);
    }

    #[test]
    fn missing_band_is_a_data_error() {
        let t = RasterTile::filled(2, 2, &["r_0.47", "r_0.65"], 0.1, BBox::new(0.0, 1.0, 0.0, 1.0), 0, 4.0);
        assert!(matches!(compose_rgb(&t), Err(Error::Data(_))));
    }
}
