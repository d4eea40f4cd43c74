//! NVT1 tile files.
//!
//! Little-endian layout:
//!
//! ```text
//! "NVT1"
//! u32 height, u32 width, u32 channels
//! u8  dtype (0 = f32)
//! channels x { u32 byte length, UTF-8 name }
//! f64 lon_min, f64 lon_max, f64 lat_min, f64 lat_max
//! i64 timestamp
//! f32 resolution_km
//! height*width*channels f32, row-major (row, col, channel)
//! ceil(height*width / 8) mask bytes, pixel p at bit (p % 8) of byte p / 8
//! ```

use std::path::Path;

use super::{BBox, RasterTile};
use crate::{Error, Result};

pub const TILE_MAGIC: &[u8; 4] = b"NVT1";
const DTYPE_F32: u8 = 0;

pub fn encode_tile(tile: &RasterTile) -> Result<Vec<u8>> {
    tile.validate()?;
    let mut out = Vec::with_capacity(64 + tile.data.len() * 4 + tile.num_pixels() / 8 + 1);
    out.extend_from_slice(TILE_MAGIC);
    for v in [tile.height, tile.width, tile.num_channels()] {
        let v = u32::try_from(v).map_err(|_| Error::Size(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for name in &tile.channels {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for v in [tile.bbox.lon_min, tile.bbox.lon_max, tile.bbox.lat_min, tile.bbox.lat_max] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&tile.timestamp.to_le_bytes());
    out.extend_from_slice(&tile.resolution_km.to_le_bytes());
    for v in &tile.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut mask = vec![0u8; tile.num_pixels().div_ceil(8)];
    for (p, &ok) in tile.valid_mask.iter().enumerate() {
        if ok {
            mask[p / 8] |= 1 << (p % 8);
        }
    }
    out.extend_from_slice(&mask);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated tile: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn decode_tile(bytes: &[u8]) -> Result<RasterTile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != TILE_MAGIC {
        return Err(Error::Format(format!("bad tile magic {magic:?}")));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let nch = r.u32()? as usize;
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let mut channels = Vec::with_capacity(nch.min(1024));
    for _ in 0..nch {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("channel name: {e}")))?;
        channels.push(name.to_string());
    }
    let bbox = BBox::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let timestamp = i64::from_le_bytes(r.array()?);
    let resolution_km = f32::from_le_bytes(r.array()?);
    let count = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(nch))
        .ok_or_else(|| Error::Format("tile dimensions overflow".into()))?;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tile too large".into()))?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let pixels = height * width;
    let mask_bytes = r.take(pixels.div_ceil(8))?;
    let valid_mask = (0..pixels).map(|p| mask_bytes[p / 8] >> (p % 8) & 1 == 1).collect();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tile", bytes.len() - r.pos)));
    }
    let tile = RasterTile {
        height,
        width,
        channels,
        data,
        valid_mask,
        bbox,
        timestamp,
        resolution_km,
    };
    tile.validate().map_err(|e| Error::Format(format!("decoded tile is invalid: {e}")))?;
    Ok(tile)
}

pub fn write_tile(tile: &RasterTile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tile(tile)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tile(path: impl AsRef<Path>) -> Result<RasterTile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tile(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bbox() -> BBox {
        BBox::new(100.0, 101.0, 10.0, 11.0)
    }

    #[test]
    fn small_tile_round_trips() {
        let mut t = RasterTile::filled(2, 2, &["a"], 0.0, bbox(), 1_654_041_600, 4.0);
        t.data = vec![0.0, 0.25, 0.5, 1.0];
        let back = decode_tile(&encode_tile(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn masked_pixels_round_trip() {
        let mut t = RasterTile::filled(3, 3, &["x", "y"], 1.5, bbox(), -5, 2.0);
        for p in [0usize, 4, 8] {
            t.valid_mask[p] = false;
            t.data[p * 2] = f32::NAN;
        }
        let back = decode_tile(&encode_tile(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
        assert_eq!(back.valid_mask.iter().filter(|v| !**v).count(), 3);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = RasterTile::filled(2, 2, &["a"], 0.5, bbox(), 0, 4.0);
        let mut bytes = encode_tile(&t).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tile(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_tile(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_tile(b"NV"), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_tiles_are_rejected_on_write() {
        let mut t = RasterTile::filled(2, 2, &["a"], 0.5, bbox(), 0, 4.0);
        t.data[1] = f32::INFINITY;
        assert!(encode_tile(&t).is_err());
        t.valid_mask[1] = false;
        assert!(encode_tile(&t).is_ok());
        t.bbox.lat_max = 95.0;
        assert!(encode_tile(&t).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_tiles_round_trip(
            h in 1usize..9, w in 1usize..9, c in 1usize..4,
            seed in any::<u64>(), ts in any::<i64>(), res in 0.1f32..10.0,
        ) {
            let names: Vec<String> = (0..c).map(|i| format!("ch{i}_é")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut t = RasterTile::filled(h, w, &refs, 0.0, BBox::new(-10.0, 20.5, -45.0, 30.0), ts, res);
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = (crate::rng::hash_unit(seed, i as i64, 1) * 600.0 - 300.0) as f32;
            }
            for (p, m) in t.valid_mask.iter_mut().enumerate() {
                *m = crate::rng::hash_unit(seed, p as i64, 2) > 0.3;
            }
            let back = decode_tile(&encode_tile(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
