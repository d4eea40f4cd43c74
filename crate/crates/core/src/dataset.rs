//! Paired tile datasets on disk: NVT1 condition/target files plus a
//! JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{
    day_night_filter, read_tile, write_tile, BBox, ConditionStack, Illumination, RasterTile, ReflectanceField,
};
use crate::rng::{self, Rng};
use crate::synth::{generate_scene, SceneRecipe};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const RESOLUTION_KM: f32 = 4.0;
const DEG_PER_PIXEL: f64 = 0.04;
const EPOCH_START: i64 = 1_700_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub cond_path: String,
    pub target_path: String,
    pub seed: u64,
    pub split: Split,
    /// Solar zenith angle (deg).
    pub soz: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A loaded condition/target pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub conditions: ConditionStack,
    pub target: ReflectanceField,
    pub cond_tile: RasterTile,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::Data(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Training entries that pass the daytime filter.
    pub fn training_entries(&self) -> Result<Vec<&ManifestEntry>> {
        let mut out = Vec::new();
        for e in self.split(Split::Train) {
            if day_night_filter(e.soz)? == Illumination::Day {
                out.push(e);
            }
        }
        Ok(out)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        let cond_tile = read_tile(self.resolve(&entry.cond_path))?;
        let target_tile = read_tile(self.resolve(&entry.target_path))?;
        if (cond_tile.height, cond_tile.width) != (target_tile.height, target_tile.width) {
            return Err(Error::Size(format!(
                "{}: condition and target tiles differ in size",
                entry.cond_path
            )));
        }
        Ok(Sample {
            entry: entry.clone(),
            conditions: ConditionStack::from_tile(&cond_tile)?,
            target: ReflectanceField::from_tile(&target_tile)?,
            cond_tile,
        })
    }

    pub fn load_all(&self, entries: &[&ManifestEntry]) -> Result<Vec<Sample>> {
        entries.par_iter().map(|e| self.load(e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n: usize,
    /// Derived from the run seed, never read from a config file.
    #[serde(skip)]
    pub base_seed: u64,
    pub tile_size: usize,
    /// Entry `i` is held out for testing when `i % test_modulus == 0`.
    pub test_modulus: usize,
    /// Solar zenith range (deg) scenes are drawn from.
    pub soz_range: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 512,
            base_seed: 0,
            tile_size: 64,
            test_modulus: 8,
            soz_range: (5.0, 95.0),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.test_modulus == 0 {
            return Err(Error::Config("test_modulus must be positive".into()));
        }
        let (a, b) = self.soz_range;
        if !(0.0 <= a && a <= b && b <= 180.0) {
            return Err(Error::Config(format!("solar zenith range ({a}, {b}) outside [0, 180]")));
        }
        Ok(())
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.base_seed.wrapping_add(index as u64)
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index % self.test_modulus == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

fn scene_bbox(index: usize, size: usize) -> BBox {
    let span = size as f64 * DEG_PER_PIXEL;
    let (col, row) = ((index % 16) as f64, ((index / 16) % 16) as f64);
    let lon = 80.0 + col * span;
    let lat = 50.0 - row * span;
    BBox::new(lon, lon + span, lat - span, lat)
}

/// Render one dataset entry without touching the disk.
pub fn render_entry(spec: &DatasetSpec, index: usize) -> Result<(ManifestEntry, RasterTile, RasterTile)> {
    let seed = spec.scene_seed(index);
    let recipe = SceneRecipe::random(seed, spec.tile_size, spec.tile_size);
    let (cond, refl) = generate_scene(&recipe)?;
    let soz = rng::stream(seed, "soz", 0).gen_range(spec.soz_range.0..=spec.soz_range.1);
    let timestamp = EPOCH_START + 900 * index as i64;
    let bbox = scene_bbox(index, spec.tile_size);
    let entry = ManifestEntry {
        cond_path: format!("cond_{index:05}.nvt1"),
        target_path: format!("target_{index:05}.nvt1"),
        seed,
        split: spec.split_of(index),
        soz,
        timestamp,
    };
    Ok((
        entry,
        cond.to_tile(bbox, timestamp, RESOLUTION_KM),
        refl.to_tile(bbox, timestamp, RESOLUTION_KM),
    ))
}

/// Write `spec.n` tile pairs and `manifest.jsonl` into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let (entry, cond, target) = render_entry(spec, i)?;
            write_tile(&cond, out_dir.join(&entry.cond_path))?;
            write_tile(&target, out_dir.join(&entry.target_path))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetSpec {
        DatasetSpec {
            n,
            base_seed: 40,
            tile_size: 32,
            test_modulus: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn writes_pairs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(4), dir.path()).unwrap();
        let paths: Vec<&String> = m.entries.iter().flat_map(|e| [&e.cond_path, &e.target_path]).collect();
        assert_eq!(paths.len(), 8);
        assert!(paths.iter().all(|p| dir.path().join(p).exists()));
        assert_eq!(m.entries.iter().map(|e| e.seed).collect::<Vec<_>>(), vec![40, 41, 42, 43]);
        assert_eq!(m.split(Split::Test).len(), 2);
        let back = Manifest::read(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back.entries, m.entries);
        let s = back.load(&back.entries[1]).unwrap();
        assert_eq!(s.target.height, 32);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&small(3), a.path()).unwrap();
        generate_dataset(&small(3), b.path()).unwrap();
        for e in &m.entries {
            for p in [&e.cond_path, &e.target_path] {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_NAME)).unwrap(),
            fs::read(b.path().join(MANIFEST_NAME)).unwrap()
        );
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate_dataset(&small(0), dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(generate_dataset(&small(1), file.join("sub")), Err(Error::Io { .. })));
    }
}
