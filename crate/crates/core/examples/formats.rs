//! Write and read back a raster tile and a checkpoint.
//!
//! cargo run --release --example formats -- [dir]

use std::path::PathBuf;

use nightvis::denoiser::{load_checkpoint, save_checkpoint, CheckpointMeta, Denoiser, DenoiserConfig};
use nightvis::diffusion::ScheduleSpec;
use nightvis::grid::{read_tile, write_tile, BBox};
use nightvis::synth::{generate_scene, SceneRecipe};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let (cond, _) = generate_scene(&SceneRecipe::random(2, 32, 32))?;
    let tile = cond.to_tile(BBox::new(100.0, 101.28, 20.0, 21.28), 0, 4.0);
    let path = dir.join("example.nvt1");
    write_tile(&tile, &path)?;
    let back = read_tile(&path)?;
    println!("{}: {} channels {:?}, identical: {}", path.display(), back.num_channels(), back.channels, back.bit_eq(&tile));

    let config = DenoiserConfig::default();
    let model = Denoiser::new(config.clone())?;
    let params = model.init_params(0);
    let meta = CheckpointMeta {
        role: "params".into(),
        step: 0,
        schedule: Some(ScheduleSpec::default()),
        norm: None,
    };
    let path = dir.join("example.nvck");
    save_checkpoint(&path, &params, &config, &meta)?;
    let (loaded, cfg2, meta2) = load_checkpoint(&path)?;
    println!(
        "{}: {} tensors, {} parameters, config and metadata preserved: {}",
        path.display(),
        loaded.len(),
        loaded.num_scalars(),
        cfg2 == config && meta2 == meta
    );
    Ok(())
}
