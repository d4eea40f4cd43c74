//! Train a small denoiser on a freshly synthesized dataset and print the
//! smoothed loss curve.
//!
//! cargo run --release --example train_denoiser -- [steps]

use nightvis::config::RunConfig;
use nightvis::dataset::generate_dataset;
use nightvis::denoiser::Denoiser;
use nightvis::train::{train, TrainMode, TrainingData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut cfg = RunConfig::read(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json"))?;
    cfg.dataset.n = 64;
    cfg.train.max_steps = Some(steps);
    cfg.train.checkpoint_every = 0;

    let dir = tempfile::tempdir()?;
    let manifest = generate_dataset(&cfg.dataset_spec(), dir.path())?;
    let data = TrainingData::from_manifest(&manifest, None)?;
    let model = Denoiser::new(cfg.denoiser_config(TrainMode::Diffusion))?;
    println!("{} training pairs, {} parameters", data.len(), model.num_params());

    let state = train(&model, &data, &cfg.train_config(TrainMode::Diffusion), &cfg.schedule.build()?)?;
    let window = (steps / 10).max(1);
    for (i, chunk) in state.losses.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}-{:<5} loss {mean:.5}", i * window + 1, i * window + chunk.len());
    }
    Ok(())
}
