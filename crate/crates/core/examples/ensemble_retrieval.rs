//! Train a small model, draw an ensemble for one test tile, and show how
//! error and envelope coverage change with ensemble size.
//!
//! cargo run --release --example ensemble_retrieval -- [members]

use nightvis::config::RunConfig;
use nightvis::dataset::{generate_dataset, Split};
use nightvis::denoiser::Denoiser;
use nightvis::ensemble::{coverage_proportion, retrieve_ensemble, sweep_from_members};
use nightvis::grid::normalize_conditions;
use nightvis::train::{train, TrainMode, TrainingData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let mut cfg = RunConfig::read(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json"))?;
    cfg.dataset.n = 64;
    cfg.train.max_steps = Some(300);
    cfg.train.checkpoint_every = 0;

    let dir = tempfile::tempdir()?;
    let manifest = generate_dataset(&cfg.dataset_spec(), dir.path())?;
    let data = TrainingData::from_manifest(&manifest, None)?;
    let model = Denoiser::new(cfg.denoiser_config(TrainMode::Diffusion))?;
    let schedule = cfg.schedule.build()?;
    let state = train(&model, &data, &cfg.train_config(TrainMode::Diffusion), &schedule)?;

    let sample = manifest.load(manifest.split(Split::Test)[0])?;
    let y = normalize_conditions(&sample.conditions, &data.norm)?;
    let ens = retrieve_ensemble(&model, &state.ema, &y, &sample.conditions.valid, &schedule, n, cfg.retrieve_seed(), &cfg.ensemble)?;
    let spread = ens.std.data.iter().map(|&v| v as f64).sum::<f64>() / ens.std.data.len() as f64;
    println!("{} members, mean spread {spread:.4}", ens.len());

    let sizes: Vec<usize> = [1, 2, 4, 8, 16, 32].into_iter().filter(|&k| k <= n).collect();
    let rows = sweep_from_members(&[(&ens.members, &sample.target)], &sizes, cfg.psnr_peak)?;
    println!("size  rmse     ssim     coverage");
    for r in rows {
        println!("{:>4}  {:.5}  {:.5}  {:.4}", r.size, r.rmse, r.ssim, r.coverage);
    }
    let (bands, pooled) = coverage_proportion(&ens.members, &sample.target)?;
    println!("coverage by band {bands:.3?}, pooled {pooled:.3}");
    Ok(())
}
