//! End-to-end run: synthesize, train both models, retrieve, score.
//!
//! cargo run --release --example experiment -- <run-dir> [config.json]
//!
//! Re-running with the same arguments resumes an interrupted run.

use std::path::PathBuf;

use nightvis::config::RunConfig;
use nightvis::experiment::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().ok_or("usage: experiment <run-dir> [config.json]")?);
    let cfg = match args.next() {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let out = run_experiment(&cfg, &root)?;
    let c = &out.summary.checks;
    println!("size   rmse     ssim     coverage");
    for (row, cov) in out.diffusion.sweep.iter().zip(&out.diffusion.coverage) {
        println!("{:>4}   {:.5}  {:.5}  {:.4}", row.size, row.rmse, row.ssim, cov.pooled);
    }
    println!("baseline ssim {:.5} rmse {:.5}", c.ssim_baseline, out.baseline.report.overall().rmse);
    println!("ensemble beats single member: {}", c.ensemble_beats_single());
    println!("coverage nondecreasing: {}, above floor: {}", c.coverage_nondecreasing(), c.coverage_above_floor());
    println!("competitive with baseline: {}", c.competitive_with_baseline());
    for (stage, secs) in &out.summary.timings {
        println!("{stage}: {secs:.1} s");
    }
    Ok(())
}
