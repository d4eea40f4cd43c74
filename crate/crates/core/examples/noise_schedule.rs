//! Forward noising and the closed-form inverse on a linear schedule.
//!
//! cargo run --release --example noise_schedule

use nightvis::config::RunConfig;
use nightvis::diffusion::{predict_x0, q_sample};
use nightvis::rng::{self, fill_normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::read(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.json"))?;
    let schedule = cfg.schedule.build()?;
    println!("T = {}", schedule.steps());
    println!("   t     beta      alpha_bar  signal  noise");
    for t in [1, 10, 50, 100, 150, 200] {
        let ab = schedule.alpha_bar(t);
        println!("{t:>4}  {:.6}  {ab:.6}   {:.4}  {:.4}", schedule.beta(t), ab.sqrt(), (1.0 - ab).sqrt());
    }

    let mut s = rng::stream(0, "example", 0);
    let r0: Vec<f32> = (0..1024).map(|i| (i as f32 / 512.0) - 1.0).collect();
    let mut eps = vec![0f32; r0.len()];
    fill_normal(&mut s, &mut eps);
    for t in [1, 100, 200] {
        let rt = q_sample(&r0, t, &eps, &schedule)?;
        let back = predict_x0(&rt, t, &eps, &schedule)?;
        let err = back.iter().zip(&r0).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        println!("t = {t:>3}: recovering r0 from the true noise, max error {err:.2e}");
    }
    Ok(())
}
