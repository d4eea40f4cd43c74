//! Score a perturbed reflectance field against its truth.
//!
//! cargo run --release --example metrics

use nightvis::metrics::{score_field, PsnrPeak, BAND_LABELS};
use nightvis::rng::{self, Rng};
use nightvis::synth::{generate_scene, SceneRecipe};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (_, truth) = generate_scene(&SceneRecipe::random(5, 64, 64))?;
    let mut s = rng::stream(5, "perturb", 0);
    for sigma in [0.0f32, 0.01, 0.05, 0.1] {
        let mut pred = truth.clone();
        for v in pred.data.iter_mut() {
            *v = (*v + sigma * (s.gen::<f32>() - 0.5) * 3.46).clamp(0.0, 1.0);
        }
        println!("noise sd {sigma}");
        for (label, sc) in BAND_LABELS.iter().zip(score_field(&pred, &truth, PsnrPeak::Fixed)?) {
            println!("  {label:<8} mae {:.4}  rmse {:.4}  ssim {:.4}  psnr {:.2}", sc.mae, sc.rmse, sc.ssim, sc.psnr);
        }
    }
    Ok(())
}
