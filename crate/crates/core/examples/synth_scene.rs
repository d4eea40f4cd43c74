//! Render one procedural scene and report how the infrared relates to the
//! visible bands.
//!
//! cargo run --release --example synth_scene -- [seed] [out.png]

use nightvis::grid::{BBox, IR_CHANNEL_NAMES, VIS_CHANNEL_NAMES};
use nightvis::rgb::write_rgb_png;
use nightvis::synth::{generate_scene, pearson, SceneRecipe};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let recipe = SceneRecipe::random(seed, 64, 64);
    println!("cloud fraction {:.2}, satellite zenith {:.1}..{:.1} deg", recipe.cloud_fraction, recipe.saz_base, recipe.saz_base + recipe.saz_gradient);

    let (cond, refl) = generate_scene(&recipe)?;
    let bt = |c: usize| -> Vec<f32> { cond.bt.chunks(7).map(|px| px[c]).collect() };
    for (b, name) in VIS_CHANNEL_NAMES.iter().enumerate() {
        let r = refl.band_plane(b);
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64;
        println!("{name}: mean {mean:.3}, corr with {} {:+.3}", IR_CHANNEL_NAMES[4], pearson(&r, &bt(4)));
    }

    if let Some(out) = args.next() {
        write_rgb_png(&refl.to_tile(BBox::new(100.0, 102.56, 20.0, 22.56), 0, 4.0), &out)?;
        println!("wrote {out}");
    }
    Ok(())
}
