//! True-colour PNG of a reflectance tile on disk.
//!
//! cargo run --release --example rgb_composite -- <tile.nvt1> <out.png>

use nightvis::grid::read_tile;
use nightvis::rgb::{compose_rgb, write_rgb_png, GREEN_MIX};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let (tile, out) = match (args.next(), args.next()) {
        (Some(t), Some(o)) => (t, o),
        _ => return Err("usage: rgb_composite <tile.nvt1> <out.png>".into()),
    };
    let tile = read_tile(&tile)?;
    let rgb = compose_rgb(&tile)?;
    let mean = |c: usize| rgb.chunks(3).map(|p| p[c] as f64).sum::<f64>() / (rgb.len() / 3) as f64;
    println!("green = {:.2} r0.47 + {:.2} r0.65 + {:.2} r0.825", GREEN_MIX[0], GREEN_MIX[1], GREEN_MIX[2]);
    println!("mean R {:.1}, G {:.1}, B {:.1}", mean(0), mean(1), mean(2));
    write_rgb_png(&tile, &out)?;
    println!("wrote {out}");
    Ok(())
}
