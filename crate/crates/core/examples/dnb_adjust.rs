//! Band weights from the shipped response curves and the lunar reflectance
//! they are compared against.
//!
//! cargo run --release --example dnb_adjust -- [curves-dir]

use std::path::PathBuf;

use nightvis::dnb::{dnb_reflectance, merge_bands, DnbCurves, LunarGeometry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/curves"));
    let irradiance = 0.015;
    let curves = DnbCurves::read_dir(&dir, irradiance)?;
    let (w065, w0825) = curves.weights()?;
    println!("w_0.65 = {w065:.6}, w_0.825 = {w0825:.6}");

    let r065 = [0.05f32, 0.20, 0.60];
    let r0825 = [0.30f32, 0.25, 0.55];
    let merged = merge_bands(&r065, &r0825, w065, w0825)?;
    for zenith in [20.0, 45.0, 70.0] {
        let geometry = LunarGeometry::new(zenith)?;
        let cos = geometry.cos_zenith()?;
        print!("lunar zenith {zenith:>4}:");
        for m in &merged {
            // radiance a scene with this adjusted reflectance would return
            let radiance = *m as f64 * irradiance * cos / std::f64::consts::PI;
            print!("  {:.4}", dnb_reflectance(radiance, irradiance, geometry)?);
        }
        println!();
    }
    println!("adjusted retrieval: {merged:?}");
    match LunarGeometry::new(95.0)?.cos_zenith() {
        Err(e) => println!("moon down: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
