//! Cut a scene into overlapping tiles and stitch them back.
//!
//! cargo run --release --example tiling

use nightvis::grid::{tile_partition, tile_stitch, BBox, SceneGeometry};
use nightvis::synth::{generate_scene, SceneRecipe};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (cond, _) = generate_scene(&SceneRecipe::random(9, 96, 128))?;
    let scene = cond.to_tile(BBox::new(110.0, 115.12, 30.0, 33.84), 1_600_000_000, 4.0);
    let geometry = SceneGeometry::of(&scene);
    for stride in [64, 48, 32] {
        let tiles = tile_partition(&scene, 64, stride)?;
        let back = tile_stitch(&tiles, &geometry)?;
        let same = back.data.iter().zip(&scene.data).filter(|(a, b)| a.to_bits() == b.to_bits()).count();
        println!(
            "stride {stride}: {} tiles, {same}/{} values restored exactly",
            tiles.len(),
            scene.data.len()
        );
    }
    Ok(())
}
