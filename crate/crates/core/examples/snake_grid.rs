//! Record one snake-grid pass, save it as a dataset container and a CSV.
//!
//! Usage: `cargo run --example snake_grid -- [out_dir]`

use std::path::PathBuf;

use magskin::datagen::{snake_grid_protocol, Dataset, SnakeGridParams};
use magskin::field_sim::{make_sensor, BoardGeometry, SkinPhysics, VariationParams};
use magskin::protocol::BaselineMode;

fn main() -> magskin::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "snake_grid_out".into()));
    std::fs::create_dir_all(&out)?;
    let mut sensor = make_sensor("s0", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), 1)?;
    let params = SnakeGridParams::default();
    let data = snake_grid_protocol(&mut sensor, &params, BaselineMode::BeforeEach, 2)?;
    println!("{} indentations: {} locations x {} depths", data.len(), params.locations().len(), params.depths.len());
    for s in data.samples.iter().take(5) {
        println!("  ({:+.0}, {:+.0}) depth {:.1} mm -> Fz {:.3} N", s.location[0], s.location[1], s.depth, s.force[2]);
    }

    let path = out.join("s0.msd");
    data.save(&path)?;
    data.write_csv(std::fs::File::create(out.join("s0.csv"))?)?;
    let back = Dataset::load(&path)?;
    assert_eq!(back, data);
    // the metadata alone regenerates the samples
    assert_eq!(Dataset::regenerate(&back.metadata)?, data);
    println!("wrote {} (hash {})", path.display(), data.metadata.config_hash);
    Ok(())
}
