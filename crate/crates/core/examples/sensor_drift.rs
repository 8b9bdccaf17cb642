//! A skin wearing in: softening lowers the force at a fixed depth while the
//! no-load baseline wanders.

use magskin::field_sim::{make_sensor, BoardGeometry, IndenterContact, SkinPhysics, VariationParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> magskin::Result<()> {
    let mut sensor = make_sensor("worn", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), 9)?;
    let contact = IndenterContact::new(0.0, 0.0, 1.0, sensor.physics.tip_radius);
    let rest = sensor.rest_field()?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("{:>8} {:>10} {:>10} {:>16}", "n", "softening", "Fz (N)", "|baseline shift|");
    for step in [0u64, 5_000, 10_000, 20_000, 30_000, 50_000] {
        sensor.advance_drift(step - sensor.drift.interaction_count);
        let no_load = sensor.read_flux(None, &mut rng)?.flux;
        let shift = no_load.iter().zip(&rest).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!(
            "{step:>8} {:>10.4} {:>10.4} {:>16.4}",
            sensor.drift.softening_factor,
            sensor.contact_force(&contact)?.z,
            shift
        );
    }
    Ok(())
}
