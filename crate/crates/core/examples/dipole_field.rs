//! Field of the nominal magnetized skin at the five magnetometers, and the
//! change a 1 mm press makes to it.

use magskin::field_sim::{
    dipole_field, make_sensor, BoardGeometry, DipoleGrid, GridSpec, IndenterContact, SkinPhysics, VariationParams,
};
use nalgebra::{Point3, Vector3};

fn main() -> magskin::Result<()> {
    // one dipole, observed on its axis and beside it
    let m = Vector3::new(0.0, 0.0, 1.0);
    for obs in [Point3::new(0.0, 0.0, -2.0), Point3::new(2.0, 0.0, 0.0)] {
        let b = dipole_field(&Point3::origin(), &m, &obs)?;
        println!("single dipole seen from ({}, {}, {}): B = ({:+.4}, {:+.4}, {:+.4})", obs.x, obs.y, obs.z, b.x, b.y, b.z);
    }

    let geometry = BoardGeometry::canonical();
    let grid = DipoleGrid::nominal(&geometry, &GridSpec::default())?;
    println!("\nskin grid: {} dipoles", grid.len());
    for (i, p) in geometry.magnetometer_points().iter().enumerate() {
        let b = grid.field_at(p)?;
        println!("magnetometer {i} at ({:+.1}, {:+.1}): B = ({:+.4}, {:+.4}, {:+.4})", p.x, p.y, b.x, b.y, b.z);
    }

    let sensor = make_sensor("demo", &geometry, &VariationParams::none(), &SkinPhysics::default(), 0)?;
    let contact = IndenterContact::new(3.0, -2.0, 1.0, sensor.physics.tip_radius);
    let delta = sensor.clean_delta(&contact)?;
    println!("\npress at (3, -2), 1 mm deep:");
    for (i, d) in delta.chunks(3).enumerate() {
        println!("  magnetometer {i}: dB = ({:+.5}, {:+.5}, {:+.5})", d[0], d[1], d[2]);
    }
    println!("normal force {:.3} N", sensor.contact_force(&contact)?.z);
    Ok(())
}
