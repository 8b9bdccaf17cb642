//! Error over 50,000 interactions for each baseline refresh policy.

use magskin::eval::{drift_study, DriftStudySpec};
use magskin::field_sim::{make_sensor, BoardGeometry, SkinPhysics, VariationParams};
use magskin::neural::{OutputKind, TrainConfig};

fn main() -> magskin::Result<()> {
    let sensor = make_sensor("drift0", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), 5)?;
    let train = TrainConfig { epochs: 40, ..TrainConfig::default() };
    let curves = drift_study(&sensor, &DriftStudySpec::default(), &train, OutputKind::NormalForce)?;
    for c in &curves {
        println!("baseline {} (Spearman rho {:.3}, p {:.2e})", c.mode, c.trend.rho, c.trend.p_value);
        for w in &c.windows {
            println!(
                "  from {:>6}: MSE_xy {:>8.3} ± {:.3} mm², signed Fz error {:+.4} N",
                w.start, w.mse_xy, w.mse_xy_se, w.mean_signed_force_error
            );
        }
    }
    Ok(())
}
