//! Train the decoder on one skin and test on a random held-out split.
//!
//! Usage: `cargo run --release --example train_single_sensor -- [passes] [epochs]`

use magskin::datagen::{snake_grid_protocol, SnakeGridParams};
use magskin::eval::evaluate;
use magskin::field_sim::{make_sensor, BoardGeometry, SkinPhysics, VariationParams};
use magskin::neural::{fit_decoder, OutputKind, TrainConfig};
use magskin::protocol::BaselineMode;

fn main() -> magskin::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (passes, epochs) = (arg(1, 8), arg(2, 60));
    let mut sensor = make_sensor("solo", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), 31)?;
    let data = snake_grid_protocol(&mut sensor, &SnakeGridParams::with_passes(passes), BaselineMode::BeforeEach, 32)?;
    let (train, test) = data.split_random(0.9, 33);
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let (model, log) = fit_decoder(&train, &[], OutputKind::NormalForce, &cfg, false)?;
    for e in log.epochs.iter().step_by((epochs / 6).max(1)) {
        println!("epoch {:>3}: train loss {:.4}", e.epoch, e.train_loss);
    }
    let m = evaluate(&model, &test)?;
    println!(
        "{} train / {} test: accuracy {:.2}%, MSE_xy {:.3} mm², MSE_F {:.4} N²",
        train.len(),
        test.len(),
        m.accuracy_pct,
        m.mse_xy,
        m.mse_f
    );
    Ok(())
}
