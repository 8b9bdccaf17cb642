//! Wire-format session: encode, corrupt a few bits, decode with resync, then
//! turn frames into flux deltas with a baseline tracker.

use magskin::datagen::{record_snake_session, SnakeGridParams};
use magskin::field_sim::{make_sensor, BoardGeometry, SkinPhysics, VariationParams};
use magskin::protocol::{apply_baseline, decode_stream, encode_stream, BaselineMode, BaselineTracker, FRAME_LEN};

fn main() -> magskin::Result<()> {
    let mut sensor = make_sensor("st", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), 4)?;
    let (frames, markers) = record_snake_session(&mut sensor, &SnakeGridParams::default(), 5)?;
    let mut bytes = encode_stream(&frames);
    println!("{} frames, {} bytes ({} per frame)", frames.len(), bytes.len(), FRAME_LEN);

    let (clean, _) = decode_stream(&bytes);
    assert!(clean.iter().zip(&frames).all(|(a, b)| a.bit_eq(b)));

    for bit in [8_000usize, 100_003, 400_017] {
        bytes[bit / 8] ^= 1 << (bit % 8);
    }
    let (_, diag) = decode_stream(&bytes);
    println!(
        "after 3 bit flips: {} frames, {} CRC failures, {} bytes skipped",
        diag.frames, diag.crc_failures, diag.skipped_bytes
    );

    for mode in [BaselineMode::Once, BaselineMode::EveryK(50), BaselineMode::BeforeEach] {
        let deltas = apply_baseline(&mut BaselineTracker::new(mode)?, &clean, &markers)?;
        let mean_norm = deltas.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / deltas.len() as f64;
        println!("{:>12}: {} deltas, mean norm {mean_norm:.4}", mode.to_string(), deltas.len());
    }
    Ok(())
}
