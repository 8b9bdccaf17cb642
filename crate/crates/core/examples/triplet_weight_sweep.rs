//! Tuning script for the adaptation triplet weight on one fold.
//!
//! Usage: `cargo run --release --example triplet_weight_sweep -- [fold] [w1,w2,...]`

use magskin::adapt::{adapt_or_keep, build_fleet_data, train_multisensor, CrossValConfig, FleetDataSpec};
use magskin::eval::evaluate;

fn main() -> magskin::Result<()> {
    let fold: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let weights: Vec<f64> = std::env::args()
        .nth(2)
        .unwrap_or_else(|| "0,1,3,10".into())
        .split(',')
        .map(|w| w.parse().expect("weights are numbers"))
        .collect();
    let fleet = build_fleet_data(&FleetDataSpec::default())?;
    let cv = CrossValConfig::default();
    let f = &fleet.data.folds()[fold];
    let train = fleet.data.subset(&f.train)?;
    let (model, _) = train_multisensor(&train, &cv.train, true, cv.output)?;
    let base: f64 = f
        .test
        .iter()
        .map(|id| evaluate(&model, &fleet.data.sensor(id).unwrap().dataset.samples).unwrap().accuracy_pct)
        .sum::<f64>()
        / f.test.len() as f64;
    println!("fold {fold}: unadapted mean accuracy {base:.2}%");
    for w in weights {
        let mut cfg = cv.adapt.clone();
        cfg.triplet_weight = w;
        let mut total = 0.0;
        for id in &f.test {
            let set = fleet.adaptation[id].truncated(390);
            let adapted = adapt_or_keep(&model, &set, &train, &cfg)?;
            total += evaluate(&adapted, &fleet.data.sensor(id)?.dataset.samples)?.accuracy_pct;
        }
        let mean = total / f.test.len() as f64;
        println!("triplet_weight {w:>6}: adapted mean accuracy {mean:.2}% ({:+.2})", mean - base);
    }
    Ok(())
}
