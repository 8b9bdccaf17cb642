//! Train on five boards with the triplet loss, then adapt to each skin of the
//! held-out board from unlabeled line indentations.
//!
//! Usage: `cargo run --release --example triplet_adaptation -- [budget]`

use magskin::adapt::{build_fleet_data, self_supervised_adapt, train_multisensor, CrossValConfig, FleetDataSpec};
use magskin::eval::evaluate;

fn main() -> magskin::Result<()> {
    let budget: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(390);
    let fleet = build_fleet_data(&FleetDataSpec::default())?;
    let cv = CrossValConfig::default();
    let fold = &fleet.data.folds()[0];
    let train = fleet.data.subset(&fold.train)?;
    println!("training on {} skins, holding out {:?}", fold.train.len(), fold.test);
    let (model, _) = train_multisensor(&train, &cv.train, true, cv.output)?;
    for id in &fold.test {
        let set = fleet.adaptation[id].truncated(budget);
        set.audit()?;
        let (adapted, log) = self_supervised_adapt(&model, &set, &train, &cv.adapt)?;
        let samples = &fleet.data.sensor(id)?.dataset.samples;
        let (before, after) = (evaluate(&model, samples)?, evaluate(&adapted, samples)?);
        println!(
            "{id}: accuracy {:.1}% -> {:.1}%, MSE_xy {:.3} -> {:.3} ({} epochs{})",
            before.accuracy_pct,
            after.accuracy_pct,
            before.mse_xy,
            after.mse_xy,
            log.epochs.len(),
            if log.stopped_early { ", stopped early" } else { "" }
        );
    }
    Ok(())
}
