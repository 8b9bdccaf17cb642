//! The four-way comparison under leave-one-board-out cross-validation.
//!
//! Usage: `cargo run --release --example table2 -- [folds]`, e.g. `-- 0,3` for a quick look.

use magskin::adapt::{build_fleet_data, cross_validate, Condition, CrossValConfig, FleetDataSpec};
use magskin::eval::{render_report, ReportFormat};

fn main() -> magskin::Result<()> {
    let folds: Vec<usize> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|f| f.parse().expect("fold indices")).collect())
        .unwrap_or_default();
    let fleet = build_fleet_data(&FleetDataSpec::default())?;
    let cfg = CrossValConfig { folds, ..CrossValConfig::default() };
    let reports = cross_validate(&fleet, &cfg, &Condition::ALL)?;
    print!("{}", render_report(&reports, ReportFormat::Markdown)?);
    Ok(())
}
