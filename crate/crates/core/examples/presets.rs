//! Run a named experiment preset in-process and write its outputs.
//!
//! Usage: `cargo run --release --example presets -- <name> [key=value ...]`
//! e.g. `-- table2 crossval.folds=[0]` or `-- drift drift.study.total_interactions=20000`.

use magskin::config::RunConfig;
use magskin::experiments::{run_preset, Preset};

fn main() -> magskin::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(name) = args.next() else {
        for p in Preset::ALL {
            println!("{:<20} {}", p.name(), p.description());
        }
        return Ok(());
    };
    let preset: Preset = name.parse()?;
    let mut config = RunConfig::default();
    for o in args {
        config.apply_override(&o)?;
    }
    let out = run_preset(preset, &config)?;
    let dir = config.run_dir(preset.name());
    out.write_to(&dir)?;
    for r in &out.reports {
        println!("{:<70} {:>6.2}%", r.condition, r.accuracy_pct.mean);
    }
    if let Some(md) = out.files.get("drift.md") {
        print!("{}", String::from_utf8_lossy(md));
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
