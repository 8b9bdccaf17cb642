//! Transfer to skins mounted on a thinner, flexible board, before and after adaptation.

use magskin::config::RunConfig;
use magskin::experiments::{run_preset, Preset};

fn main() -> magskin::Result<()> {
    let out = run_preset(Preset::FlexTransfer, &RunConfig::default())?;
    print!("{}", String::from_utf8_lossy(&out.files["report.md"]));
    println!("{}", String::from_utf8_lossy(&out.files["force_bias.json"]));
    Ok(())
}
