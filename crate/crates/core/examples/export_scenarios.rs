//! Writes the preset scenarios as JSON files the CLI can load.
//!
//! cargo run --example export_scenarios -- crates/core/examples/scenarios

use std::path::PathBuf;

use iaas_upgrade::presets;

fn main() -> iaas_upgrade::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    for (file, s) in [
        ("scenario-a.json", presets::scenario_a()),
        ("scenario-b.json", presets::scenario_b()),
        ("sparse.json", presets::sparse_cluster()),
        ("storage-replacement.json", presets::ppu_scenario()),
        ("two-sets.json", presets::two_set_scenario(4, 2)),
        ("dynamicity.json", presets::dynamicity_scenario()),
        ("suspension.json", presets::suspension_scenario(600_000)),
    ] {
        let mut text = s.to_json();
        text.push('\n');
        std::fs::write(dir.join(file), text)?;
        println!("{}", dir.join(file).display());
    }
    Ok(())
}
