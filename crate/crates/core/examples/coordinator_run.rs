//! Upgrades every hypervisor of a 10-host cloud and prints the iterations.
//!
//! cargo run --example coordinator_run [-- path/to/scenario.json]

use iaas_upgrade::presets;
use iaas_upgrade::scenario::{load_scenario, run_coordinator};

fn main() -> iaas_upgrade::Result<()> {
    let scenario = match std::env::args().nth(1) {
        Some(p) => load_scenario(p)?,
        None => presets::scenario_a(),
    };
    let run = run_coordinator(&scenario, None, None)?;
    for r in &run.reports {
        let batch: Vec<&str> = r.final_batch.iter().map(|g| g.as_str()).collect();
        let waves: Vec<usize> = r.sub_iterations.iter().map(|s| s.batch.len()).collect();
        println!(
            "iteration {:>2} at {:>8.2}s  batch [{}]  consolidation steps {}  migration waves {:?}",
            r.iteration,
            r.finished_ms as f64 / 1000.0,
            batch.join(" "),
            r.consolidation.len(),
            waves
        );
    }
    println!("finished after {:.2}s in phase {:?}", run.metrics.duration as f64 / 1000.0, run.final_phase);
    for (tenant, ms) in &run.metrics.application_outage {
        println!("  {tenant}: application outage {:.1}s", *ms as f64 / 1000.0);
    }
    println!("penalty {:.2} q'", run.metrics.penalty.penalty);
    Ok(())
}
