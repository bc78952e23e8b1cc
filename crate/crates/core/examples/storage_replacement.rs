//! Replaces the distributed storage under running VMs with an incompatible one.
//! The old storage keeps serving until the last old-side VM has moved.

use iaas_upgrade::engine::LogEvent;
use iaas_upgrade::presets;
use iaas_upgrade::scenario::run_coordinator;

fn main() -> iaas_upgrade::Result<()> {
    let run = run_coordinator(&presets::ppu_scenario(), None, None)?;
    for r in &run.reports {
        println!(
            "iteration {} storage check {:?} batch {:?} VM waves {:?}",
            r.iteration,
            r.ppu_check,
            r.final_batch.iter().map(|g| g.as_str()).collect::<Vec<_>>(),
            r.sub_iterations.iter().map(|s| s.batch.len()).collect::<Vec<_>>()
        );
    }
    for rec in &run.log {
        match &rec.event {
            LogEvent::ResourceCreated { resource } | LogEvent::ResourceRemoved { resource } if resource.as_str().starts_with("vstore") => {
                println!("{:>8.2}s {:?}", rec.t_ms as f64 / 1000.0, rec.event)
            }
            LogEvent::VmSupportLost { .. } => println!("support lost: {:?}", rec.event),
            _ => {}
        }
    }
    println!("unsuccessful sets: {:?}", run.unsuccessful_sets);
    Ok(())
}
