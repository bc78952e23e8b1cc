//! Scale-out bursts during the upgrade, then a cloud so full the coordinator
//! has to wait for tenants to scale in.

use iaas_upgrade::coordinator::Phase;
use iaas_upgrade::engine::LogEvent;
use iaas_upgrade::presets;
use iaas_upgrade::scenario::run_coordinator;

fn main() -> iaas_upgrade::Result<()> {
    let run = run_coordinator(&presets::dynamicity_scenario(), None, None)?;
    let count = |f: fn(&LogEvent) -> bool| run.log.iter().filter(|r| f(&r.event)).count();
    println!(
        "bursts: placed {} deferred {} rejected {}",
        count(|e| matches!(e, LogEvent::ScaleOutPlaced { .. })),
        count(|e| matches!(e, LogEvent::ScaleOutDeferred { .. })),
        count(|e| matches!(e, LogEvent::ScaleOutRejected { .. }))
    );

    let run = run_coordinator(&presets::suspension_scenario(600_000), None, None)?;
    let mut last = None;
    for r in &run.reports {
        if r.phase != last {
            println!("{:>8.2}s {:?}", r.started_ms as f64 / 1000.0, r.phase.unwrap_or(Phase::Running));
            last = r.phase;
        }
    }
    println!("unsuccessful sets: {:?}", run.unsuccessful_sets);
    Ok(())
}
