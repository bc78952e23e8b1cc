//! Two change sets; one member of set A keeps failing its install.
//! Retries, isolation and the undo threshold decide what each set ends with.

use iaas_upgrade::engine::ScriptedFailure;
use iaas_upgrade::presets;

fn main() -> iaas_upgrade::Result<()> {
    for threshold in [4, 5] {
        let mut s = presets::two_set_scenario(threshold, 2);
        s.failure.scripted = (1..=2)
            .map(|k| ScriptedFailure {
                occurrence: None,
                resource: Some("hv-h02".into()),
                action: Some("install:hypervisor@2".into()),
                nth: Some(k),
            })
            .collect();
        let mut c = s.coordinator(None, None)?;
        c.run()?;
        println!("undo threshold {threshold}:");
        for r in &c.reports {
            if !r.failed_resources.is_empty() || !r.undone.is_empty() || !r.completed_sets.is_empty() {
                println!(
                    "  iteration {} failed {:?} undone {:?} completed {:?}",
                    r.iteration, r.failed_resources, r.undone, r.completed_sets
                );
            }
        }
        for id in ["A", "B"] {
            println!("  set {id}: {:?}", c.model.set(&id.into())?.status);
        }
        println!("  isolated: {:?}", c.sim.state.isolated);
    }
    Ok(())
}
