//! Coordinator against rolling batches 1..4, as CSV on stdout.

use iaas_upgrade::baseline::{OrderPolicy, RollingBaselineConfig};
use iaas_upgrade::metrics::{comparison_csv, comparison_report};
use iaas_upgrade::presets;
use iaas_upgrade::scenario::{run_coordinator, run_rolling};

fn main() -> iaas_upgrade::Result<()> {
    for scenario in [presets::scenario_a(), presets::scenario_b()] {
        let mut rows = vec![("coordinator".to_string(), vec![run_coordinator(&scenario, None, None)?.metrics])];
        for b in 1..=4 {
            let cfg = RollingBaselineConfig {
                batch_size: b,
                order_policy: OrderPolicy::Auto,
                seed: 1,
            };
            rows.push((format!("rolling-b{b}"), run_rolling(&scenario, &cfg)?.metrics));
        }
        println!("# {}", scenario.name);
        print!("{}", comparison_csv(&comparison_report(&rows))?);
    }
    Ok(())
}
