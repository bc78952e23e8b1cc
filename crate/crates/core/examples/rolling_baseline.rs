//! Rolling upgrades in fixed-size batches, averaged over host orderings.

use iaas_upgrade::baseline::{OrderPolicy, RollingBaselineConfig};
use iaas_upgrade::presets;
use iaas_upgrade::scenario::run_rolling;

fn main() -> iaas_upgrade::Result<()> {
    let scenario = presets::scenario_b();
    println!("batch  duration(s)  migrations  penalty(q')  orderings");
    for batch_size in 1..=4 {
        let cfg = RollingBaselineConfig {
            batch_size,
            order_policy: OrderPolicy::SampleN(50),
            seed: 7,
        };
        let r = run_rolling(&scenario, &cfg)?;
        println!(
            "{batch_size:>5}  {:>11.2}  {:>10.2}  {:>11.2}  {:>9}{}",
            r.mean_duration_ms() / 1000.0,
            r.mean_migrations(),
            r.mean_penalty(),
            r.runs.len(),
            if r.infeasible() { "  (some batches could not be evacuated)" } else { "" }
        );
    }
    Ok(())
}
