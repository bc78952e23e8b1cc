//! How many hosts an iteration may take down, and how many VMs may cross to
//! the new side, for a given cloud state.

use iaas_upgrade::migration::compute_v_i;
use iaas_upgrade::planner::{compute_s_i, compute_scaling_reservation, compute_z_i, old_side_scaling_tenants, PartitionView};
use iaas_upgrade::presets;

fn main() {
    let state = presets::scenario_a().to_state();
    let view = PartitionView::of(&state);
    let a_i = old_side_scaling_tenants(&state);
    for t_i in [41_000, 64_000, 250_000] {
        let s_i = compute_s_i(state.tenants.values(), t_i);
        let resv = compute_scaling_reservation(s_i, a_i, view.k);
        let z = compute_z_i(&view, resv, 1);
        println!("T_i {:>5.1}s  S_i {s_i}  A_i {a_i}  reservation {resv} hosts  Z_i {z}", t_i as f64 / 1000.0);
    }
    println!("V_i with one host reserved for failover: {}", compute_v_i(&view, 0, 1));
}
