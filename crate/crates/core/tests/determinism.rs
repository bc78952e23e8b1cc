use iaas_upgrade::baseline::{OrderPolicy, RollingBaselineConfig};
use iaas_upgrade::presets;
use iaas_upgrade::scenario::{run_coordinator, run_rolling};

#[test]
fn coordinator_reports_are_byte_identical() {
    for s in [presets::scenario_b(), presets::dynamicity_scenario()] {
        let a = run_coordinator(&s, Some(11), None).unwrap();
        let b = run_coordinator(&s, Some(11), None).unwrap();
        assert_eq!(a.reports_jsonl, b.reports_jsonl);
        assert_eq!(a.log, b.log);
    }
}

#[test]
fn sampled_orderings_depend_only_on_the_seed() {
    let s = presets::scenario_a();
    let cfg = |seed| RollingBaselineConfig {
        batch_size: 2,
        order_policy: OrderPolicy::SampleN(20),
        seed,
    };
    let orderings = |seed| run_rolling(&s, &cfg(seed)).unwrap().runs.into_iter().map(|r| r.ordering).collect::<Vec<_>>();
    assert_eq!(orderings(4), orderings(4));
    assert_ne!(orderings(4), orderings(5));
}
