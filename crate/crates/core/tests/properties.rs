use iaas_upgrade::catalog::ActionKind;
use iaas_upgrade::metrics::{per_vm_outage, PenaltyReport, SlaViolation};
use iaas_upgrade::presets;
use iaas_upgrade::types::{ResourceId, Status, TenantId};
use proptest::prelude::*;

fn violations() -> impl Strategy<Value = Vec<(u64, u64, u32)>> {
    prop::collection::vec((0u64..100_000, 1u64..5_000, 1u32..4), 0..12)
}

fn build(raw: &[(u64, u64, u32)], unit: bool) -> Vec<SlaViolation> {
    raw.iter()
        .enumerate()
        .map(|(i, &(start, d, k))| SlaViolation {
            tenant: TenantId::from(format!("t{}", i % 3)),
            start,
            end: start + d,
            impacted: if unit { 1 } else { k },
        })
        .collect()
}

proptest! {
    #[test]
    fn unit_impact_penalty_is_total_duration(raw in violations()) {
        let p = PenaltyReport::from_violations(&build(&raw, true));
        prop_assert_eq!(p.penalty_ms, p.total_violation);
    }

    #[test]
    fn penalty_is_bounded_by_worst_impact(raw in violations()) {
        let p = PenaltyReport::from_violations(&build(&raw, false));
        let k = raw.iter().map(|r| r.2 as u64).max().unwrap_or(1);
        prop_assert!(p.penalty_ms >= p.total_violation);
        prop_assert!(p.penalty_ms <= p.total_violation * k * k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random install failures: every set ends final, no resource is left inactive
    /// or half-upgraded, and isolated resources stay on the old version.
    #[test]
    fn random_failures_leave_a_consistent_cloud(seed in any::<u64>(), p in 0.0f64..0.4, retry in 1u32..4) {
        let mut s = presets::two_set_scenario(3, retry);
        s.failure.seed = seed;
        s.failure.probabilities.insert(ActionKind::Install, p);
        let mut c = s.coordinator(None, Some(50_000_000)).unwrap();
        c.run().unwrap();
        for id in ["A", "B"] {
            let st = c.model.set(&id.into()).unwrap().status;
            prop_assert!(matches!(st, Status::Completed | Status::Failed), "{id} {st:?}");
        }
        for i in 1..=10 {
            let r = ResourceId::from(format!("hv-{}", presets::host_id(i)));
            let res = &c.sim.state.resources[&r];
            prop_assert!(res.active, "{r} inactive");
            let v = &res.components[&"hypervisor".into()];
            prop_assert!(v == "1" || v == "2");
            if c.sim.state.isolated.contains(&r) {
                prop_assert_eq!(v.as_str(), "1");
            }
        }
        for o in per_vm_outage(&c.sim.log).values() {
            prop_assert_eq!(o % 600, 0);
        }
    }
}
