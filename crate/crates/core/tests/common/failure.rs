//! Scripted-failure runs over two independent change sets.

use std::collections::BTreeMap;

use iaas_upgrade::engine::ScriptedFailure;
use iaas_upgrade::presets::{host_id, two_set_scenario};
use iaas_upgrade::schedule::LanePurpose;
use iaas_upgrade::types::{ResourceId, SetId, Status};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    /// Members of set A that must end upgraded.
    pub threshold_a: u32,
    pub max_retry: u32,
    /// Failing resource and number of consecutive failed upgrade attempts.
    pub failures: BTreeMap<ResourceId, u32>,
}

fn hv(i: usize) -> ResourceId {
    format!("hv-{}", host_id(i)).into()
}

pub fn draw(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_retry = rng.gen_range(1..=3);
    let mut failures = BTreeMap::new();
    for _ in 0..rng.gen_range(0..=2) {
        failures.insert(hv(rng.gen_range(1..=5)), rng.gen_range(1..=max_retry + 1));
    }
    if rng.gen_bool(0.5) {
        failures.insert(hv(rng.gen_range(6..=10)), rng.gen_range(1..=max_retry + 1));
    }
    Case {
        threshold_a: [0, 4, 5][rng.gen_range(0..3)],
        max_retry,
        failures,
    }
}

fn in_a(r: &ResourceId) -> bool {
    (1..=5).any(|i| &hv(i) == r)
}

/// Panics with the seed and case on the first broken invariant.
pub fn check(seed: u64) {
    let case = draw(seed);
    let mut s = two_set_scenario(case.threshold_a, case.max_retry);
    s.failure.seed = seed;
    s.failure.scripted = case
        .failures
        .iter()
        .flat_map(|(r, n)| {
            (1..=*n).map(move |k| ScriptedFailure {
                occurrence: None,
                resource: Some(r.clone()),
                action: Some("install:hypervisor@2".into()),
                nth: Some(k),
            })
        })
        .collect();
    let c = {
        let mut c = s.coordinator(None, Some(50_000_000)).unwrap();
        c.run().unwrap();
        c
    };
    let ctx = format!("seed {seed}, retry {}, threshold {}, failures {:?}", case.max_retry, case.threshold_a, case.failures);
    let state = &c.sim.state;
    let version = |r: &ResourceId| state.resources[r].components[&"hypervisor".into()].clone();

    let isolated_expected: Vec<&ResourceId> =
        case.failures.iter().filter(|(_, n)| **n >= case.max_retry).map(|(r, _)| r).collect();
    let lost_a = isolated_expected.iter().filter(|r| in_a(r)).count() as u32;
    let breach_a = 5 - lost_a < case.threshold_a;

    // (b) retry up to max-retry, then isolation
    for (r, n) in &case.failures {
        let exhausted = *n >= case.max_retry;
        // isolated-only members of an undone set are released at the undo version
        let released = breach_a && in_a(r);
        assert_eq!(state.isolated.contains(r), exhausted && !released, "isolation of {r}: {ctx}");
        // (a) resource-level undo restored the pre-level version
        if exhausted {
            assert_eq!(version(r), "1", "{r} not restored: {ctx}");
            assert!(state.resources[r].active, "{r} left inactive: {ctx}");
        }
    }
    let recovered = |r: &ResourceId| {
        c.reports.iter().flat_map(|rep| &rep.schedules).any(|s| {
            s.schedule.lanes.iter().any(|l| l.purpose == LanePurpose::Recovery && l.resource.as_ref() == Some(r))
        })
    };
    // members of a set undone early may never be attempted
    for r in case.failures.keys().filter(|r| !(breach_a && in_a(r))) {
        assert!(recovered(r), "no resource-level undo of {r}: {ctx}");
    }
    if breach_a {
        assert!(case.failures.keys().filter(|r| in_a(r)).any(&recovered), "{ctx}");
    }

    let status = |id: &str| c.model.set(&SetId::from(id)).unwrap().status;
    // (c) threshold breach undoes the whole set
    if breach_a {
        assert_eq!(status("A"), Status::Failed, "{ctx}");
        for i in 1..=5 {
            assert_eq!(version(&hv(i)), "1", "{} not at undo version: {ctx}", hv(i));
        }
    } else {
        assert_eq!(status("A"), Status::Completed, "{ctx}");
        for i in 1..=5 {
            if !state.isolated.contains(&hv(i)) {
                assert_eq!(version(&hv(i)), "2", "{}: {ctx}", hv(i));
            }
        }
    }
    // (d) the other set is unaffected
    assert_eq!(status("B"), Status::Completed, "{ctx}");
    for i in 6..=10 {
        if !state.isolated.contains(&hv(i)) {
            assert_eq!(version(&hv(i)), "2", "{}: {ctx}", hv(i));
        }
    }
}
