use super::*;
use crate::engine::EventKind;
use crate::presets;
use crate::request::UpgradeRequestModel;
use crate::scenario::ScenarioFile;

pub(crate) fn graph_for(s: &ScenarioFile) -> (ResourceGraph, UpgradeRequestModel, ClusterState, crate::catalog::ResourceUpgradeCatalog) {
    let config = s.to_state();
    let catalog = s.catalog().unwrap();
    let mut model = UpgradeRequestModel::new();
    for e in &s.events {
        if let EventKind::UpgradeRequest { request } = &e.kind {
            model.submit_request(request.clone(), &config, &catalog, 0).unwrap();
        }
    }
    let rg = build_rg(&config, &model, &catalog).unwrap();
    (rg, model, config, catalog)
}

fn hv(i: usize) -> ResourceId {
    format!("hv-{}", presets::host_id(i)).into()
}

#[test]
fn unchanged_graph_mirrors_the_configuration() {
    let s = presets::scenario_a();
    let config = s.to_state();
    let rg = ResourceGraph::from_config(&config).unwrap();
    for id in config.resources.keys() {
        assert_eq!(rg.vertex(id).unwrap().modification, ModificationType::NoChange);
    }
    for d in &config.dependencies {
        assert!(rg.edges.iter().any(|e| e.from == d.from && e.to == d.to && e.kind == d.kind));
    }
    assert!(rg.units.is_empty());
}

#[test]
fn hypervisor_upgrade_gives_one_rolling_level_per_hypervisor() {
    let (rg, ..) = graph_for(&presets::scenario_a());
    for i in 1..=10 {
        let v = rg.vertex(&hv(i)).unwrap();
        assert_eq!(v.levels.len(), 1);
        assert_eq!(v.modification, ModificationType::Upgrade);
        assert!(v.levels[0].deactivates());
        let unit = rg.unit_of_first_level(&hv(i)).unwrap();
        assert_eq!(unit.method, UpgradeMethod::Rolling);
        assert_eq!(unit.members.len(), 1);
    }
    assert!(!rg.has_pending_levels(&presets::host_id(1).as_str().into()));
}

#[test]
fn storage_replacement_adds_the_new_storage_in_a_ppu_unit() {
    let (rg, ..) = graph_for(&presets::ppu_scenario());
    let new = rg.vertex(&"vstore+ceph".into()).unwrap();
    assert!(!new.exists);
    assert_eq!(new.modification, ModificationType::Add);
    let unit = rg.unit_of_first_level(&"vstore+ceph".into()).unwrap();
    assert_eq!(unit.method, UpgradeMethod::Ppu);
    assert!(unit.members.contains(&"vstore".into()));
}

#[test]
fn failed_level_returns_the_reverse_undo_of_the_completed_prefix() {
    let (mut rg, ..) = graph_for(&presets::scenario_a());
    let level = rg.vertices[&hv(1)].levels[0].clone();
    let undo = rg.level_failed(&hv(1), 2).unwrap();
    let expected: Vec<ResolvedAction> = level.actions[..2].iter().rev().flat_map(|a| a.undo.iter().cloned()).collect();
    assert_eq!(undo, expected);
    assert_eq!(rg.vertices[&hv(1)].failed_attempts.values().sum::<u32>(), 1);
}

#[test]
fn exhausted_members_are_released_for_good_by_a_set_undo() {
    let (mut rg, model, config, catalog) = graph_for(&presets::two_set_scenario(5, 1));
    let set = SetId::from("A");
    rg.level_failed(&hv(1), 0).unwrap();
    assert_eq!(rg.isolate_exhausted(), vec![hv(1)]);
    assert!(rg.threshold_violated(&set, &model));
    rg.undo_change_set(&set, &config, &catalog).unwrap();
    assert!(!rg.vertices[&hv(1)].isolated);
    assert!(rg.isolate_exhausted().is_empty());
    assert!(!rg.set_pending(&set));
    assert!(rg.set_pending(&"B".into()));
}

#[test]
fn failed_undo_marks_the_resource_failed() {
    let (mut rg, ..) = graph_for(&presets::scenario_a());
    rg.mark_failed(&hv(3));
    let v = &rg.vertices[&hv(3)];
    assert!(v.failed && v.isolated);
    assert!(v.levels.is_empty());
}
