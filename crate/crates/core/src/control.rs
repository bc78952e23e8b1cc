//! Control Graph: the resource graph coarsened by edge contraction
//! (container-contained, composition) and by upgrade-method vertex contraction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::ResolvedAction;
use crate::graph::{ResourceGraph, UpgradeMethod};
use crate::types::{DependencyKind, GroupId, ModificationType, Presence, ResourceId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedLevel {
    pub actions: Vec<(ResourceId, ResolvedAction)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceGroup {
    pub id: GroupId,
    pub members: BTreeSet<ResourceId>,
    pub levels: Vec<MergedLevel>,
    pub modification: ModificationType,
    pub active: bool,
}

impl ResourceGroup {
    pub fn has_remaining_changes(&self) -> bool {
        !self.levels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupEdge {
    pub from: GroupId,
    pub to: GroupId,
    pub kind: DependencyKind,
    pub presence: Presence,
    pub incompatible: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlGraph {
    pub groups: BTreeMap<GroupId, ResourceGroup>,
    pub edges: Vec<GroupEdge>,
    pub group_of: BTreeMap<ResourceId, GroupId>,
}

impl ControlGraph {
    pub fn group(&self, id: &GroupId) -> Option<&ResourceGroup> {
        self.groups.get(id)
    }

    pub fn group_of(&self, r: &ResourceId) -> Option<&ResourceGroup> {
        self.group_of.get(r).and_then(|g| self.groups.get(g))
    }
}

fn contracted(kind: DependencyKind) -> bool {
    matches!(kind, DependencyKind::ContainerContained | DependencyKind::Composition)
}

fn find(parent: &mut BTreeMap<ResourceId, ResourceId>, x: &ResourceId) -> ResourceId {
    let p = parent.get(x).cloned().unwrap_or_else(|| x.clone());
    if &p == x {
        return p;
    }
    let root = find(parent, &p);
    parent.insert(x.clone(), root.clone());
    root
}

fn union(parent: &mut BTreeMap<ResourceId, ResourceId>, a: &ResourceId, b: &ResourceId) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent.insert(hi, lo);
    }
}

fn aggregate_modification(mods: impl Iterator<Item = ModificationType>) -> ModificationType {
    let mods: BTreeSet<ModificationType> = mods.collect();
    [
        ModificationType::Upgrade,
        ModificationType::Add,
        ModificationType::Remove,
    ]
    .into_iter()
    .find(|m| mods.contains(m))
    .unwrap_or(ModificationType::NoChange)
}

/// Group ids derive from the smallest member id, so an unchanged member set
/// always keeps its id.
fn group_id(members: &BTreeSet<ResourceId>) -> GroupId {
    GroupId::new(format!("G:{}", members.first().expect("groups are nonempty")))
}

pub fn coarsen(rg: &ResourceGraph) -> ControlGraph {
    let mut parent: BTreeMap<ResourceId, ResourceId> =
        rg.vertices.keys().map(|k| (k.clone(), k.clone())).collect();
    for e in &rg.edges {
        if contracted(e.kind) && rg.vertices.contains_key(&e.from) && rg.vertices.contains_key(&e.to) {
            union(&mut parent, &e.from, &e.to);
        }
    }
    // Split-mode partitions of first levels become single vertices.
    for v in rg.vertices.values() {
        let Some(unit) = rg.unit_of_first_level(&v.id) else { continue };
        if unit.method != UpgradeMethod::SplitMode {
            continue;
        }
        let Some((p1, p2)) = &unit.partitions else { continue };
        let part = if p1.contains(&v.id) { p1 } else { p2 };
        for other in part {
            let same_unit = rg.unit_of_first_level(other).is_some_and(|u| u.id == unit.id);
            if same_unit {
                union(&mut parent, &v.id, other);
            }
        }
    }

    let mut members: BTreeMap<ResourceId, BTreeSet<ResourceId>> = BTreeMap::new();
    let ids: Vec<ResourceId> = rg.vertices.keys().cloned().collect();
    for id in ids {
        let root = find(&mut parent, &id);
        members.entry(root).or_default().insert(id);
    }

    let mut cg = ControlGraph::default();
    for set in members.into_values() {
        let id = group_id(&set);
        let depth = set.iter().map(|m| rg.vertices[m].levels.len()).max().unwrap_or(0);
        let levels = (0..depth)
            .map(|k| MergedLevel {
                actions: set
                    .iter()
                    .filter_map(|m| rg.vertices[m].levels.get(k).map(|l| (m, l)))
                    .flat_map(|(m, l)| l.actions.iter().map(move |a| (m.clone(), a.clone())))
                    .collect(),
            })
            .collect();
        for m in &set {
            cg.group_of.insert(m.clone(), id.clone());
        }
        cg.groups.insert(
            id.clone(),
            ResourceGroup {
                id,
                modification: aggregate_modification(set.iter().map(|m| rg.vertices[m].modification)),
                active: set.iter().all(|m| rg.vertices[m].active),
                levels,
                members: set,
            },
        );
    }

    let mut edges = BTreeSet::new();
    for e in &rg.edges {
        if contracted(e.kind) {
            continue;
        }
        let (Some(a), Some(b)) = (cg.group_of.get(&e.from), cg.group_of.get(&e.to)) else {
            continue;
        };
        if a == b {
            continue;
        }
        edges.insert(GroupEdge {
            from: a.clone(),
            to: b.clone(),
            kind: e.kind,
            presence: e.presence,
            incompatible: e.incompatible,
        });
    }
    cg.edges = edges.into_iter().collect();
    cg
}

/// Recompute-and-diff update: the result equals `coarsen(rg)`; ids of unchanged
/// groups are preserved because ids are a function of membership.
pub fn update_cg(cg: &ControlGraph, rg: &ResourceGraph) -> ControlGraph {
    let fresh = coarsen(rg);
    if &fresh == cg {
        return cg.clone();
    }
    fresh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Dependency, ExecutionLevel, Resource, UpgradeUnit};
    use crate::catalog::ActionKind;
    use crate::types::{ResourceKind, SetId, UnitId};

    fn vertex(id: &str, kind: ResourceKind) -> Resource {
        Resource {
            id: id.into(),
            kind,
            host: None,
            modification: ModificationType::NoChange,
            active: true,
            undo_units: BTreeSet::new(),
            levels: vec![],
            failed_attempts: BTreeMap::new(),
            isolated: false,
            failed: false,
            components: BTreeMap::new(),
            exists: true,
            history: vec![],
        }
    }

    fn level(unit: &str, secs: u64) -> ExecutionLevel {
        ExecutionLevel {
            index: 1,
            actions: vec![ResolvedAction {
                action_id: "install".into(),
                kind: ActionKind::Install,
                product: "p".into(),
                version: "2".into(),
                duration: secs * 1000,
                prerequisite: None,
                wrapup: None,
                undo: vec![],
            }],
            unit: unit.into(),
            undo_unit: "s".into(),
            changes: vec![],
            undo: vec![],
            is_undo: false,
        }
    }

    fn add(rg: &mut ResourceGraph, v: Resource) {
        rg.vertices.insert(v.id.clone(), v);
    }

    #[test]
    fn hypervisor_host_and_disks_collapse() {
        let mut rg = ResourceGraph::default();
        let mut hv = vertex("r1", ResourceKind::Hypervisor);
        hv.levels.push(level("u", 41));
        hv.modification = ModificationType::Upgrade;
        add(&mut rg, hv);
        add(&mut rg, vertex("r16", ResourceKind::ComputeHost));
        add(&mut rg, vertex("d1", ResourceKind::PhysicalDisk));
        add(&mut rg, vertex("vsan", ResourceKind::VirtualStorage));
        rg.edges.push(Dependency::current("r1".into(), "r16".into(), DependencyKind::ContainerContained));
        rg.edges.push(Dependency::current("d1".into(), "r16".into(), DependencyKind::Composition));
        rg.edges.push(Dependency::current("vsan".into(), "r16".into(), DependencyKind::Aggregation));
        let cg = coarsen(&rg);
        assert_eq!(cg.groups.len(), 2);
        let g = cg.group_of(&"r1".into()).unwrap();
        assert_eq!(g.members.len(), 3);
        assert_eq!(g.modification, ModificationType::Upgrade);
        assert_eq!(g.levels.len(), 1);
        assert_eq!(cg.edges.len(), 1);
        assert_eq!(cg.edges[0].kind, DependencyKind::Aggregation);
        assert_eq!(&cg.edges[0].to, &g.id);
    }

    #[test]
    fn singleton_graph_is_isomorphic() {
        let mut rg = ResourceGraph::default();
        add(&mut rg, vertex("a", ResourceKind::Switch));
        add(&mut rg, vertex("b", ResourceKind::Router));
        rg.edges.push(Dependency::current("a".into(), "b".into(), DependencyKind::Communication));
        let cg = coarsen(&rg);
        assert_eq!(cg.groups.len(), 2);
        assert_eq!(cg.edges.len(), 1);
    }

    #[test]
    fn split_partitions_become_two_vertices() {
        let mut rg = ResourceGraph::default();
        let ids = ["r1", "r2", "r3", "r4"];
        for id in ids {
            let mut v = vertex(id, ResourceKind::Router);
            v.levels.push(level("s/u1", 10));
            add(&mut rg, v);
        }
        let p1: BTreeSet<ResourceId> = ["r1".into(), "r2".into()].into_iter().collect();
        let p2: BTreeSet<ResourceId> = ["r3".into(), "r4".into()].into_iter().collect();
        rg.units.insert(
            UnitId::from("s/u1"),
            UpgradeUnit {
                id: "s/u1".into(),
                members: p1.union(&p2).cloned().collect(),
                method: UpgradeMethod::SplitMode,
                undo_unit: SetId::from("s"),
                partitions: Some((p1.clone(), p2.clone())),
                switchover_done: false,
                switch_actions: vec![],
            },
        );
        let cg = coarsen(&rg);
        let groups: Vec<&BTreeSet<ResourceId>> = cg.groups.values().map(|g| &g.members).collect();
        assert_eq!(groups, vec![&p1, &p2]);
        // merged level k holds exactly the members' level-k actions
        assert_eq!(cg.groups.values().next().unwrap().levels[0].actions.len(), 2);
    }

    #[test]
    fn update_keeps_ids_and_drops_finished_members() {
        let mut rg = ResourceGraph::default();
        let mut a = vertex("a", ResourceKind::Hypervisor);
        a.levels.push(level("u", 41));
        add(&mut rg, a);
        add(&mut rg, vertex("b", ResourceKind::Hypervisor));
        let cg = coarsen(&rg);
        assert_eq!(update_cg(&cg, &rg), cg);
        rg.vertices.get_mut(&ResourceId::from("a")).unwrap().levels.clear();
        let cg2 = update_cg(&cg, &rg);
        assert!(cg2.groups[&GroupId::from("G:a")].levels.is_empty());
        assert_eq!(cg2.groups.keys().collect::<Vec<_>>(), cg.groups.keys().collect::<Vec<_>>());
        rg.vertices.remove(&ResourceId::from("b"));
        let cg3 = update_cg(&cg2, &rg);
        assert!(!cg3.groups.contains_key(&GroupId::from("G:b")));
        assert_eq!(cg3, coarsen(&rg));
    }
}
