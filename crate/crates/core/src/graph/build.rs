//! Construction of the resource graph from change sets, including upgrade-unit
//! identification and merging of new request graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Dependency, ExecutionLevel, Resource, ResourceGraph, UndoUnit, UpgradeMethod, UpgradeUnit};
use crate::catalog::{ActionKind, ComponentChange, Placement, ResolvedAction, ResourceUpgradeCatalog};
use crate::cluster::ClusterState;
use crate::error::Result;
use crate::request::{ChangeSet, UpgradeRequestModel};
use crate::types::{DependencyKind, HostId, Presence, ProductId, ResourceId, ResourceKind, SetId, UnitId, Version};

/// Planned level of one resource inside a new request graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedLevel {
    pub kind: ResourceKind,
    pub host: Option<HostId>,
    pub exists: bool,
    pub changes: Vec<ComponentChange>,
    pub actions: Vec<ResolvedAction>,
    pub undo: Vec<ResolvedAction>,
}

/// Graph built from one change set alone, without regard to ongoing upgrades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewRequestGraph {
    pub set: SetId,
    pub max_retry: u32,
    pub levels: BTreeMap<ResourceId, PlannedLevel>,
    /// Annotated edges: config edges with changed attributes plus future edges.
    pub edges: Vec<Dependency>,
    pub units: Vec<UpgradeUnit>,
    pub unit_of: BTreeMap<ResourceId, UnitId>,
}

fn components_of(config: &ClusterState, r: &ResourceId) -> BTreeMap<ProductId, Version> {
    config
        .resources
        .get(r)
        .map(|x| x.components.clone())
        .unwrap_or_default()
}

fn resolve_level(
    changes: &[ComponentChange],
    catalog: &ResourceUpgradeCatalog,
) -> Result<(Vec<ResolvedAction>, Vec<ResolvedAction>)> {
    let mut actions = Vec::new();
    let mut undos = Vec::new();
    for c in changes {
        let op = catalog.lookup_upgrade_operation(c)?;
        actions.extend(op.actions);
        undos.push(op.undo);
    }
    let undo = undos.into_iter().rev().flatten().collect();
    Ok((actions, undo))
}

/// Levels and incompatibility factors of one change set.
pub fn build_nrg(set: &ChangeSet, config: &ClusterState, catalog: &ResourceUpgradeCatalog) -> Result<NewRequestGraph> {
    let mut per: BTreeMap<ResourceId, PlannedLevel> = BTreeMap::new();
    for change in &set.changes {
        for t in &change.targets {
            let existing = config.resources.get(t);
            let from = existing.and_then(|r| r.components.get(&change.product).cloned());
            let cc = ComponentChange {
                product: change.product.clone(),
                from: from.clone(),
                to: change.target_version.clone(),
                undo_to: change.undo_version_for(from.as_ref()),
            };
            if cc.from == cc.to {
                continue;
            }
            let (kind, host) = match (existing, &change.new_resource) {
                (Some(r), _) => (r.kind, r.host.clone()),
                (None, Some(n)) => (n.kind, n.host.clone()),
                (None, None) => (ResourceKind::Other, None),
            };
            per.entry(t.clone())
                .or_insert_with(|| PlannedLevel {
                    kind,
                    host,
                    exists: existing.is_some(),
                    changes: Vec::new(),
                    actions: Vec::new(),
                    undo: Vec::new(),
                })
                .changes
                .push(cc);
        }
    }
    for level in per.values_mut() {
        let (a, u) = resolve_level(&level.changes, catalog)?;
        level.actions = a;
        level.undo = u;
    }

    let projected = |r: &ResourceId| -> BTreeMap<ProductId, Version> {
        let mut c = components_of(config, r);
        if let Some(l) = per.get(r) {
            for ch in &l.changes {
                match &ch.to {
                    Some(v) => {
                        c.insert(ch.product.clone(), v.clone());
                    }
                    None => {
                        c.remove(&ch.product);
                    }
                }
            }
        }
        c
    };

    let mut edges = Vec::new();
    for d in &config.dependencies {
        if !per.contains_key(&d.from) && !per.contains_key(&d.to) {
            continue;
        }
        let (dc, dp) = (components_of(config, &d.from), projected(&d.from));
        let (sc, sp) = (components_of(config, &d.to), projected(&d.to));
        let incompatible = !catalog.components_compatible(&dp, &sc) || !catalog.components_compatible(&dc, &sp);
        if incompatible {
            let mut e = Dependency::current(d.from.clone(), d.to.clone(), d.kind);
            e.incompatible = true;
            e.min_sponsors = d.min_sponsors;
            edges.push(e);
        }
    }
    Ok(NewRequestGraph {
        set: set.id.clone(),
        max_retry: set.max_retry,
        levels: per,
        edges,
        units: Vec::new(),
        unit_of: BTreeMap::new(),
    })
}

struct UnionFind(BTreeMap<ResourceId, ResourceId>);

impl UnionFind {
    fn find(&mut self, x: &ResourceId) -> ResourceId {
        let p = self.0.entry(x.clone()).or_insert_with(|| x.clone()).clone();
        if &p == x {
            return p;
        }
        let root = self.find(&p);
        self.0.insert(x.clone(), root.clone());
        root
    }

    fn union(&mut self, a: &ResourceId, b: &ResourceId) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller id as root for determinism
            if ra < rb {
                self.0.insert(rb, ra);
            } else {
                self.0.insert(ra, rb);
            }
        }
    }
}

/// Groups incompatible resources into units and picks each unit's method.
/// Resources without incompatibilities become singleton rolling units.
pub fn identify_upgrade_units(nrg: &mut NewRequestGraph, config: &ClusterState, catalog: &ResourceUpgradeCatalog) -> Result<()> {
    let mut uf = UnionFind(BTreeMap::new());
    for e in nrg.edges.iter().filter(|e| e.incompatible) {
        uf.union(&e.from, &e.to);
    }
    let mut components: BTreeMap<ResourceId, BTreeSet<ResourceId>> = BTreeMap::new();
    let ids: Vec<ResourceId> = uf.0.keys().cloned().collect();
    for id in ids {
        let root = uf.find(&id);
        components.entry(root).or_default().insert(id);
    }

    let mut n = 0;
    let mut grouped = BTreeSet::new();
    for members in components.into_values() {
        n += 1;
        let unit_id = UnitId::new(format!("{}/u{n}", nrg.set));
        let incompat: Vec<Dependency> = nrg
            .edges
            .iter()
            .filter(|e| e.incompatible && members.contains(&e.from))
            .cloned()
            .collect();
        let ppu = incompat.iter().any(|e| {
            e.kind == DependencyKind::VmSupportingStorageController
                || (e.kind == DependencyKind::Aggregation
                    && config
                        .dependents_of(&e.from, DependencyKind::VmSupportingStorageController)
                        .next()
                        .is_some())
        });
        let unit = if ppu {
            ppu_transform(nrg, unit_id, members, &incompat, config, catalog)?
        } else {
            split_transform(nrg, unit_id, members)
        };
        grouped.extend(unit.members.iter().cloned());
        for m in &unit.members {
            if nrg.levels.contains_key(m) {
                nrg.unit_of.insert(m.clone(), unit.id.clone());
            }
        }
        nrg.units.push(unit);
    }
    let singles: Vec<ResourceId> = nrg.levels.keys().filter(|r| !grouped.contains(*r)).cloned().collect();
    for r in singles {
        let unit_id = UnitId::new(format!("{}/{}", nrg.set, r));
        nrg.unit_of.insert(r.clone(), unit_id.clone());
        nrg.units.push(UpgradeUnit {
            id: unit_id,
            members: [r].into_iter().collect(),
            method: UpgradeMethod::Rolling,
            undo_unit: nrg.set.clone(),
            partitions: None,
            switchover_done: false,
            switch_actions: Vec::new(),
        });
    }
    Ok(())
}

/// Splits each incompatible VM-supporting storage into a Remove vertex for the old
/// configuration and an Add vertex for the new one, running side by side.
fn ppu_transform(
    nrg: &mut NewRequestGraph,
    unit_id: UnitId,
    mut members: BTreeSet<ResourceId>,
    incompat: &[Dependency],
    config: &ClusterState,
    catalog: &ResourceUpgradeCatalog,
) -> Result<UpgradeUnit> {
    let storages: BTreeSet<ResourceId> = incompat
        .iter()
        .map(|e| match e.kind {
            DependencyKind::Aggregation => e.from.clone(),
            _ => e.to.clone(),
        })
        .filter(|s| config.resources.get(s).is_some_and(|r| r.kind == ResourceKind::VirtualStorage))
        .collect();
    let mut olds = BTreeSet::new();
    let mut news = BTreeSet::new();
    for s in storages {
        let Some(level) = nrg.levels.get_mut(&s) else { continue };
        let Some(pos) = level.changes.iter().position(|c| c.from.is_some() && c.to.is_some()) else {
            continue;
        };
        let cc = level.changes[pos].clone();
        let new_version = cc.to.clone().expect("checked");
        level.changes[pos] = ComponentChange {
            product: cc.product.clone(),
            from: cc.from.clone(),
            to: None,
            undo_to: cc.from.clone(),
        };
        let (a, u) = resolve_level(&level.changes, catalog)?;
        level.actions = a;
        level.undo = u;
        let kind = level.kind;

        let new_id = ResourceId::new(format!("{s}+{new_version}"));
        let new_changes = vec![ComponentChange {
            product: cc.product.clone(),
            from: None,
            to: Some(new_version.clone()),
            undo_to: None,
        }];
        let (a, u) = resolve_level(&new_changes, catalog)?;
        nrg.levels.insert(
            new_id.clone(),
            PlannedLevel {
                kind,
                host: None,
                exists: false,
                changes: new_changes,
                actions: a,
                undo: u,
            },
        );

        // Old storage keeps its current edges until each dependent switches.
        nrg.edges.retain(|e| !e.touches(&s));
        for d in config.dependencies.iter().filter(|d| d.from == s || d.to == s) {
            let other = if d.from == s { &d.to } else { &d.from };
            let switch = if d.kind == DependencyKind::VmSupportingStorageController && nrg.levels.contains_key(other) {
                other.clone()
            } else {
                s.clone()
            };
            nrg.edges.push(Dependency {
                from: d.from.clone(),
                to: d.to.clone(),
                kind: d.kind,
                presence: Presence::Current,
                incompatible: false,
                min_sponsors: d.min_sponsors,
                switch_with: Some(switch),
            });
        }
        let desc = catalog.lookup(&cc.product, &new_version).expect("resolved above");
        let mut dependents: Vec<ResourceId> = config
            .dependents_of(&s, DependencyKind::VmSupportingStorageController)
            .cloned()
            .collect();
        dependents.sort();
        dependents.dedup();
        for d in &dependents {
            nrg.edges.push(Dependency {
                from: d.clone(),
                to: new_id.clone(),
                kind: DependencyKind::VmSupportingStorageController,
                presence: Presence::Future,
                incompatible: false,
                min_sponsors: None,
                switch_with: Some(d.clone()),
            });
            members.insert(d.clone());
            if let Some(h) = config.resources.get(d).and_then(|r| r.host.clone()) {
                members.insert(h);
            }
        }
        let osd_products: BTreeSet<&ProductId> = desc
            .sub_components
            .iter()
            .filter(|sc| matches!(sc.placement, Placement::Sponsors(DependencyKind::Aggregation)))
            .map(|sc| &sc.product)
            .collect();
        let osd_hosts: Vec<ResourceId> = nrg
            .levels
            .iter()
            .filter(|(_, l)| l.changes.iter().any(|c| osd_products.contains(&c.product)))
            .map(|(r, _)| r.clone())
            .collect();
        let min = desc.storage_requirements.map(|r| r.min_hosts_for_configuration);
        for h in osd_hosts {
            nrg.edges.push(Dependency {
                from: new_id.clone(),
                to: h.clone(),
                kind: DependencyKind::Aggregation,
                presence: Presence::Future,
                incompatible: false,
                min_sponsors: min,
                switch_with: Some(new_id.clone()),
            });
            members.insert(h);
        }
        members.insert(new_id.clone());
        olds.insert(s);
        news.insert(new_id);
    }
    Ok(UpgradeUnit {
        id: unit_id,
        members,
        method: UpgradeMethod::Ppu,
        undo_unit: nrg.set.clone(),
        partitions: Some((olds, news)),
        switchover_done: false,
        switch_actions: Vec::new(),
    })
}

/// Two partitions by sorted id; the first is upgraded while deactivated and
/// takes over at switchover, then the second is upgraded.
fn split_transform(nrg: &mut NewRequestGraph, unit_id: UnitId, members: BTreeSet<ResourceId>) -> UpgradeUnit {
    let sorted: Vec<ResourceId> = members.iter().cloned().collect();
    let half = sorted.len().div_ceil(2);
    let p1: BTreeSet<ResourceId> = sorted[..half].iter().cloned().collect();
    let p2: BTreeSet<ResourceId> = sorted[half..].iter().cloned().collect();
    let mut deacts = Vec::new();
    let mut acts = Vec::new();
    for r in &p2 {
        if let Some(l) = nrg.levels.get_mut(r) {
            let (moved, kept): (Vec<_>, Vec<_>) = l.actions.drain(..).partition(|a| a.kind == ActionKind::Deactivate);
            l.actions = kept;
            if !moved.is_empty() {
                deacts.push((r.clone(), moved));
            }
        }
    }
    for r in &p1 {
        if let Some(l) = nrg.levels.get_mut(r) {
            let (moved, kept): (Vec<_>, Vec<_>) = l.actions.drain(..).partition(|a| a.kind == ActionKind::Activate);
            l.actions = kept;
            if !moved.is_empty() {
                acts.push((r.clone(), moved));
            }
        }
    }
    deacts.extend(acts);
    UpgradeUnit {
        id: unit_id,
        members,
        method: UpgradeMethod::SplitMode,
        undo_unit: nrg.set.clone(),
        partitions: Some((p1, p2)),
        switchover_done: false,
        switch_actions: deacts,
    }
}

/// Appends a new request graph to the resource graph: levels go after every
/// existing level of the same resource.
pub fn append_nrg(rg: &mut ResourceGraph, nrg: NewRequestGraph) {
    let mut undo = UndoUnit {
        id: nrg.set.clone(),
        max_retry: nrg.max_retry,
        ..UndoUnit::default()
    };
    for (r, planned) in nrg.levels {
        let index = rg.alloc_level_index();
        let v = rg.vertices.entry(r.clone()).or_insert_with(|| {
            let mut v = Resource::new(r.clone(), planned.kind);
            v.exists = planned.exists;
            v.active = false;
            v.host = planned.host.clone();
            v
        });
        let unit = nrg.unit_of.get(&r).cloned().expect("every level has a unit");
        v.levels.push(ExecutionLevel {
            index,
            actions: planned.actions,
            unit,
            undo_unit: nrg.set.clone(),
            changes: planned.changes,
            undo: planned.undo,
            is_undo: false,
        });
        v.undo_units.insert(nrg.set.clone());
        v.derive_modification();
        undo.members.insert(r);
    }
    for e in nrg.edges {
        if let Some(existing) = rg.edges.iter_mut().find(|x| x.from == e.from && x.to == e.to && x.kind == e.kind) {
            *existing = e;
        } else {
            rg.edges.push(e);
        }
    }
    for u in nrg.units {
        rg.units.insert(u.id.clone(), u);
    }
    rg.undo_units.insert(nrg.set.clone(), undo);
}

/// Builds NRGs for the given sets and merges them into `rg`.
pub fn merge_new_requests(
    rg: &mut ResourceGraph,
    sets: &[SetId],
    model: &UpgradeRequestModel,
    config: &ClusterState,
    catalog: &ResourceUpgradeCatalog,
) -> Result<()> {
    for id in sets {
        let set = model.set(id)?;
        let mut nrg = build_nrg(set, config, catalog)?;
        identify_upgrade_units(&mut nrg, config, catalog)?;
        append_nrg(rg, nrg);
    }
    Ok(())
}

/// Resource graph of the configuration with every open change set of the model.
pub fn build_rg(config: &ClusterState, model: &UpgradeRequestModel, catalog: &ResourceUpgradeCatalog) -> Result<ResourceGraph> {
    let mut rg = ResourceGraph::from_config(config)?;
    let open: Vec<SetId> = model.open_sets().map(|s| s.id.clone()).collect();
    merge_new_requests(&mut rg, &open, model, config, catalog)?;
    Ok(rg)
}
