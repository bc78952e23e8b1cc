//! Resource Graph: every resource and dependency of the configuration, annotated
//! with the upgrade state (execution levels, units, retry counters, isolation).

mod build;
mod feedback;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{ActionKind, ComponentChange, ResolvedAction};
use crate::cluster::ClusterState;
use crate::error::{Error, Result};
use crate::types::{
    DependencyKind, HostId, ModificationType, Presence, ProductId, ResourceId, ResourceKind, SetId,
    UnitId, Version,
};

pub use build::{build_rg, merge_new_requests};
pub use feedback::UndoTrigger;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpgradeMethod {
    Rolling,
    SplitMode,
    Ppu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dependency {
    /// Dependent.
    pub from: ResourceId,
    /// Sponsor.
    pub to: ResourceId,
    pub kind: DependencyKind,
    pub presence: Presence,
    pub incompatible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sponsors: Option<u32>,
    /// Resource whose level completion drops a current-only edge or brings a
    /// future-only edge into the configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_with: Option<ResourceId>,
}

impl Dependency {
    pub fn current(from: ResourceId, to: ResourceId, kind: DependencyKind) -> Self {
        Self {
            from,
            to,
            kind,
            presence: Presence::CurrentFuture,
            incompatible: false,
            min_sponsors: None,
            switch_with: None,
        }
    }

    pub fn touches(&self, r: &ResourceId) -> bool {
        &self.from == r || &self.to == r
    }

    pub fn other(&self, r: &ResourceId) -> &ResourceId {
        if &self.from == r {
            &self.to
        } else {
            &self.from
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLevel {
    /// Global ordinal; levels of one resource are kept in increasing order.
    pub index: u64,
    pub actions: Vec<ResolvedAction>,
    pub unit: UnitId,
    pub undo_unit: SetId,
    pub changes: Vec<ComponentChange>,
    /// Undo operation of this level, in execution order.
    pub undo: Vec<ResolvedAction>,
    #[serde(default)]
    pub is_undo: bool,
}

impl ExecutionLevel {
    pub fn duration(&self) -> u64 {
        self.actions.iter().map(|a| a.duration).sum()
    }

    /// Upgrade time plus recovery time of every action.
    pub fn duration_with_recovery(&self) -> u64 {
        self.actions
            .iter()
            .map(|a| a.duration + a.undo_duration())
            .sum()
    }

    pub fn deactivates(&self) -> bool {
        self.actions.iter().any(|a| a.kind == ActionKind::Deactivate)
    }

    /// Components and activation after executing the level from the given state.
    pub fn project(
        &self,
        components: &BTreeMap<ProductId, Version>,
        active: bool,
    ) -> (BTreeMap<ProductId, Version>, bool) {
        let mut c = components.clone();
        let mut a = active;
        for action in &self.actions {
            action.apply(&mut c, &mut a);
        }
        (c, a)
    }
}

/// A level that completed, kept so a later system-level undo can revert it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedLevel {
    pub undo_unit: SetId,
    pub undo: Vec<ResolvedAction>,
    pub before: BTreeMap<ProductId, Version>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    pub kind: ResourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<HostId>,
    pub modification: ModificationType,
    pub active: bool,
    pub undo_units: BTreeSet<SetId>,
    pub levels: Vec<ExecutionLevel>,
    pub failed_attempts: BTreeMap<SetId, u32>,
    pub isolated: bool,
    pub failed: bool,
    pub components: BTreeMap<ProductId, Version>,
    /// False for resources planned to be added that do not exist yet.
    pub exists: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<CompletedLevel>,
}

impl Resource {
    fn new(id: ResourceId, kind: ResourceKind) -> Self {
        Self {
            id,
            kind,
            host: None,
            modification: ModificationType::NoChange,
            active: true,
            undo_units: BTreeSet::new(),
            levels: Vec::new(),
            failed_attempts: BTreeMap::new(),
            isolated: false,
            failed: false,
            components: BTreeMap::new(),
            exists: true,
            history: Vec::new(),
        }
    }

    /// Single-string view of the version state, e.g. `hypervisor=2`.
    pub fn current_version(&self) -> String {
        self.components
            .iter()
            .map(|(p, v)| format!("{p}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn first_level(&self) -> Option<&ExecutionLevel> {
        self.levels.first()
    }

    /// Modification type implied by the first execution level.
    pub fn derive_modification(&mut self) {
        self.modification = match self.levels.first() {
            None => ModificationType::NoChange,
            Some(_) if !self.exists => ModificationType::Add,
            Some(l) => {
                let (after, _) = l.project(&self.components, self.active);
                if after.is_empty() && !self.kind.is_host() {
                    ModificationType::Remove
                } else {
                    ModificationType::Upgrade
                }
            }
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpgradeUnit {
    pub id: UnitId,
    pub members: BTreeSet<ResourceId>,
    pub method: UpgradeMethod,
    pub undo_unit: SetId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<(BTreeSet<ResourceId>, BTreeSet<ResourceId>)>,
    #[serde(default)]
    pub switchover_done: bool,
    /// Split mode: actions run at switchover per resource.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub switch_actions: Vec<(ResourceId, Vec<ResolvedAction>)>,
}

impl UpgradeUnit {
    pub fn in_first_partition(&self, r: &ResourceId) -> bool {
        self.partitions.as_ref().is_some_and(|(p1, _)| p1.contains(r))
    }

    pub fn in_second_partition(&self, r: &ResourceId) -> bool {
        self.partitions.as_ref().is_some_and(|(_, p2)| p2.contains(r))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UndoUnit {
    pub id: SetId,
    pub members: BTreeSet<ResourceId>,
    pub isolated_only: BTreeSet<ResourceId>,
    pub failed: BTreeSet<ResourceId>,
    pub max_retry: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceGraph {
    pub vertices: BTreeMap<ResourceId, Resource>,
    pub edges: Vec<Dependency>,
    pub units: BTreeMap<UnitId, UpgradeUnit>,
    pub undo_units: BTreeMap<SetId, UndoUnit>,
    pub next_level: u64,
}

impl ResourceGraph {
    /// Graph mirroring the configuration with every resource unchanged.
    pub fn from_config(config: &ClusterState) -> Result<Self> {
        let mut rg = Self::default();
        rg.sync_with_config(config)?;
        Ok(rg)
    }

    pub fn vertex(&self, id: &ResourceId) -> Result<&Resource> {
        self.vertices
            .get(id)
            .ok_or_else(|| Error::UnknownResource(id.to_string()))
    }

    pub fn edges_of<'a>(&'a self, r: &'a ResourceId) -> impl Iterator<Item = &'a Dependency> + 'a {
        self.edges.iter().filter(move |e| e.touches(r))
    }

    pub fn unit_of_first_level(&self, r: &ResourceId) -> Option<&UpgradeUnit> {
        let level = self.vertices.get(r)?.first_level()?;
        self.units.get(&level.unit)
    }

    /// Whether any resource still has levels belonging to `unit`.
    pub fn unit_pending(&self, unit: &UnitId) -> bool {
        self.vertices
            .values()
            .any(|v| v.levels.iter().any(|l| &l.unit == unit))
    }

    pub fn has_pending_levels(&self, r: &ResourceId) -> bool {
        self.vertices.get(r).is_some_and(|v| !v.levels.is_empty())
    }

    /// Refreshes vertex state and current edges from the configuration while
    /// keeping all upgrade annotations.
    pub fn sync_with_config(&mut self, config: &ClusterState) -> Result<()> {
        for d in &config.dependencies {
            for end in [&d.from, &d.to] {
                if !config.resources.contains_key(end) {
                    return Err(Error::InconsistentConfig(format!(
                        "dependency {} -> {} has dangling endpoint {end}",
                        d.from, d.to
                    )));
                }
            }
        }
        for r in config.resources.values() {
            let v = self
                .vertices
                .entry(r.id.clone())
                .or_insert_with(|| Resource::new(r.id.clone(), r.kind));
            v.kind = r.kind;
            v.host = r.host.clone();
            v.components = r.components.clone();
            v.active = r.active;
            v.exists = true;
        }
        for vm in config.vms.values() {
            let v = self
                .vertices
                .entry(vm.id.clone().0.into())
                .or_insert_with(|| Resource::new(vm.id.0.clone().into(), ResourceKind::Vm));
            v.host = vm.host.clone();
            v.active = vm.host.is_some();
        }
        self.vertices.retain(|id, v| {
            let present = config.resources.contains_key(id)
                || (v.kind == ResourceKind::Vm && config.vms.contains_key(&id.0.clone().into()));
            if !present {
                v.exists = false;
            }
            present || !v.levels.is_empty()
        });

        let mut edges: Vec<Dependency> = Vec::new();
        for d in &config.dependencies {
            let prev = self
                .edges
                .iter()
                .find(|e| e.from == d.from && e.to == d.to && e.kind == d.kind);
            let mut e = match prev {
                Some(p) if p.presence == Presence::Future => {
                    let mut e = p.clone();
                    e.presence = Presence::CurrentFuture;
                    e.switch_with = None;
                    e
                }
                Some(p) => p.clone(),
                None => Dependency::current(d.from.clone(), d.to.clone(), d.kind),
            };
            e.min_sponsors = d.min_sponsors.or(e.min_sponsors);
            edges.push(e);
        }
        for e in &self.edges {
            let in_config = config
                .dependencies
                .iter()
                .any(|d| d.from == e.from && d.to == e.to && d.kind == e.kind);
            if e.presence == Presence::Future
                && !in_config
                && self.vertices.contains_key(&e.from)
                && self.vertices.contains_key(&e.to)
            {
                edges.push(e.clone());
            }
        }
        for vm in config.vms.values() {
            if let Some(h) = &vm.host {
                edges.push(Dependency::current(
                    vm.id.0.clone().into(),
                    h.clone(),
                    DependencyKind::Migration,
                ));
            }
        }
        self.edges = edges;
        for v in self.vertices.values_mut() {
            v.derive_modification();
        }
        Ok(())
    }

    /// Applies a completed level's edge switches to the configuration.
    pub fn switch_edges(&self, resource: &ResourceId, config: &mut ClusterState) {
        let switching: Vec<&Dependency> = self
            .edges
            .iter()
            .filter(|e| e.switch_with.as_ref() == Some(resource))
            .collect();
        for e in &switching {
            match e.presence {
                Presence::Current => config
                    .dependencies
                    .retain(|d| !(d.from == e.from && d.to == e.to && d.kind == e.kind)),
                Presence::Future => {
                    let exists = config
                        .dependencies
                        .iter()
                        .any(|d| d.from == e.from && d.to == e.to && d.kind == e.kind);
                    if !exists
                        && config.resources.contains_key(&e.from)
                        && config.resources.contains_key(&e.to)
                    {
                        config.dependencies.push(crate::cluster::ConfigDependency {
                            from: e.from.clone(),
                            to: e.to.clone(),
                            kind: e.kind,
                            min_sponsors: e.min_sponsors,
                        });
                    }
                }
                Presence::CurrentFuture => {}
            }
        }
    }

    pub(crate) fn alloc_level_index(&mut self) -> u64 {
        self.next_level += 1;
        self.next_level
    }

    /// Text form used in reports and golden tests.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }
}

#[cfg(test)]
pub(crate) mod tests;
