//! Step 3 of an iteration: consolidation, batch selection under the SLA budget,
//! schedule construction and execution feedback.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{PrerequisiteTag, ResolvedAction, ResourceUpgradeCatalog, StorageRequirement, WrapupTag};
use crate::cluster::{ClusterState, TenantSla, VmGeneration};
use crate::control::{ControlGraph, ResourceGroup};
use crate::error::{Error, Result};
use crate::graph::{ResourceGraph, UpgradeMethod, UpgradeUnit};
use crate::schedule::{ActionOutcome, Lane, LaneAction, LanePurpose, RuntimeUpgradeSchedule};
use crate::types::{
    DependencyKind, GroupId, HostId, Millis, ModificationType, ResourceId, ResourceKind, SimTime, VmId,
};

/// Host sets of the compute cluster as seen at one planning instant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionView {
    pub compute: BTreeSet<HostId>,
    pub storage: BTreeSet<HostId>,
    pub network: BTreeSet<HostId>,
    pub controller: BTreeSet<HostId>,
    pub compute_for_old: BTreeSet<HostId>,
    pub compute_for_new: BTreeSet<HostId>,
    pub used_compute: BTreeSet<HostId>,
    pub used_old: BTreeSet<HostId>,
    pub used_new: BTreeSet<HostId>,
    /// Hosts currently able to take VMs.
    pub available: BTreeSet<HostId>,
    pub k: u32,
    pub k_new: u32,
}

impl PartitionView {
    pub fn of(state: &ClusterState) -> Self {
        use crate::types::HostRole;
        let mut v = Self::default();
        for h in state.hosts.values().filter(|h| h.up && !h.dedicated) {
            for (role, set) in [
                (HostRole::Compute, &mut v.compute),
                (HostRole::Storage, &mut v.storage),
                (HostRole::Network, &mut v.network),
                (HostRole::Controller, &mut v.controller),
            ] {
                if h.roles.contains(&role) {
                    set.insert(h.id.clone());
                }
            }
        }
        for h in &v.compute {
            if state.load(h) > 0 {
                v.used_compute.insert(h.clone());
            }
            if state.host_available(h) {
                v.available.insert(h.clone());
            }
        }
        match &state.partitioning {
            None => {
                v.compute_for_old = v.compute.clone();
                v.compute_for_new = v.compute.clone();
                v.used_old = v.used_compute.clone();
                v.used_new = v.used_compute.clone();
            }
            Some(p) => {
                for h in &v.compute {
                    let (all, used) = if p.new_side.contains(h) {
                        (&mut v.compute_for_new, &mut v.used_new)
                    } else {
                        (&mut v.compute_for_old, &mut v.used_old)
                    };
                    all.insert(h.clone());
                    if v.used_compute.contains(h) {
                        used.insert(h.clone());
                    }
                }
            }
        }
        let cap = |hs: &BTreeSet<HostId>, f: fn(&crate::cluster::Host) -> u32| {
            hs.iter().filter_map(|h| state.hosts.get(h)).map(f).max().unwrap_or(0)
        };
        v.k = cap(&v.compute_for_old, |h| h.capacity).max(1);
        v.k_new = cap(&v.compute_for_new, |h| h.upgraded_capacity).max(1);
        v
    }

    /// Unused old-partition hosts that can take VMs right now.
    pub fn free_old(&self) -> usize {
        self.compute_for_old
            .iter()
            .filter(|h| self.available.contains(*h) && !self.used_old.contains(*h))
            .count()
    }

    pub fn free_new(&self) -> usize {
        self.compute_for_new
            .iter()
            .filter(|h| self.available.contains(*h) && !self.used_new.contains(*h))
            .count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationBudget {
    #[serde(with = "crate::types::serde_secs")]
    pub t_i: Millis,
    pub s_i: u32,
    pub f: u32,
    pub a_i: u32,
    pub scaling_resv_old: u32,
    pub failover_resv_old: u32,
    pub z_i: u32,
}

/// Maximum over the batch of first-level upgrade time plus recovery time.
pub fn compute_t_i(batch: &Batch, cg: &ControlGraph, rg: &ResourceGraph) -> Result<Millis> {
    if batch.groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch
        .groups
        .iter()
        .filter_map(|g| cg.group(g))
        .flat_map(|g| g.members.iter())
        .filter_map(|m| rg.vertices.get(m)?.first_level())
        .map(|l| l.duration_with_recovery())
        .max()
        .unwrap_or(0))
}

/// `S_i = max_n s_n * ceil(T_i / c_n)`.
pub fn compute_s_i<'a>(tenants: impl IntoIterator<Item = &'a TenantSla>, t_i: Millis) -> u32 {
    tenants
        .into_iter()
        .map(|t| t.scaling_step * t_i.div_ceil(t.cooldown.max(1)) as u32)
        .max()
        .unwrap_or(0)
}

/// `ScalingResv = S_i * ceil(A_i / K)`.
pub fn compute_scaling_reservation(s_i: u32, a_i: u32, k: u32) -> u32 {
    s_i * a_i.div_ceil(k.max(1))
}

/// Old-partition hosts that may be taken out of service.
pub fn compute_z_i(view: &PartitionView, scaling_resv: u32, failover: u32) -> u32 {
    if view.used_old.is_empty() {
        return view.compute_for_old.len() as u32;
    }
    (view.free_old() as i64 - scaling_resv as i64 - failover as i64).max(0) as u32
}

/// Enough storage hosts outside compute use for both storage configurations.
pub fn ppu_storage_check(view: &PartitionView, old_req: StorageRequirement, new_req: StorageRequirement) -> bool {
    let free = view.storage.difference(&view.used_compute).count() as u32;
    free >= old_req.bound() + new_req.bound()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Policies {
    /// Overrides the tolerated host failures F.
    #[serde(default)]
    pub failover: Option<u32>,
    /// Hosts set aside for groups that stay deactivated after their upgrade.
    #[serde(default)]
    pub dedicated_hosts: u32,
}

/// Tenants that will scale on the old side: those with no new-generation VM,
/// not yet at their maximum.
pub fn old_side_scaling_tenants(state: &ClusterState) -> u32 {
    state
        .tenants
        .values()
        .filter(|t| {
            let n = state.tenant_vm_count(&t.id);
            n < t.max && !state.tenant_vms(&t.id).any(|v| v.generation == VmGeneration::New && state.partitioning.is_some())
        })
        .count() as u32
}

pub fn iteration_budget(view: &PartitionView, state: &ClusterState, t_i: Millis, policies: &Policies) -> IterationBudget {
    let s_i = compute_s_i(state.tenants.values(), t_i);
    let a_i = old_side_scaling_tenants(state);
    let scaling = compute_scaling_reservation(s_i, a_i, view.k);
    let f = if view.used_old.is_empty() {
        0
    } else {
        policies.failover.unwrap_or(1)
    };
    IterationBudget {
        t_i,
        s_i,
        f,
        a_i,
        scaling_resv_old: scaling,
        failover_resv_old: f,
        z_i: compute_z_i(view, scaling, f),
    }
}

// ---- consolidation ------------------------------------------------------

/// Migration steps; a step holds at most one VM per anti-affinity group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationPlan {
    pub steps: Vec<Vec<(VmId, HostId)>>,
    pub freed: Vec<HostId>,
}

impl ConsolidationPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn moves(&self) -> impl Iterator<Item = &(VmId, HostId)> {
        self.steps.iter().flatten()
    }
}

/// Whether `host` still has upgrade work in the control graph.
pub fn host_pending(cg: &ControlGraph, host: &HostId) -> bool {
    cg.group_of(host).is_some_and(|g| g.has_remaining_changes())
}

/// Pending compute hosts in a PPU unit's storage/compute overlap are evacuated
/// first; otherwise VMs leave pending hosts for hosts that are done, one whole
/// host at a time, without occupying more than one previously empty host.
pub fn plan_consolidation(state: &ClusterState, cg: &ControlGraph, overlap_first: bool) -> ConsolidationPlan {
    let view = PartitionView::of(state);
    let mut probe = state.clone();
    let mut moves: Vec<(VmId, HostId)> = Vec::new();
    let mut freed = Vec::new();

    let mut sources: Vec<(bool, usize, HostId)> = view
        .used_compute
        .iter()
        .filter(|h| host_pending(cg, h) || (overlap_first && view.storage.contains(*h)))
        .map(|h| {
            let overlap = overlap_first && view.storage.contains(h);
            (!overlap, state.vm_count_on(h), h.clone())
        })
        .collect();
    sources.sort();
    let source_set: BTreeSet<HostId> = sources.iter().map(|s| s.2.clone()).collect();

    for (not_overlap, _, src) in sources {
        let overlap = !not_overlap;
        let vms: Vec<VmId> = probe.vms_on(&src).map(|v| v.id.clone()).collect();
        if vms.is_empty() || probe.inbound.values().any(|h| h == &src) {
            continue;
        }
        let mut trial = probe.clone();
        let mut planned = Vec::new();
        let mut newly_used = 0;
        let mut ok = true;
        for id in &vms {
            let vm = trial.vms[id].clone();
            let dest = trial
                .compute_hosts()
                .filter(|h| h.id != src && !freed.contains(&h.id))
                .filter(|h| {
                    if overlap {
                        !view.storage.contains(&h.id)
                    } else {
                        !source_set.contains(&h.id)
                            && !host_pending(cg, &h.id)
                            && !(overlap_first && view.storage.contains(&h.id))
                    }
                })
                .filter(|h| trial.host_available(&h.id) && trial.compatible(vm.generation, &h.id))
                .filter(|h| trial.has_room(&h.id) && trial.group_free_on(&vm.group, &h.id, Some(id)))
                .min_by_key(|h| (h.is_storage(), std::cmp::Reverse(trial.load(&h.id)), h.id.clone()))
                .map(|h| h.id.clone());
            let Some(dest) = dest else {
                ok = false;
                break;
            };
            if trial.load(&dest) == 0 {
                newly_used += 1;
            }
            trial.vms.get_mut(id).expect("vm").host = Some(dest.clone());
            planned.push((id.clone(), dest));
        }
        if ok && (newly_used <= 1 || overlap) {
            probe = trial;
            moves.extend(planned);
            freed.push(src);
        }
    }
    ConsolidationPlan {
        steps: stage_moves(state, moves),
        freed,
    }
}

/// Packs moves into steps so that no two VMs of one anti-affinity group move together.
pub fn stage_moves(state: &ClusterState, moves: Vec<(VmId, HostId)>) -> Vec<Vec<(VmId, HostId)>> {
    type Step = (BTreeSet<GroupId>, Vec<(VmId, HostId)>);
    let mut steps: Vec<Step> = Vec::new();
    for (vm, to) in moves {
        let group = state.vms.get(&vm).map(|v| v.group.clone()).unwrap_or_default();
        match steps.iter_mut().find(|(gs, _)| !gs.contains(&group)) {
            Some((gs, step)) => {
                gs.insert(group);
                step.push((vm, to));
            }
            None => steps.push(([group].into_iter().collect(), vec![(vm, to)])),
        }
    }
    steps.into_iter().map(|(_, s)| s).collect()
}

pub fn migration_schedule(id: String, now: SimTime, purpose: LanePurpose, moves: &[(VmId, HostId)]) -> RuntimeUpgradeSchedule {
    let mut s = RuntimeUpgradeSchedule::new(id, now);
    for (vm, to) in moves {
        s.lanes.push(Lane::vm_lane(
            purpose,
            vec![LaneAction::Migrate {
                vm: vm.clone(),
                to: to.clone(),
            }],
        ));
    }
    s
}

// ---- batches ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchKind {
    Initial,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub kind: BatchKind,
    pub groups: BTreeSet<GroupId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    SponsorCompatibility,
    Availability,
    StorageHosts,
    Evacuation,
    Ordering,
    Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elimination {
    pub group: GroupId,
    pub rule: Rule,
    pub reason: String,
}

#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub rg: &'a ResourceGraph,
    pub cg: &'a ControlGraph,
    pub config: &'a ClusterState,
    pub catalog: &'a ResourceUpgradeCatalog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialBatch {
    pub batch: Batch,
    pub eliminated: Vec<Elimination>,
    /// Storage-host check of a pending PPU, when one is pending.
    pub ppu_check: Option<bool>,
}

fn contracted_or_vm(kind: DependencyKind) -> bool {
    matches!(
        kind,
        DependencyKind::ContainerContained | DependencyKind::Composition | DependencyKind::Migration
    )
}

impl<'a> PlanContext<'a> {
    fn first_unit(&self, r: &ResourceId) -> Option<&'a UpgradeUnit> {
        self.rg.unit_of_first_level(r)
    }

    fn members_with_levels(&self, g: &'a ResourceGroup) -> impl Iterator<Item = &'a ResourceId> + 'a {
        let rg = self.rg;
        g.members.iter().filter(move |m| rg.has_pending_levels(m))
    }

    /// The group takes resources out of service while its first level runs.
    pub fn deactivates(&self, g: &ResourceGroup) -> bool {
        self.members_with_levels(g).any(|m| {
            let v = &self.rg.vertices[m];
            let l = v.first_level().expect("pending");
            l.deactivates()
                || v.modification == ModificationType::Remove
                || l.actions.iter().any(|a| a.prerequisite == Some(PrerequisiteTag::EvacuateVms))
        })
    }

    pub fn compute_hosts_of(&self, g: &'a ResourceGroup) -> impl Iterator<Item = &'a HostId> + 'a {
        let config = self.config;
        g.members
            .iter()
            .filter(move |m| config.hosts.get(*m).is_some_and(|h| h.is_compute()))
    }

    pub fn in_use(&self, g: &ResourceGroup) -> bool {
        self.compute_hosts_of(g).any(|h| self.config.load(h) > 0)
    }

    /// Compute-host groups whose first level leaves them deactivated.
    pub fn stays_deactivated(&self, g: &ResourceGroup) -> bool {
        self.compute_hosts_of(g).next().is_some()
            && self.members_with_levels(g).any(|m| {
                let v = &self.rg.vertices[m];
                let l = v.first_level().expect("pending");
                !l.project(&v.components, v.active).1
            })
    }

    /// Storage requirements (old, new) of the first pending PPU unit.
    pub fn ppu_requirements(&self) -> Option<(StorageRequirement, StorageRequirement)> {
        let unit = self
            .rg
            .units
            .values()
            .find(|u| u.method == UpgradeMethod::Ppu && self.rg.unit_pending(&u.id))?;
        let (olds, news) = unit.partitions.as_ref()?;
        let old = olds
            .iter()
            .filter_map(|s| self.rg.vertices.get(s))
            .flat_map(|v| v.components.iter())
            .find_map(|(p, ver)| self.catalog.lookup(p, ver)?.storage_requirements)
            .unwrap_or_default();
        let new = news
            .iter()
            .filter_map(|n| self.rg.vertices.get(n))
            .flat_map(|v| v.levels.iter().flat_map(|l| l.changes.iter()))
            .find_map(|c| self.catalog.lookup(&c.product, c.to.as_ref()?)?.storage_requirements)
            .unwrap_or_default();
        Some((old, new))
    }

    /// New-side members of a PPU unit: the added storage and its future sponsors.
    fn ppu_new_side(&self, r: &ResourceId, unit: &UpgradeUnit) -> bool {
        let Some((_, news)) = &unit.partitions else { return false };
        news.contains(r)
            || self.rg.edges.iter().any(|e| {
                e.presence == crate::types::Presence::Future
                    && e.kind == DependencyKind::Aggregation
                    && &e.to == r
                    && news.contains(&e.from)
            })
    }

    fn er1(&self, r: &ResourceId) -> Option<String> {
        let v = &self.rg.vertices[r];
        let l = v.first_level()?;
        let (after, _) = l.project(&v.components, v.active);
        let unit = self.first_unit(r);
        for e in self.rg.edges_of(r) {
            if contracted_or_vm(e.kind) || !e.presence.in_future() {
                continue;
            }
            let o = e.other(r);
            if unit.is_some_and(|u| u.method != UpgradeMethod::Rolling && u.members.contains(o)) {
                continue;
            }
            let Some(ov) = self.rg.vertices.get(o) else { continue };
            if !ov.exists || ov.components.is_empty() || after.is_empty() {
                continue;
            }
            let ok = if &e.from == r {
                self.catalog.components_compatible(&after, &ov.components)
            } else {
                self.catalog.components_compatible(&ov.components, &after)
            };
            if !ok {
                return Some(format!("{r} would be incompatible with {o}"));
            }
        }
        None
    }

    fn er5(&self, r: &ResourceId) -> Option<String> {
        let v = &self.rg.vertices[r];
        let l = v.first_level()?;
        if v.modification == ModificationType::Remove {
            if let Some(d) = self
                .config
                .dependencies
                .iter()
                .find(|d| &d.to == r && !contracted_or_vm(d.kind))
            {
                return Some(format!("{} still depends on {r}", d.from));
            }
        }
        for e in self.rg.edges.iter().filter(|e| &e.from == r && e.presence == crate::types::Presence::Future) {
            let Some(t) = self.rg.vertices.get(&e.to) else {
                return Some(format!("future sponsor {} missing", e.to));
            };
            if !v.exists && t.levels.iter().any(|tl| tl.unit == l.unit) {
                return Some(format!("future sponsor {} not ready", e.to));
            }
            if !t.exists || !t.active {
                return Some(format!("future sponsor {} not active", e.to));
            }
        }
        None
    }

    fn er6(&self, r: &ResourceId) -> Option<String> {
        let v = &self.rg.vertices[r];
        if v.isolated || v.failed {
            return Some(format!("{r} is isolated"));
        }
        let unit = self.first_unit(r)?;
        match unit.method {
            UpgradeMethod::SplitMode if unit.in_second_partition(r) => {
                let (p1, _) = unit.partitions.as_ref().expect("split units have partitions");
                let p1_pending = p1
                    .iter()
                    .any(|m| self.rg.vertices.get(m).is_some_and(|x| x.levels.iter().any(|l| l.unit == unit.id)));
                if p1_pending || (!unit.switch_actions.is_empty() && !unit.switchover_done) {
                    return Some(format!("first partition of {} not switched over", unit.id));
                }
            }
            UpgradeMethod::Ppu
                if unit.in_first_partition(r) && self.config.vms.values().any(|vm| vm.generation == VmGeneration::Old) =>
            {
                return Some("old-partition VMs remain".into());
            }
            _ => {}
        }
        None
    }

    /// Resources that would be out of service, checked against aggregation
    /// minimums and peer redundancy.
    pub fn availability_violation(&self, down: &BTreeSet<ResourceId>) -> Option<String> {
        let mut aggregates = BTreeSet::new();
        for e in &self.rg.edges {
            if e.kind == DependencyKind::Aggregation && e.presence.in_current() && down.contains(&e.to) {
                aggregates.insert(e.from.clone());
            }
        }
        for a in aggregates {
            if down.contains(&a) || !self.rg.vertices.get(&a).is_some_and(|v| v.active && v.exists) {
                continue;
            }
            let edges: Vec<_> = self
                .rg
                .edges
                .iter()
                .filter(|e| e.kind == DependencyKind::Aggregation && e.presence.in_current() && e.from == a)
                .collect();
            let need = edges.iter().filter_map(|e| e.min_sponsors).max().unwrap_or(1) as usize;
            let up = edges
                .iter()
                .filter(|e| !down.contains(&e.to))
                .filter(|e| self.rg.vertices.get(&e.to).is_some_and(|s| s.active && s.exists && !s.isolated))
                .count();
            if up < need {
                return Some(format!("{a} would keep {up} of {need} sponsors"));
            }
        }
        for r in down {
            let peers: Vec<&ResourceId> = self
                .rg
                .edges_of(r)
                .filter(|e| e.kind == DependencyKind::Peer && e.presence.in_current())
                .map(|e| e.other(r))
                .collect();
            if !peers.is_empty()
                && !peers
                    .iter()
                    .any(|p| !down.contains(*p) && self.rg.vertices.get(*p).is_some_and(|v| v.active))
            {
                return Some(format!("{r} has no active peer left"));
            }
        }
        None
    }

    /// Destinations for the VMs of the group's compute hosts on hosts that are
    /// not pending, recorded in `probe`.
    pub fn evacuation_plan(
        &self,
        probe: &mut ClusterState,
        g: &ResourceGroup,
        excluded: &BTreeSet<HostId>,
    ) -> Option<Vec<(VmId, HostId, HostId)>> {
        let mut out = Vec::new();
        let hosts: Vec<HostId> = self.compute_hosts_of(g).cloned().collect();
        for src in &hosts {
            let vms: Vec<VmId> = probe.vms_on(src).map(|v| v.id.clone()).collect();
            for id in vms {
                let vm = probe.vms[&id].clone();
                let dest = probe
                    .compute_hosts()
                    .filter(|h| !hosts.contains(&h.id) && !excluded.contains(&h.id))
                    .filter(|h| !host_pending(self.cg, &h.id))
                    .filter(|h| probe.host_available(&h.id) && probe.compatible(vm.generation, &h.id))
                    .filter(|h| probe.has_room(&h.id) && probe.group_free_on(&vm.group, &h.id, Some(&id)))
                    .min_by_key(|h| (h.is_storage(), std::cmp::Reverse(probe.load(&h.id)), h.id.clone()))
                    .map(|h| h.id.clone())?;
                probe.vms.get_mut(&id).expect("vm").host = Some(dest.clone());
                out.push((id, src.clone(), dest));
            }
        }
        Some(out)
    }
}

/// Groups with remaining changes that survive the elimination rules.
pub fn initial_batch(ctx: &PlanContext) -> InitialBatch {
    let view = PartitionView::of(ctx.config);
    let ppu_check = ctx.ppu_requirements().map(|(o, n)| ppu_storage_check(&view, o, n));
    let mut groups = BTreeSet::new();
    let mut eliminated = Vec::new();
    for g in ctx.cg.groups.values().filter(|g| g.has_remaining_changes()) {
        let mut verdict: Option<(Rule, String)> = None;
        let members: Vec<&ResourceId> = ctx.members_with_levels(g).collect();
        if members.is_empty() {
            continue;
        }
        if let Some(m) = g.members.iter().find(|m| ctx.rg.vertices[*m].isolated || ctx.rg.vertices[*m].failed) {
            verdict = Some((Rule::Method, format!("{m} is isolated")));
        }
        for r in &members {
            if verdict.is_some() {
                break;
            }
            verdict = ctx
                .er6(r)
                .map(|s| (Rule::Method, s))
                .or_else(|| ctx.er5(r).map(|s| (Rule::Ordering, s)))
                .or_else(|| ctx.er1(r).map(|s| (Rule::SponsorCompatibility, s)));
            if verdict.is_none() && ppu_check == Some(false) {
                if let Some(u) = ctx.first_unit(r).filter(|u| u.method == UpgradeMethod::Ppu) {
                    if ctx.ppu_new_side(r, u) {
                        verdict = Some((Rule::StorageHosts, "not enough free storage hosts".into()));
                    }
                }
            }
        }
        if verdict.is_none() && ctx.deactivates(g) {
            let down: BTreeSet<ResourceId> = g.members.clone();
            if let Some(s) = ctx.availability_violation(&down) {
                verdict = Some((Rule::Availability, s));
            } else if ctx.in_use(g) {
                let mut probe = ctx.config.clone();
                if ctx.evacuation_plan(&mut probe, g, &BTreeSet::new()).is_none() {
                    verdict = Some((Rule::Evacuation, "VMs do not fit on upgraded hosts".into()));
                }
            }
        }
        match verdict {
            None => {
                groups.insert(g.id.clone());
            }
            Some((rule, reason)) => eliminated.push(Elimination {
                group: g.id.clone(),
                rule,
                reason,
            }),
        }
    }
    InitialBatch {
        batch: Batch {
            kind: BatchKind::Initial,
            groups,
        },
        eliminated,
        ppu_check,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub batch: Batch,
    /// (vm, from, to) evacuations run before the upgrade actions.
    pub evacuations: Vec<(VmId, HostId, HostId)>,
    /// Free old-partition hosts each selected group takes out of the budget.
    pub cost: BTreeMap<GroupId, u32>,
}

/// Greedy packing of the initial batch under `Z_i`: groups ordered by
/// (in use, affected hosts, id); groups that stay deactivated additionally
/// bounded by the dedicated-host pool.
pub fn select_final_batch(ctx: &PlanContext, initial: &Batch, z_i: u32, policies: &Policies) -> FinalSelection {
    let free_host = |probe: &ClusterState, h: &HostId| {
        probe.host_available(h) && probe.load(h) == 0 && !probe.is_new_side(h)
    };
    let mut order: Vec<(bool, u32, GroupId)> = initial
        .groups
        .iter()
        .filter_map(|id| ctx.cg.group(id))
        .map(|g| {
            let affected = ctx.compute_hosts_of(g).filter(|h| free_host(ctx.config, h)).count() as u32;
            (ctx.in_use(g), affected, g.id.clone())
        })
        .collect();
    order.sort();

    let mut probe = ctx.config.clone();
    let mut used = 0u32;
    let mut staying = 0u32;
    let mut down: BTreeSet<ResourceId> = BTreeSet::new();
    let mut batch_hosts: BTreeSet<HostId> = BTreeSet::new();
    let mut moving_groups: BTreeSet<GroupId> = BTreeSet::new();
    let mut selected = BTreeSet::new();
    let mut evacuations = Vec::new();
    let mut cost_of = BTreeMap::new();

    for (in_use, _, id) in order {
        let g = &ctx.cg.groups[&id];
        let hosts: BTreeSet<HostId> = ctx.compute_hosts_of(g).cloned().collect();
        let deact = ctx.deactivates(g);
        let mut trial = probe.clone();
        let mut cost = hosts.iter().filter(|h| free_host(&trial, h)).count() as u32;
        let mut evac = Vec::new();
        if deact && in_use {
            let mut excluded = batch_hosts.clone();
            excluded.extend(hosts.iter().cloned());
            let before: BTreeSet<HostId> = trial.hosts.keys().filter(|h| free_host(&trial, h)).cloned().collect();
            let Some(plan) = ctx.evacuation_plan(&mut trial, g, &excluded) else { continue };
            cost += before.iter().filter(|h| trial.load(h) > 0).count() as u32;
            let vm_groups: BTreeSet<GroupId> = plan.iter().map(|(vm, _, _)| trial.vms[vm].group.clone()).collect();
            if !moving_groups.is_disjoint(&vm_groups) {
                continue;
            }
            moving_groups.extend(vm_groups);
            evac = plan;
        }
        if used + cost > z_i && !hosts.is_empty() {
            continue;
        }
        let stays = ctx.stays_deactivated(g);
        if stays && staying + 1 > policies.dedicated_hosts {
            continue;
        }
        if deact {
            let mut d = down.clone();
            d.extend(g.members.iter().cloned());
            if ctx.availability_violation(&d).is_some() {
                continue;
            }
            down = d;
        }
        if stays {
            staying += 1;
        }
        used += cost;
        probe = trial;
        batch_hosts.extend(hosts);
        evacuations.extend(evac);
        cost_of.insert(id.clone(), cost);
        selected.insert(id);
    }
    FinalSelection {
        batch: Batch {
            kind: BatchKind::Final,
            groups: selected,
        },
        evacuations,
        cost: cost_of,
    }
}

// ---- schedules ----------------------------------------------------------

/// Schedules of one batch in execution order: staged evacuations, the first
/// execution levels, then VM returns when a level asks for them.
pub fn build_schedule(ctx: &PlanContext, sel: &FinalSelection, id: &str, now: SimTime) -> Vec<RuntimeUpgradeSchedule> {
    let mut out = Vec::new();
    let moves: Vec<(VmId, HostId)> = sel.evacuations.iter().map(|(v, _, to)| (v.clone(), to.clone())).collect();
    for (i, step) in stage_moves(ctx.config, moves).into_iter().enumerate() {
        out.push(migration_schedule(format!("{id}/evacuate{}", i + 1), now, LanePurpose::Consolidation, &step));
    }
    let mut upgrade = RuntimeUpgradeSchedule::new(format!("{id}/upgrade"), now);
    let mut returns = Vec::new();
    for gid in &sel.batch.groups {
        let g = &ctx.cg.groups[gid];
        for m in ctx.members_with_levels(g) {
            let v = &ctx.rg.vertices[m];
            let l = v.first_level().expect("pending");
            upgrade.lanes.push(Lane {
                resource: Some(m.clone()),
                kind: Some(v.kind),
                host: v.host.clone(),
                purpose: if l.is_undo { LanePurpose::Recovery } else { LanePurpose::Upgrade },
                actions: l.actions.iter().cloned().map(LaneAction::Resource).collect(),
            });
            if l.actions.iter().any(|a| a.wrapup == Some(WrapupTag::ReturnVms)) {
                let hosts: BTreeSet<HostId> = ctx.compute_hosts_of(g).cloned().collect();
                returns.extend(
                    sel.evacuations
                        .iter()
                        .filter(|(_, from, _)| hosts.contains(from))
                        .map(|(vm, from, _)| (vm.clone(), from.clone())),
                );
            }
        }
    }
    out.push(upgrade);
    returns.sort();
    returns.dedup();
    for (i, step) in stage_moves(ctx.config, returns).into_iter().enumerate() {
        out.push(migration_schedule(format!("{id}/return{}", i + 1), now, LanePurpose::Consolidation, &step));
    }
    out
}

// ---- feedback -----------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub succeeded: Vec<ResourceId>,
    /// Resource and the number of its level actions that completed.
    pub failed: Vec<(ResourceId, usize)>,
    pub marked_failed: Vec<ResourceId>,
    pub recovery: Option<RuntimeUpgradeSchedule>,
}

fn lane_successes(outcomes: &[ActionOutcome], schedule: &str, lane: usize) -> usize {
    outcomes
        .iter()
        .filter(|o| o.schedule == schedule && o.lane == lane && o.success)
        .count()
}

/// Applies the outcomes of an upgrade schedule to the graph and builds the
/// immediate resource-level recovery for failed levels.
pub fn process_feedback(
    rg: &mut ResourceGraph,
    config: &mut ClusterState,
    schedule: &RuntimeUpgradeSchedule,
    outcomes: &[ActionOutcome],
) -> Feedback {
    let mut fb = Feedback::default();
    let mut recovery = RuntimeUpgradeSchedule::new(format!("{}/recovery", schedule.id), config.clock);
    for (i, lane) in schedule.lanes.iter().enumerate() {
        let Some(r) = &lane.resource else { continue };
        let done = lane_successes(outcomes, &schedule.id, i);
        if done == lane.actions.len() {
            rg.level_succeeded(r, config);
            fb.succeeded.push(r.clone());
            continue;
        }
        fb.failed.push((r.clone(), done));
        match rg.level_failed(r, done) {
            Some(undo) if !undo.is_empty() => recovery.lanes.push(Lane {
                resource: Some(r.clone()),
                kind: lane.kind,
                host: lane.host.clone(),
                purpose: LanePurpose::Recovery,
                actions: undo.into_iter().map(LaneAction::Resource).collect(),
            }),
            Some(_) => {}
            None => {
                config.isolated.insert(r.clone());
                fb.marked_failed.push(r.clone());
            }
        }
    }
    if !recovery.lanes.is_empty() {
        fb.recovery = Some(recovery);
    }
    fb
}

/// A failed recovery takes its resource out of service for good.
pub fn process_recovery_feedback(
    rg: &mut ResourceGraph,
    config: &mut ClusterState,
    schedule: &RuntimeUpgradeSchedule,
    outcomes: &[ActionOutcome],
) -> Vec<ResourceId> {
    let mut failed = Vec::new();
    for (i, lane) in schedule.lanes.iter().enumerate() {
        let Some(r) = &lane.resource else { continue };
        if lane_successes(outcomes, &schedule.id, i) < lane.actions.len() {
            rg.mark_failed(r);
            config.isolated.insert(r.clone());
            failed.push(r.clone());
        } else if let Some(v) = rg.vertices.get_mut(r) {
            if let Some(res) = config.resources.get(r) {
                v.components = res.components.clone();
                v.active = res.active;
            }
            v.derive_modification();
        }
    }
    failed
}

pub type SwitchActions = Vec<(ResourceId, Vec<ResolvedAction>)>;

/// Applies a switchover's outcome to the unit.
pub fn unit_switch_actions(unit: &UpgradeUnit) -> (SwitchActions, SwitchActions) {
    unit.switch_actions
        .iter()
        .cloned()
        .partition(|(_, acts)| acts.iter().all(|a| a.kind == crate::catalog::ActionKind::Deactivate))
}

pub fn is_compute_kind(kind: ResourceKind) -> bool {
    kind == ResourceKind::ComputeHost || kind == ResourceKind::Hypervisor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::coarsen;
    use crate::presets;

    fn tenant(s: u32, c_secs: u64) -> TenantSla {
        TenantSla {
            id: format!("t{s}-{c_secs}").into(),
            min: 1,
            max: 4,
            scaling_step: s,
            cooldown: c_secs * 1000,
            groups: Vec::new(),
            last_scaling_at: None,
        }
    }

    fn hosts(prefix: &str, n: usize) -> BTreeSet<HostId> {
        (0..n).map(|i| format!("{prefix}{i}").into()).collect()
    }

    #[test]
    fn s_i_direct() {
        let four = vec![tenant(1, 60); 4];
        assert_eq!(compute_s_i(&four, 41_000), 1);
        assert_eq!(compute_s_i(&[tenant(2, 30), tenant(3, 100)], 45_000), 4);
        assert_eq!(compute_s_i(&[], 45_000), 0);
    }

    #[test]
    fn scaling_reservation_direct() {
        assert_eq!(compute_scaling_reservation(1, 4, 2), 2);
        assert_eq!(compute_scaling_reservation(2, 3, 2), 4);
    }

    #[test]
    fn z_i_direct() {
        let free = hosts("f", 4);
        let used = hosts("u", 2);
        let view = PartitionView {
            compute_for_old: free.union(&used).cloned().collect(),
            used_old: used.clone(),
            available: free.union(&used).cloned().collect(),
            ..Default::default()
        };
        assert_eq!(compute_z_i(&view, 1, 1), 2);
        let idle = PartitionView {
            used_old: BTreeSet::new(),
            ..view
        };
        assert_eq!(compute_z_i(&idle, 1, 1), 6);
    }

    #[test]
    fn ppu_check_direct() {
        let req = |a, b| StorageRequirement {
            min_hosts_for_configuration: a,
            min_hosts_for_capacity: b,
        };
        let mut view = PartitionView {
            storage: hosts("s", 9),
            used_compute: ["s0".into(), "s1".into()].into_iter().collect(),
            ..Default::default()
        };
        assert!(ppu_storage_check(&view, req(3, 2), req(3, 2)));
        view.used_compute.insert("s2".into());
        view.used_compute.insert("s3".into());
        assert!(!ppu_storage_check(&view, req(3, 2), req(3, 2)));
    }

    #[test]
    fn t_i_counts_upgrade_and_recovery() {
        let (rg, ..) = crate::graph::tests::graph_for(&presets::scenario_a());
        let cg = coarsen(&rg);
        let batch = Batch {
            kind: BatchKind::Initial,
            groups: cg.groups.values().filter(|g| g.has_remaining_changes()).take(3).map(|g| g.id.clone()).collect(),
        };
        assert_eq!(compute_t_i(&batch, &cg, &rg).unwrap(), 82_000);
        let empty = Batch {
            kind: BatchKind::Initial,
            groups: BTreeSet::new(),
        };
        assert!(matches!(compute_t_i(&empty, &cg, &rg), Err(Error::EmptyBatch)));
    }

    #[test]
    fn final_batch_respects_z_i_and_prefers_empty_hosts() {
        let s = presets::scenario_a();
        let (rg, _, config, catalog) = crate::graph::tests::graph_for(&s);
        let cg = coarsen(&rg);
        let ctx = PlanContext {
            rg: &rg,
            cg: &cg,
            config: &config,
            catalog: &catalog,
        };
        let init = initial_batch(&ctx);
        // in-use hosts have nowhere to evacuate to before any host is upgraded
        assert_eq!(init.batch.groups.len(), 5);
        assert!(init.eliminated.iter().all(|e| e.rule == Rule::Evacuation || !cg.groups[&e.group].has_remaining_changes()));
        let view = PartitionView::of(&config);
        let budget = iteration_budget(&view, &config, 82_000, &Policies::default());
        assert_eq!((budget.s_i, budget.a_i, budget.f), (1, 4, 1));
        let sel = select_final_batch(&ctx, &init.batch, budget.z_i, &Policies::default());
        let cost: u32 = sel.cost.values().sum();
        assert_eq!(budget.z_i, 3);
        assert_eq!(sel.batch.groups.len(), 3);
        assert!(cost <= budget.z_i);
        for g in &sel.batch.groups {
            let host = cg.groups[g].members.iter().find_map(|m| config.hosts.get(&HostId::from(m.as_str())));
            assert!(host.is_some_and(|h| config.load(&h.id) == 0), "{g} is in use");
        }
    }

    #[test]
    fn staged_moves_never_move_two_vms_of_a_group_together() {
        let state = presets::scenario_b().to_state();
        let to = presets::host_id(10);
        let moves: Vec<(VmId, HostId)> = state.vms.keys().map(|v| (v.clone(), to.clone())).collect();
        for step in stage_moves(&state, moves) {
            let groups: BTreeSet<&GroupId> = step.iter().map(|(v, _)| &state.vms[v].group).collect();
            assert_eq!(groups.len(), step.len());
        }
    }
}
