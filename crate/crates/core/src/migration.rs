//! Step 4 of an iteration: moving old-partition VMs to the new partition in
//! sub-iterations that take at most one VM per anti-affinity group.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterState, VmGeneration};
use crate::error::{Error, Result};
use crate::planner::{compute_s_i, compute_scaling_reservation, PartitionView};
use crate::schedule::{Lane, LaneAction, LanePurpose, RuntimeUpgradeSchedule};
use crate::types::{GroupId, HostId, Millis, SimTime, TenantId, VmId};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationBudget {
    pub v_i: u32,
    pub scaling_resv_new: u32,
    pub failover_resv_new: u32,
    pub k_new: u32,
    #[serde(with = "crate::types::serde_secs")]
    pub window: Millis,
}

/// `V_i = (|M_new - M_usedNew| - ScalingRes_new - FailoverRes_new) * K'`, floored at 0.
pub fn compute_v_i(view: &PartitionView, scaling_resv: u32, failover: u32) -> u32 {
    let free = view.free_new() as i64 - scaling_resv as i64 - failover as i64;
    (free.max(0) as u32) * view.k_new
}

/// Tenants scaling on the new side once `moved` crossed: those owning a
/// new-generation VM, not yet at their maximum.
pub fn new_side_scaling_tenants(state: &ClusterState, moved: &BTreeSet<VmId>) -> u32 {
    state
        .tenants
        .values()
        .filter(|t| {
            state.tenant_vm_count(&t.id) < t.max
                && state
                    .tenant_vms(&t.id)
                    .any(|v| v.generation == VmGeneration::New || moved.contains(&v.id))
        })
        .count() as u32
}

fn old_vms(state: &ClusterState) -> impl Iterator<Item = &crate::cluster::Vm> + '_ {
    state
        .vms
        .values()
        .filter(|v| v.generation == VmGeneration::Old && v.host.is_some() && !state.inbound.contains_key(&v.id))
}

/// Budget for this iteration's Step 4. Errors when the new side cannot host VMs yet.
pub fn migration_budget(state: &ClusterState, per_vm: Millis, failover: Option<u32>) -> Result<MigrationBudget> {
    let view = PartitionView::of(state);
    if view.compute_for_new.iter().all(|h| !view.available.contains(h)) {
        return Err(Error::NewSideNotReady);
    }
    let groups: BTreeSet<&GroupId> = old_vms(state).map(|v| &v.group).collect();
    let old = old_vms(state).count() as u64;
    let upper = (view.free_new() as u64 * view.k_new as u64).min(old);
    let window = per_vm * upper.div_ceil(groups.len().max(1) as u64);
    let s = compute_s_i(state.tenants.values(), window);
    let a = new_side_scaling_tenants(state, &BTreeSet::new());
    let scaling = compute_scaling_reservation(s, a, view.k_new);
    let f = if view.used_new.is_empty() { 0 } else { failover.unwrap_or(1) };
    Ok(MigrationBudget {
        v_i: compute_v_i(&view, scaling, f),
        scaling_resv_new: scaling,
        failover_resv_new: f,
        k_new: view.k_new,
        window,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubIteration {
    pub index: u32,
    /// Selected VM and its destination on the new side.
    pub batch: Vec<(VmId, HostId)>,
}

/// One VM per anti-affinity group: groups ranked by old-VM count, then tenant;
/// within a group the VM on the host carrying most VMs of the ranked groups.
pub fn select_sub_iteration(state: &ClusterState, remaining_v: u32, index: u32) -> SubIteration {
    let mut per_group: BTreeMap<&GroupId, Vec<&crate::cluster::Vm>> = BTreeMap::new();
    for vm in old_vms(state) {
        per_group.entry(&vm.group).or_default().push(vm);
    }
    let mut tenant_old: BTreeMap<&TenantId, usize> = BTreeMap::new();
    for vm in old_vms(state) {
        *tenant_old.entry(&vm.tenant).or_default() += 1;
    }
    let mut ranked: Vec<(&GroupId, &TenantId, usize)> = per_group
        .iter()
        .map(|(g, vms)| (*g, &vms[0].tenant, vms.len()))
        .collect();
    ranked.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then_with(|| tenant_old[b.1].cmp(&tenant_old[a.1]))
            .then_with(|| a.1.cmp(b.1))
            .then_with(|| a.0.cmp(b.0))
    });
    ranked.truncate(remaining_v as usize);
    let preferred: BTreeSet<&GroupId> = ranked.iter().map(|r| r.0).collect();
    let weight = |h: &HostId| state.vms_on(h).filter(|v| preferred.contains(&v.group)).count();

    let mut probe = state.clone();
    let mut batch = Vec::new();
    for (g, _, _) in ranked {
        let mut vms = per_group[g].clone();
        vms.sort_by(|a, b| {
            let (ha, hb) = (a.host.as_ref().expect("placed"), b.host.as_ref().expect("placed"));
            weight(hb).cmp(&weight(ha)).then_with(|| ha.cmp(hb)).then_with(|| a.id.cmp(&b.id))
        });
        let vm = vms[0];
        let Some(dest) = probe.find_placement(VmGeneration::New, &vm.group, &BTreeSet::new()) else {
            continue;
        };
        probe.inbound.insert(vm.id.clone(), dest.clone());
        batch.push((vm.id.clone(), dest));
    }
    SubIteration { index, batch }
}

/// Shrinks the batch, dropping the lowest-ranked VMs first, until the new side
/// keeps its scaling and failover reservation after the batch lands.
pub fn reevaluate_new_reservation(state: &ClusterState, mut sub: SubIteration, budget: &MigrationBudget, failover: Option<u32>) -> SubIteration {
    loop {
        if sub.batch.is_empty() {
            return sub;
        }
        let moved: BTreeSet<VmId> = sub.batch.iter().map(|(v, _)| v.clone()).collect();
        let mut after = state.clone();
        for (vm, to) in &sub.batch {
            after.vms.get_mut(vm).expect("vm").host = Some(to.clone());
            after.vms.get_mut(vm).expect("vm").generation = VmGeneration::New;
        }
        let view = PartitionView::of(&after);
        let s = compute_s_i(after.tenants.values(), budget.window);
        let a = new_side_scaling_tenants(&after, &moved);
        let resv = compute_scaling_reservation(s, a, view.k_new);
        let f = if view.used_new.is_empty() { 0 } else { failover.unwrap_or(1) };
        if view.free_new() as u32 >= resv + f {
            return sub;
        }
        sub.batch.pop();
    }
}

/// Per VM: live migration, then conversion when the VM has to be upgraded.
pub fn build_vm_schedule(sub: &SubIteration, needs_vm_upgrade: bool, id: String, now: SimTime) -> RuntimeUpgradeSchedule {
    let mut s = RuntimeUpgradeSchedule::new(id, now);
    for (vm, to) in &sub.batch {
        let mut actions = vec![LaneAction::Migrate {
            vm: vm.clone(),
            to: to.clone(),
        }];
        if needs_vm_upgrade {
            actions.push(LaneAction::ConvertVm { vm: vm.clone() });
        }
        s.lanes.push(Lane::vm_lane(LanePurpose::VmMigration, actions));
    }
    s
}

/// Fresh VMs in their initial state for VMs whose migration failed; `generation`
/// forces the side they come up on.
pub fn replacement_schedule(
    state: &ClusterState,
    failed: &[VmId],
    generation: Option<VmGeneration>,
    id: String,
    now: SimTime,
) -> RuntimeUpgradeSchedule {
    let mut s = RuntimeUpgradeSchedule::new(id, now);
    let mut probe = state.clone();
    for vm in failed {
        let Some(v) = probe.vms.get(vm) else { continue };
        if v.host.is_some() {
            continue;
        }
        let group = v.group.clone();
        let generation = generation.unwrap_or(v.generation);
        let Some(to) = probe.find_placement(generation, &group, &BTreeSet::new()) else {
            continue;
        };
        probe.inbound.insert(vm.clone(), to.clone());
        s.lanes.push(Lane::vm_lane(
            LanePurpose::Recovery,
            vec![LaneAction::RecreateVm { vm: vm.clone(), to }],
        ));
    }
    s
}
