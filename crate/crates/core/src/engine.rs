//! Deterministic discrete-event cloud simulator and upgrade engine.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ActionKind, ResolvedAction};
use crate::cluster::{ClusterState, ConfigDependency, Host, InfraResource, Vm, VmGeneration};
use crate::error::{Error, Result};
use crate::request::UpgradeRequest;
use crate::schedule::{ActionOutcome, Lane, LaneAction, LanePurpose, RuntimeUpgradeSchedule};
use crate::types::{
    DependencyKind, GroupId, HostId, Millis, ProductId, ResourceId, ResourceKind, SetId, SimTime,
    TenantId, VmId,
};

/// Fixed durations of the simulated cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    #[serde(with = "crate::types::serde_secs")]
    pub upgrade: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub migration: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub migration_outage: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub coordination_overhead: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub failover_restart: Millis,
    #[serde(with = "crate::types::serde_secs")]
    pub vm_conversion: Millis,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            upgrade: 41_000,
            migration: 23_000,
            migration_outage: 600,
            coordination_overhead: 230,
            failover_restart: 10_000,
            vm_conversion: 0,
        }
    }
}

/// Fails the `nth` (1-based) action matching every given field, or the action
/// with the given global occurrence index. `action` matches an action id
/// (`install`) or a full label (`install:hypervisor@2`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedFailure {
    pub occurrence: Option<u64>,
    pub resource: Option<ResourceId>,
    pub action: Option<String>,
    pub nth: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureModel {
    pub seed: u64,
    /// Failure probability of upgrade actions per action kind.
    pub probabilities: BTreeMap<ActionKind, f64>,
    /// Restricts the probabilities to actions of these products; empty means all.
    pub products: BTreeSet<ProductId>,
    /// Failure probability of recovery and undo actions.
    pub undo_probability: f64,
    pub migration_probability: f64,
    pub scripted: Vec<ScriptedFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EventKind {
    UpgradeRequest { request: UpgradeRequest },
    AdminUndo { set: SetId },
    ScaleOut { tenant: TenantId },
    ScaleIn { tenant: TenantId },
    HostFailure { host: HostId },
    HostRepair { host: HostId },
    HostAddition {
        host: Host,
        #[serde(default)]
        resources: Vec<InfraResource>,
        #[serde(default)]
        dependencies: Vec<ConfigDependency>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    #[serde(with = "crate::types::serde_secs")]
    pub at: SimTime,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutageCause {
    Migration,
    HostFailure,
    VmUpgrade,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum LogEvent {
    ActionStarted {
        schedule: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        resource: Option<ResourceId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        vm: Option<VmId>,
        action: String,
    },
    ActionFinished {
        schedule: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        resource: Option<ResourceId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        vm: Option<VmId>,
        action: String,
        success: bool,
    },
    VmCreated { vm: VmId, tenant: TenantId, group: GroupId, host: HostId },
    VmDeleted { vm: VmId, tenant: TenantId },
    VmDown { vm: VmId, tenant: TenantId, group: GroupId, cause: OutageCause },
    VmUp { vm: VmId, tenant: TenantId, host: HostId },
    ScaleOutDeferred { tenant: TenantId, until: SimTime },
    ScaleOutRejected { tenant: TenantId },
    ScaleOutPlaced { tenant: TenantId, count: u32 },
    ScaleInRemoved { tenant: TenantId, count: u32 },
    ScalingClamped { tenant: TenantId },
    HostFailed { host: HostId },
    HostRepaired { host: HostId },
    HostAdded { host: HostId },
    ResourceCreated { resource: ResourceId },
    ResourceRemoved { resource: ResourceId },
    ResourceActivation { resource: ResourceId, active: bool },
    VmSupportLost { vm: VmId, host: HostId },
    VmSupportRestored { vm: VmId },
    RequestReceived { request: String },
    AdminUndoReceived { set: SetId },
    Iteration { index: u64, phase: String },
    Note { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_ms: SimTime,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Events the coordinator must react to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Notice {
    UpgradeRequest { request: UpgradeRequest },
    AdminUndo { set: SetId },
    CapacityChanged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailoverRecord {
    pub host: HostId,
    pub vms: Vec<VmId>,
    pub restart_at: SimTime,
}

#[derive(Clone, Debug)]
enum Agenda {
    Scenario(EventKind),
    Restart(VmId),
    ScaleOutRetry(TenantId),
    ScaleInRetry(TenantId),
}

#[derive(Clone, Debug)]
struct Running {
    index: usize,
    start: SimTime,
    end: SimTime,
    fail: bool,
    blackout: Option<SimTime>,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub state: ClusterState,
    pub timing: Timing,
    failure: FailureModel,
    rng: ChaCha8Rng,
    agenda: BTreeMap<(SimTime, u8, u64), Agenda>,
    seq: u64,
    pub log: Vec<LogRecord>,
    pub inbox: Vec<Notice>,
    waiting_restart: BTreeSet<VmId>,
    queued_scale_outs: Vec<TenantId>,
    action_count: u64,
    scripted_hits: Vec<u32>,
    support_lost: BTreeSet<VmId>,
}

impl Simulation {
    pub fn new(state: ClusterState, timing: Timing, failure: FailureModel, events: Vec<ScenarioEvent>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(failure.seed);
        let hits = vec![0; failure.scripted.len()];
        let mut sim = Self {
            state,
            timing,
            failure,
            rng,
            agenda: BTreeMap::new(),
            seq: 0,
            log: Vec::new(),
            inbox: Vec::new(),
            waiting_restart: BTreeSet::new(),
            queued_scale_outs: Vec::new(),
            action_count: 0,
            scripted_hits: hits,
            support_lost: BTreeSet::new(),
        };
        for e in events {
            sim.push(e.at, 0, Agenda::Scenario(e.kind));
        }
        sim
    }

    pub fn now(&self) -> SimTime {
        self.state.clock
    }

    fn push(&mut self, at: SimTime, prio: u8, item: Agenda) {
        self.seq += 1;
        self.agenda.insert((at, prio, self.seq), item);
    }

    pub fn record(&mut self, event: LogEvent) {
        self.log.push(LogRecord {
            t_ms: self.state.clock,
            event,
        });
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.inbox)
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.agenda.keys().next().map(|k| k.0)
    }

    /// Whether any scenario events are still in the future.
    pub fn has_future_events(&self) -> bool {
        !self.agenda.is_empty()
    }

    /// Processes every queued event at or before `t` and moves the clock to `t`.
    pub fn advance_to(&mut self, t: SimTime) {
        self.run_agenda_until(t);
        self.state.clock = self.state.clock.max(t);
    }

    pub fn advance_by(&mut self, d: Millis) {
        let t = self.state.clock + d;
        self.advance_to(t);
    }

    fn run_agenda_until(&mut self, t: SimTime) {
        while let Some((&key, _)) = self.agenda.iter().next() {
            if key.0 > t {
                break;
            }
            let item = self.agenda.remove(&key).expect("present");
            self.state.clock = self.state.clock.max(key.0);
            match item {
                Agenda::Scenario(kind) => self.handle_scenario(kind),
                Agenda::Restart(vm) => self.try_restart(&vm),
                Agenda::ScaleOutRetry(t) => {
                    let _ = self.scale_out(&t);
                }
                Agenda::ScaleInRetry(t) => {
                    let _ = self.scale_in(&t);
                }
            }
            self.after_event();
        }
    }

    fn handle_scenario(&mut self, kind: EventKind) {
        match kind {
            EventKind::UpgradeRequest { request } => {
                self.record(LogEvent::RequestReceived {
                    request: request.id.to_string(),
                });
                self.inbox.push(Notice::UpgradeRequest { request });
            }
            EventKind::AdminUndo { set } => {
                self.record(LogEvent::AdminUndoReceived { set: set.clone() });
                self.inbox.push(Notice::AdminUndo { set });
            }
            EventKind::ScaleOut { tenant } => {
                let _ = self.scale_out(&tenant);
            }
            EventKind::ScaleIn { tenant } => {
                let _ = self.scale_in(&tenant);
            }
            EventKind::HostFailure { host } => {
                let _ = self.inject_host_failure(&host);
            }
            EventKind::HostRepair { host } => {
                if let Some(h) = self.state.hosts.get_mut(&host) {
                    h.up = true;
                    self.record(LogEvent::HostRepaired { host });
                    self.inbox.push(Notice::CapacityChanged);
                }
            }
            EventKind::HostAddition { host, resources, dependencies } => {
                let id = host.id.clone();
                if !resources.iter().any(|r| r.id == id) {
                    self.state.resources.insert(
                        id.clone(),
                        InfraResource {
                            id: id.clone(),
                            kind: host.kind(),
                            host: None,
                            components: BTreeMap::new(),
                            active: true,
                        },
                    );
                }
                self.state.hosts.insert(id.clone(), host);
                for r in resources {
                    self.state.resources.insert(r.id.clone(), r);
                }
                self.state.dependencies.extend(dependencies);
                self.record(LogEvent::HostAdded { host: id });
                self.inbox.push(Notice::CapacityChanged);
            }
        }
    }

    /// Retries waiting placements and audits VM-supporting services.
    fn after_event(&mut self) {
        let waiting: Vec<VmId> = self.waiting_restart.iter().cloned().collect();
        for vm in waiting {
            self.try_restart(&vm);
        }
        let queued = std::mem::take(&mut self.queued_scale_outs);
        for t in queued {
            let _ = self.scale_out(&t);
        }
        self.check_support();
    }

    /// Logs VMs whose host has lost an active VM-supporting storage/controller.
    fn check_support(&mut self) {
        let mut lost = Vec::new();
        let mut restored = Vec::new();
        for vm in self.state.vms.values() {
            let ok = match &vm.host {
                None => true,
                Some(h) => self.vm_supported(h),
            };
            if !ok && !self.support_lost.contains(&vm.id) {
                lost.push((vm.id.clone(), vm.host.clone().expect("placed")));
            } else if ok && self.support_lost.contains(&vm.id) {
                restored.push(vm.id.clone());
            }
        }
        for (vm, host) in lost {
            self.support_lost.insert(vm.clone());
            self.record(LogEvent::VmSupportLost { vm, host });
        }
        for vm in restored {
            self.support_lost.remove(&vm);
            self.record(LogEvent::VmSupportRestored { vm });
        }
    }

    fn vm_supported(&self, host: &HostId) -> bool {
        self.state
            .resources
            .values()
            .filter(|r| r.host.as_ref() == Some(host) && r.kind == ResourceKind::Hypervisor)
            .all(|hv| {
                self.state
                    .sponsors_of(&hv.id, DependencyKind::VmSupportingStorageController)
                    .all(|s| self.state.resources.get(s).is_some_and(|r| r.active))
            })
    }

    // ---- scaling -------------------------------------------------------

    /// Scale-out of `s_n` VMs clamped at `max_n`; deferred within cooldown and
    /// queued when no compatible capacity exists.
    pub fn scale_out(&mut self, tenant: &TenantId) -> Result<u32> {
        let t = self
            .state
            .tenants
            .get(tenant)
            .cloned()
            .ok_or_else(|| Error::UnknownTenant(tenant.to_string()))?;
        let now = self.now();
        if let Some(last) = t.last_scaling_at {
            if now < last + t.cooldown {
                let until = last + t.cooldown;
                self.record(LogEvent::ScaleOutDeferred {
                    tenant: tenant.clone(),
                    until,
                });
                self.push(until, 1, Agenda::ScaleOutRetry(tenant.clone()));
                return Ok(0);
            }
        }
        let current = self.state.tenant_vm_count(tenant);
        let n = t.scaling_step.min(t.max.saturating_sub(current));
        if n == 0 {
            self.record(LogEvent::ScalingClamped { tenant: tenant.clone() });
            return Ok(0);
        }
        let generation = if self.state.tenant_vms(tenant).any(|v| v.generation == VmGeneration::New) {
            VmGeneration::New
        } else {
            VmGeneration::Old
        };
        // Check the whole step fits before placing anything.
        let mut probe = self.state.clone();
        let mut placements = Vec::new();
        for _ in 0..n {
            let group = smallest_group(&probe, &t.id, &t.groups);
            let Some(host) = probe.find_placement(generation, &group, &BTreeSet::new()) else {
                self.record(LogEvent::ScaleOutRejected { tenant: tenant.clone() });
                if !self.queued_scale_outs.contains(tenant) {
                    self.queued_scale_outs.push(tenant.clone());
                }
                return Ok(0);
            };
            let id = probe.fresh_vm_id(tenant);
            probe.vms.insert(
                id.clone(),
                Vm {
                    id: id.clone(),
                    tenant: tenant.clone(),
                    group: group.clone(),
                    host: Some(host.clone()),
                    generation,
                },
            );
            placements.push((id, group, host));
        }
        self.state.next_vm_seq = probe.next_vm_seq;
        for (id, group, host) in placements {
            self.state.vms.insert(
                id.clone(),
                Vm {
                    id: id.clone(),
                    tenant: tenant.clone(),
                    group: group.clone(),
                    host: Some(host.clone()),
                    generation,
                },
            );
            self.record(LogEvent::VmCreated {
                vm: id,
                tenant: tenant.clone(),
                group,
                host,
            });
        }
        if let Some(ts) = self.state.tenants.get_mut(tenant) {
            ts.last_scaling_at = Some(now);
        }
        self.record(LogEvent::ScaleOutPlaced {
            tenant: tenant.clone(),
            count: n,
        });
        Ok(n)
    }

    /// Scale-in of `s_n` VMs clamped at `min_n`, preferring old-partition VMs and
    /// VMs on lightly loaded hosts.
    pub fn scale_in(&mut self, tenant: &TenantId) -> Result<u32> {
        let t = self
            .state
            .tenants
            .get(tenant)
            .cloned()
            .ok_or_else(|| Error::UnknownTenant(tenant.to_string()))?;
        let now = self.now();
        if let Some(last) = t.last_scaling_at {
            if now < last + t.cooldown {
                self.push(last + t.cooldown, 1, Agenda::ScaleInRetry(tenant.clone()));
                return Ok(0);
            }
        }
        let current = self.state.tenant_vm_count(tenant);
        let n = t.scaling_step.min(current.saturating_sub(t.min));
        if n == 0 {
            self.record(LogEvent::ScalingClamped { tenant: tenant.clone() });
            return Ok(0);
        }
        let partitioned = self.state.partitioning.is_some();
        let mut candidates: Vec<(bool, usize, VmId)> = self
            .state
            .tenant_vms(tenant)
            .filter(|v| v.host.is_some() && !self.state.inbound.contains_key(&v.id))
            .map(|v| {
                let load = v.host.as_ref().map_or(0, |h| self.state.vm_count_on(h));
                (!(partitioned && v.generation == VmGeneration::Old), load, v.id.clone())
            })
            .collect();
        candidates.sort();
        let mut removed = 0;
        for (_, _, id) in candidates.into_iter().take(n as usize) {
            self.state.vms.remove(&id);
            self.record(LogEvent::VmDeleted {
                vm: id,
                tenant: tenant.clone(),
            });
            removed += 1;
        }
        if let Some(ts) = self.state.tenants.get_mut(tenant) {
            ts.last_scaling_at = Some(now);
        }
        self.record(LogEvent::ScaleInRemoved {
            tenant: tenant.clone(),
            count: removed,
        });
        self.inbox.push(Notice::CapacityChanged);
        Ok(removed)
    }

    // ---- failures ------------------------------------------------------

    /// Takes a host down; its VMs restart on compatible hosts after the failover delay.
    pub fn inject_host_failure(&mut self, host: &HostId) -> Result<FailoverRecord> {
        let h = self
            .state
            .hosts
            .get_mut(host)
            .ok_or_else(|| Error::UnknownHost(host.to_string()))?;
        h.up = false;
        self.record(LogEvent::HostFailed { host: host.clone() });
        let vms: Vec<VmId> = self.state.vms_on(host).map(|v| v.id.clone()).collect();
        let restart_at = self.now() + self.timing.failover_restart;
        for id in &vms {
            self.take_down(id, OutageCause::HostFailure);
            self.push(restart_at, 1, Agenda::Restart(id.clone()));
        }
        Ok(FailoverRecord {
            host: host.clone(),
            vms,
            restart_at,
        })
    }

    fn take_down(&mut self, id: &VmId, cause: OutageCause) {
        let Some(vm) = self.state.vms.get_mut(id) else { return };
        if vm.host.is_none() {
            return;
        }
        vm.host = None;
        let (tenant, group) = (vm.tenant.clone(), vm.group.clone());
        self.record(LogEvent::VmDown {
            vm: id.clone(),
            tenant,
            group,
            cause,
        });
    }

    fn bring_up(&mut self, id: &VmId, host: &HostId) {
        let Some(vm) = self.state.vms.get_mut(id) else { return };
        vm.host = Some(host.clone());
        let tenant = vm.tenant.clone();
        self.record(LogEvent::VmUp {
            vm: id.clone(),
            tenant,
            host: host.clone(),
        });
    }

    fn try_restart(&mut self, id: &VmId) {
        let Some(vm) = self.state.vms.get(id) else {
            self.waiting_restart.remove(id);
            return;
        };
        if vm.host.is_some() {
            self.waiting_restart.remove(id);
            return;
        }
        match self.state.find_placement(vm.generation, &vm.group.clone(), &BTreeSet::new()) {
            Some(h) => {
                self.waiting_restart.remove(id);
                self.bring_up(id, &h);
                self.inbox.push(Notice::CapacityChanged);
            }
            None => {
                self.waiting_restart.insert(id.clone());
            }
        }
    }

    // ---- schedule execution ---------------------------------------------

    fn should_fail(&mut self, lane: &Lane, action: &LaneAction) -> bool {
        self.action_count += 1;
        let occurrence = self.action_count;
        let roll: f64 = self.rng.gen();
        let full = action.label();
        let label = match action {
            LaneAction::Resource(a) => a.action_id.clone(),
            _ => full.clone(),
        };
        let target = lane
            .resource
            .clone()
            .or_else(|| action.vm().map(|v| ResourceId::new(v.as_str())));
        let mut scripted = false;
        for (i, s) in self.failure.scripted.iter().enumerate() {
            if let Some(o) = s.occurrence {
                if o == occurrence {
                    scripted = true;
                }
                continue;
            }
            let matches = s.resource.as_ref().is_none_or(|r| Some(r) == target.as_ref())
                && s.action.as_ref().is_none_or(|a| *a == label || *a == full);
            if matches {
                self.scripted_hits[i] += 1;
                if self.scripted_hits[i] == s.nth.unwrap_or(1) {
                    scripted = true;
                }
            }
        }
        if scripted {
            return true;
        }
        let p = match (lane.purpose, action) {
            (LanePurpose::Recovery, _) => self.failure.undo_probability,
            (_, LaneAction::Resource(a)) => {
                if self.failure.products.is_empty() || self.failure.products.contains(&a.product) {
                    self.failure.probabilities.get(&a.kind).copied().unwrap_or(0.0)
                } else {
                    0.0
                }
            }
            (_, LaneAction::Migrate { .. }) => self.failure.migration_probability,
            _ => 0.0,
        };
        p > 0.0 && roll < p
    }

    fn duration_of(&self, action: &LaneAction) -> Millis {
        match action {
            LaneAction::Resource(a) => a.duration,
            LaneAction::Migrate { .. } => self.timing.migration,
            LaneAction::ConvertVm { .. } => self.timing.vm_conversion,
            LaneAction::RecreateVm { .. } => self.timing.failover_restart,
        }
    }

    fn validate(&self, sched: &RuntimeUpgradeSchedule) -> Result<()> {
        for lane in &sched.lanes {
            if let Some(r) = &lane.resource {
                let creates = lane.kind.is_some()
                    && matches!(lane.actions.first(), Some(LaneAction::Resource(a)) if a.kind == ActionKind::Install);
                if !self.state.resources.contains_key(r) && !creates {
                    return Err(Error::UnknownResource(r.to_string()));
                }
            }
            for a in &lane.actions {
                if let Some(vm) = a.vm() {
                    if !self.state.vms.contains_key(vm) {
                        return Err(Error::UnknownResource(vm.to_string()));
                    }
                }
                if let LaneAction::Migrate { to, .. } | LaneAction::RecreateVm { to, .. } = a {
                    if !self.state.hosts.contains_key(to) {
                        return Err(Error::UnknownHost(to.to_string()));
                    }
                }
            }
        }
        Ok(())
    }

    fn start_action(&mut self, sched: &RuntimeUpgradeSchedule, lane_ix: usize, index: usize) -> Option<Running> {
        let lane = &sched.lanes[lane_ix];
        let action = lane.actions.get(index)?.clone();
        let start = self.now();
        let end = start + self.duration_of(&action);
        let mut fail = self.should_fail(lane, &action);
        let mut blackout = None;
        match &action {
            LaneAction::Migrate { vm, to } => {
                let ok = self.state.vms.get(vm).is_some_and(|v| {
                    v.host.is_some()
                        && v.host.as_ref() != Some(to)
                        && self.state.host_available(to)
                        && self.state.group_free_on(&v.group, to, Some(vm))
                }) && self.state.has_room(to);
                if ok {
                    self.state.inbound.insert(vm.clone(), to.clone());
                    blackout = Some(end.saturating_sub(self.timing.migration_outage).max(start));
                } else {
                    fail = true;
                }
            }
            LaneAction::RecreateVm { vm, to } => {
                let ok = self.state.vms.get(vm).is_some_and(|v| self.state.group_free_on(&v.group, to, Some(vm)))
                    && self.state.has_room(to)
                    && self.state.host_available(to);
                if ok {
                    self.state.inbound.insert(vm.clone(), to.clone());
                } else {
                    fail = true;
                }
            }
            _ => {}
        }
        self.record(LogEvent::ActionStarted {
            schedule: sched.id.clone(),
            resource: lane.resource.clone(),
            vm: action.vm().cloned(),
            action: action.label(),
        });
        Some(Running {
            index,
            start,
            end,
            fail,
            blackout,
        })
    }

    /// Runs lanes concurrently in simulated time, actions within a lane in order;
    /// a lane stops at its first failed action.
    pub fn execute_schedule(&mut self, sched: &RuntimeUpgradeSchedule) -> Result<Vec<ActionOutcome>> {
        self.validate(sched)?;
        let mut running: Vec<Option<Running>> = (0..sched.lanes.len())
            .map(|i| self.start_action(sched, i, 0))
            .collect();
        let mut outcomes = Vec::new();
        loop {
            let next = running
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
                .map(|(i, r)| match r.blackout {
                    Some(b) => (b, 0u8, i),
                    None => (r.end, 1u8, i),
                })
                .min();
            let Some((t, what, lane_ix)) = next else { break };
            self.run_agenda_until(t);
            self.state.clock = self.state.clock.max(t);
            let lane = &sched.lanes[lane_ix];
            if what == 0 {
                let run = running[lane_ix].as_mut().expect("running");
                run.blackout = None;
                if let Some(LaneAction::Migrate { vm, .. }) = lane.actions.get(run.index) {
                    let vm = vm.clone();
                    self.take_down(&vm, OutageCause::Migration);
                }
                self.after_event();
                continue;
            }
            let run = running[lane_ix].take().expect("running");
            let action = lane.actions[run.index].clone();
            let success = !run.fail;
            self.finish_action(lane, &action, success);
            self.record(LogEvent::ActionFinished {
                schedule: sched.id.clone(),
                resource: lane.resource.clone(),
                vm: action.vm().cloned(),
                action: action.label(),
                success,
            });
            outcomes.push(ActionOutcome {
                schedule: sched.id.clone(),
                lane: lane_ix,
                index: run.index,
                resource: lane.resource.clone(),
                vm: action.vm().cloned(),
                action: action.label(),
                success,
                start: run.start,
                end: run.end,
            });
            self.after_event();
            if success {
                running[lane_ix] = self.start_action(sched, lane_ix, run.index + 1);
            }
        }
        Ok(outcomes)
    }

    fn finish_action(&mut self, lane: &Lane, action: &LaneAction, success: bool) {
        match action {
            LaneAction::Resource(a) => {
                if success {
                    let r = lane.resource.clone().expect("resource lanes name their resource");
                    self.apply_resource_action(&r, lane, a);
                }
            }
            LaneAction::Migrate { vm, to } => {
                self.state.inbound.remove(vm);
                if !self.state.vms.contains_key(vm) {
                    return;
                }
                if success {
                    self.bring_up(vm, to);
                } else if self.state.vms[vm].host.is_some() {
                    // failed before the switch: the VM has to be brought up anew
                    self.take_down(vm, OutageCause::Migration);
                }
            }
            LaneAction::ConvertVm { vm } => {
                if success {
                    if let Some(v) = self.state.vms.get_mut(vm) {
                        v.generation = VmGeneration::New;
                    }
                }
            }
            LaneAction::RecreateVm { vm, to } => {
                self.state.inbound.remove(vm);
                if success {
                    let new_side = self.state.is_new_side(to);
                    if let Some(v) = self.state.vms.get_mut(vm) {
                        if new_side {
                            v.generation = VmGeneration::New;
                        }
                    }
                    self.bring_up(vm, to);
                }
            }
        }
    }

    fn apply_resource_action(&mut self, r: &ResourceId, lane: &Lane, a: &ResolvedAction) {
        if !self.state.resources.contains_key(r) {
            self.state.resources.insert(
                r.clone(),
                InfraResource {
                    id: r.clone(),
                    kind: lane.kind.unwrap_or(ResourceKind::Other),
                    host: lane.host.clone(),
                    components: BTreeMap::new(),
                    active: false,
                },
            );
            self.record(LogEvent::ResourceCreated { resource: r.clone() });
        }
        let res = self.state.resources.get_mut(r).expect("inserted");
        let was_active = res.active;
        a.apply(&mut res.components, &mut res.active);
        let now_active = res.active;
        let kind = res.kind;
        let host = res.host.clone();
        let empty = res.components.is_empty();
        if a.kind == ActionKind::Install && kind == ResourceKind::Hypervisor {
            if let Some(h) = host.as_ref().and_then(|h| self.state.hosts.get_mut(h)) {
                h.capacity = h.upgraded_capacity;
            }
        }
        if was_active != now_active {
            self.record(LogEvent::ResourceActivation {
                resource: r.clone(),
                active: now_active,
            });
        }
        if a.kind == ActionKind::Remove && empty && !kind.is_host() {
            self.state.resources.remove(r);
            self.state.dependencies.retain(|d| &d.from != r && &d.to != r);
            self.record(LogEvent::ResourceRemoved { resource: r.clone() });
        }
    }

    /// Writes the event log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

fn smallest_group(state: &ClusterState, tenant: &TenantId, groups: &[GroupId]) -> GroupId {
    let count = |g: &GroupId| state.tenant_vms(tenant).filter(|v| &v.group == g).count();
    groups
        .iter()
        .min_by_key(|g| (count(g), (*g).clone()))
        .cloned()
        .unwrap_or_else(|| GroupId::new(tenant.as_str()))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{outage_records, per_vm_outage};
    use crate::presets;
    use crate::schedule::{Lane, LaneAction, LanePurpose};

    fn sim(s: &crate::scenario::ScenarioFile) -> Simulation {
        Simulation::new(s.to_state(), s.timing.clone(), FailureModel::default(), Vec::new())
    }

    #[test]
    fn parallel_upgrades_finish_together() {
        let s = presets::scenario_a();
        let (rg, ..) = crate::graph::tests::graph_for(&s);
        let mut sched = RuntimeUpgradeSchedule::new("u", 0);
        for r in ["hv-h06", "hv-h07"] {
            let r = ResourceId::from(r);
            sched.lanes.push(Lane {
                resource: Some(r.clone()),
                kind: None,
                host: None,
                purpose: LanePurpose::Upgrade,
                actions: rg.vertices[&r].levels[0].actions.iter().cloned().map(LaneAction::Resource).collect(),
            });
        }
        let mut sim = sim(&s);
        let outcomes = sim.execute_schedule(&sched).unwrap();
        assert!(outcomes.iter().all(|o| o.success));
        for lane in 0..2 {
            assert_eq!(outcomes.iter().filter(|o| o.lane == lane).map(|o| o.end).max(), Some(41_000));
        }
        assert_eq!(sim.state.resources[&"hv-h06".into()].components[&"hypervisor".into()], "2");
    }

    #[test]
    fn live_migration_blacks_out_for_the_final_window() {
        let s = presets::scenario_a();
        let mut sim = sim(&s);
        let mut sched = RuntimeUpgradeSchedule::new("m", 0);
        sched.lanes.push(Lane::vm_lane(
            LanePurpose::Consolidation,
            vec![LaneAction::Migrate {
                vm: "T4-v1".into(),
                to: presets::host_id(9),
            }],
        ));
        let outcomes = sim.execute_schedule(&sched).unwrap();
        assert_eq!(outcomes[0].end, 23_000);
        let records = outage_records(&sim.log);
        assert_eq!(records.len(), 1);
        assert_eq!((records[0].start, records[0].end), (22_400, 23_000));
        assert_eq!(per_vm_outage(&sim.log)[&VmId::from("T4-v1")], 600);
        assert_eq!(sim.state.vms[&"T4-v1".into()].host, Some(presets::host_id(9)));
    }

    #[test]
    fn scale_out_within_cooldown_is_deferred() {
        let mut sim = sim(&presets::scenario_a());
        let t = TenantId::from("T1");
        assert_eq!(sim.scale_out(&t).unwrap(), 1);
        sim.advance_by(30_000);
        assert_eq!(sim.scale_out(&t).unwrap(), 0);
        assert!(sim
            .log
            .iter()
            .any(|r| r.event == LogEvent::ScaleOutDeferred { tenant: t.clone(), until: 120_000 }));
        sim.advance_to(120_000);
        assert_eq!(sim.state.tenant_vm_count(&t), 4);
    }

    #[test]
    fn scale_out_stops_at_the_maximum() {
        let mut sim = sim(&presets::scenario_a());
        let t = TenantId::from("T4");
        for _ in 0..5 {
            sim.scale_out(&t).unwrap();
            sim.advance_by(120_000);
        }
        assert_eq!(sim.state.tenant_vm_count(&t), 4);
        assert!(!sim.log.iter().any(|r| matches!(r.event, LogEvent::ScaleOutRejected { .. })));
    }

    #[test]
    fn host_failure_restarts_the_vms_elsewhere() {
        let mut sim = sim(&presets::scenario_a());
        let h = presets::host_id(4);
        let rec = sim.inject_host_failure(&h).unwrap();
        assert_eq!(rec.restart_at, 10_000);
        sim.advance_to(10_000);
        for vm in &rec.vms {
            let host = sim.state.vms[vm].host.clone().unwrap();
            assert_ne!(host, h);
            assert_eq!(per_vm_outage(&sim.log)[vm], 10_000);
        }
    }

    #[test]
    fn scripted_failure_stops_the_lane() {
        let s = presets::scenario_a();
        let (rg, ..) = crate::graph::tests::graph_for(&s);
        let r = ResourceId::from("hv-h06");
        let mut sched = RuntimeUpgradeSchedule::new("u", 0);
        sched.lanes.push(Lane {
            resource: Some(r.clone()),
            kind: None,
            host: None,
            purpose: LanePurpose::Upgrade,
            actions: rg.vertices[&r].levels[0].actions.iter().cloned().map(LaneAction::Resource).collect(),
        });
        let failure = FailureModel {
            scripted: vec![ScriptedFailure {
                resource: Some(r.clone()),
                action: Some("install:hypervisor@2".into()),
                nth: Some(1),
                ..Default::default()
            }],
            ..Default::default()
        };
        let mut sim = Simulation::new(s.to_state(), s.timing.clone(), failure, Vec::new());
        let outcomes = sim.execute_schedule(&sched).unwrap();
        let last = outcomes.last().unwrap();
        assert!(!last.success);
        assert!(last.action.starts_with("install"));
        assert_eq!(sim.state.resources[&r].components[&"hypervisor".into()], "1");
    }
}
