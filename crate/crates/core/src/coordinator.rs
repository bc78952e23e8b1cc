//! The iterative upgrade loop: keeps the resource and control graphs current,
//! plans each iteration within the SLA budget and drives the engine.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::ResourceUpgradeCatalog;
use crate::cluster::{Partitioning, VmGeneration};
use crate::control::{coarsen, update_cg, ControlGraph};
use crate::engine::{LogEvent, Notice, Simulation};
use crate::error::Result;
use crate::graph::{merge_new_requests, ResourceGraph, UndoTrigger, UpgradeMethod};
use crate::migration::{
    build_vm_schedule, migration_budget, reevaluate_new_reservation, replacement_schedule, select_sub_iteration,
    MigrationBudget, SubIteration,
};
use crate::planner::{
    build_schedule, compute_t_i, initial_batch, iteration_budget, migration_schedule, plan_consolidation,
    process_feedback, process_recovery_feedback, select_final_batch, unit_switch_actions, Elimination,
    IterationBudget, PartitionView, PlanContext, Policies,
};
use crate::request::UpgradeRequestModel;
use crate::schedule::{ActionOutcome, Lane, LaneAction, LanePurpose, RuntimeUpgradeSchedule};
use crate::types::{GroupId, HostId, ResourceId, SetId, SimTime, Status, VmId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Running,
    Suspended,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub schedule: RuntimeUpgradeSchedule,
    pub outcomes: Vec<ActionOutcome>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpgradeIterationReport {
    pub iteration: u64,
    pub started_ms: SimTime,
    pub finished_ms: SimTime,
    pub phase: Option<Phase>,
    pub accepted_requests: Vec<String>,
    pub rejected_requests: Vec<String>,
    pub undone: Vec<(SetId, UndoTrigger)>,
    pub completed_sets: Vec<SetId>,
    pub switchovers: Vec<String>,
    pub consolidation: Vec<Vec<(VmId, HostId)>>,
    pub initial_batch: Vec<GroupId>,
    pub eliminated: Vec<Elimination>,
    pub ppu_check: Option<bool>,
    pub budget: Option<IterationBudget>,
    pub final_batch: Vec<GroupId>,
    pub migration_budget: Option<MigrationBudget>,
    pub sub_iterations: Vec<SubIteration>,
    pub schedules: Vec<ScheduleRecord>,
    pub failed_resources: Vec<ResourceId>,
    pub isolated_only: Vec<ResourceId>,
    pub failed: Vec<ResourceId>,
    pub failed_undo_units: Vec<SetId>,
}

impl UpgradeIterationReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &ActionOutcome> {
        self.schedules.iter().flat_map(|s| s.outcomes.iter())
    }

    fn did_work(&self) -> bool {
        self.schedules.iter().any(|s| !s.schedule.lanes.is_empty())
            || !self.undone.is_empty()
            || !self.completed_sets.is_empty()
            || !self.accepted_requests.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub policies: Policies,
    /// Stop once the simulated clock passes this instant.
    pub max_sim_time: Option<SimTime>,
    pub max_iterations: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            policies: Policies::default(),
            max_sim_time: None,
            max_iterations: 10_000,
        }
    }
}

pub struct Coordinator {
    pub sim: Simulation,
    pub catalog: ResourceUpgradeCatalog,
    pub model: UpgradeRequestModel,
    pub rg: ResourceGraph,
    pub cg: ControlGraph,
    pub phase: Phase,
    pub iteration: u64,
    pub config: CoordinatorConfig,
    pub reports: Vec<UpgradeIterationReport>,
    notices: Vec<Notice>,
    schedule_seq: u64,
}

impl Coordinator {
    pub fn new(sim: Simulation, catalog: ResourceUpgradeCatalog, config: CoordinatorConfig) -> Result<Self> {
        let rg = ResourceGraph::from_config(&sim.state)?;
        let cg = coarsen(&rg);
        Ok(Self {
            sim,
            catalog,
            model: UpgradeRequestModel::new(),
            rg,
            cg,
            phase: Phase::Running,
            iteration: 0,
            config,
            reports: Vec::new(),
            notices: Vec::new(),
            schedule_seq: 0,
        })
    }

    fn next_id(&mut self, what: &str) -> String {
        self.schedule_seq += 1;
        format!("i{}-s{}-{what}", self.iteration, self.schedule_seq)
    }

    fn execute(&mut self, schedule: RuntimeUpgradeSchedule, report: &mut UpgradeIterationReport) -> Vec<ActionOutcome> {
        if schedule.lanes.is_empty() {
            return Vec::new();
        }
        let outcomes = self.sim.execute_schedule(&schedule).unwrap_or_default();
        report.schedules.push(ScheduleRecord {
            schedule,
            outcomes: outcomes.clone(),
        });
        outcomes
    }

    /// Runs VM migrations and brings up replacements for VMs whose migration failed.
    fn execute_migrations(
        &mut self,
        schedule: RuntimeUpgradeSchedule,
        generation: Option<VmGeneration>,
        report: &mut UpgradeIterationReport,
    ) {
        let outcomes = self.execute(schedule, report);
        let lost: Vec<VmId> = outcomes
            .iter()
            .filter(|o| !o.success)
            .filter_map(|o| o.vm.clone())
            .filter(|vm| self.sim.state.vms.get(vm).is_some_and(|v| v.host.is_none()))
            .collect();
        if lost.is_empty() {
            return;
        }
        let id = self.next_id("replace");
        let now = self.sim.now();
        let rep = replacement_schedule(&self.sim.state, &lost, generation, id, now);
        self.execute(rep, report);
    }

    fn ctx(&self) -> PlanContext<'_> {
        PlanContext {
            rg: &self.rg,
            cg: &self.cg,
            config: &self.sim.state,
            catalog: &self.catalog,
        }
    }

    /// Marks the compute hosts already on the new side while a PPU unit is open.
    fn update_partitioning(&mut self) {
        let mut news = BTreeSet::new();
        let mut open = false;
        for u in self.rg.units.values().filter(|u| u.method == UpgradeMethod::Ppu) {
            let Some((olds, n)) = &u.partitions else { continue };
            if self.rg.unit_pending(&u.id) || olds.iter().any(|o| self.sim.state.resources.contains_key(o)) {
                open = true;
                news.extend(n.iter().cloned());
            }
        }
        if !open {
            self.sim.state.partitioning = None;
            return;
        }
        let state = &self.sim.state;
        let new_side = state
            .compute_hosts()
            .filter(|h| {
                state.resources.values().any(|r| {
                    r.host.as_ref() == Some(&h.id)
                        && state.dependencies.iter().any(|d| d.from == r.id && news.contains(&d.to))
                })
            })
            .map(|h| h.id.clone())
            .collect();
        self.sim.state.partitioning = Some(Partitioning { new_side });
    }

    fn new_side_ready(&self) -> bool {
        self.rg.units.values().any(|u| {
            u.method == UpgradeMethod::Ppu
                && u.partitions.as_ref().is_some_and(|(_, news)| {
                    news.iter().all(|n| self.sim.state.resources.get(n).is_some_and(|r| r.active))
                })
        })
    }

    fn absorb_notices(&mut self, report: &mut UpgradeIterationReport) {
        let mut notices = std::mem::take(&mut self.notices);
        notices.extend(self.sim.take_notices());
        let now = self.sim.now();
        for n in notices {
            match n {
                Notice::UpgradeRequest { request } => {
                    let id = request.id.to_string();
                    match self.model.submit_request(request, &self.sim.state, &self.catalog, now) {
                        Ok(_) => report.accepted_requests.push(id),
                        Err(e) => report.rejected_requests.push(format!("{id}: {e}")),
                    }
                }
                Notice::AdminUndo { set } => {
                    if let Err(e) = self.model.record_admin_undo(&set) {
                        self.sim.record(LogEvent::Note { text: e.to_string() });
                    }
                }
                Notice::CapacityChanged => {}
            }
        }
    }

    /// Step 1: requests, feedback, undo triggers and completion.
    fn step1(&mut self, report: &mut UpgradeIterationReport) -> Result<()> {
        self.absorb_notices(report);
        self.rg.sync_with_config(&self.sim.state)?;
        let fresh = std::mem::take(&mut self.model.unmerged);
        merge_new_requests(&mut self.rg, &fresh, &self.model, &self.sim.state, &self.catalog)?;
        for s in &fresh {
            self.model.advance(s, Status::Scheduled)?;
        }
        let previous = self.reports.last().cloned().unwrap_or_default();
        let now = self.sim.now();
        report.undone = self
            .rg
            .apply_iteration_report(&previous, &mut self.model, &self.sim.state, &self.catalog, now)?;
        self.sync_isolation();
        self.update_partitioning();
        Ok(())
    }

    fn sync_isolation(&mut self) {
        self.sim.state.isolated = self.rg.vertices.values().filter(|v| v.isolated).map(|v| v.id.clone()).collect();
    }

    /// Completes sets without remaining work; isolated-only members become failed.
    pub fn finalize_change_sets(&mut self, report: &mut UpgradeIterationReport) -> Result<()> {
        let open: Vec<SetId> = self
            .model
            .open_sets()
            .filter(|s| s.status == Status::Scheduled)
            .map(|s| s.id.clone())
            .collect();
        for id in open {
            if self.rg.set_pending(&id) {
                continue;
            }
            let status = self.finalize_change_set(&id)?;
            if status == Status::Completed {
                report.completed_sets.push(id);
            }
        }
        Ok(())
    }

    pub fn finalize_change_set(&mut self, id: &SetId) -> Result<Status> {
        if self.model.set(id)?.status == Status::Failed {
            return Ok(Status::Failed);
        }
        let failed = self.rg.finalize_completed(id);
        for r in failed {
            self.sim.record(LogEvent::Note {
                text: format!("{r} failed in {id}"),
            });
        }
        self.model.advance(id, Status::Completed)?;
        Ok(Status::Completed)
    }

    fn refresh_graphs(&mut self) -> Result<()> {
        self.rg.sync_with_config(&self.sim.state)?;
        self.sync_isolation();
        self.update_partitioning();
        self.cg = update_cg(&self.cg, &self.rg);
        Ok(())
    }

    /// Split-mode switchovers of units whose first partition is upgraded.
    fn switchovers(&mut self, report: &mut UpgradeIterationReport) -> Result<()> {
        let ready: Vec<_> = self
            .rg
            .units
            .values()
            .filter(|u| u.method == UpgradeMethod::SplitMode && !u.switchover_done && !u.switch_actions.is_empty())
            .filter(|u| {
                let (p1, _) = u.partitions.as_ref().expect("split units have partitions");
                !p1.iter()
                    .any(|m| self.rg.vertices.get(m).is_some_and(|v| v.levels.iter().any(|l| l.unit == u.id)))
            })
            .cloned()
            .collect();
        for unit in ready {
            let (deacts, acts) = unit_switch_actions(&unit);
            for part in [deacts, acts] {
                let id = self.next_id("switchover");
                let mut s = RuntimeUpgradeSchedule::new(id, self.sim.now());
                for (r, actions) in part {
                    if !self.sim.state.resources.contains_key(&r) {
                        continue;
                    }
                    let v = &self.rg.vertices[&r];
                    s.lanes.push(Lane {
                        resource: Some(r.clone()),
                        kind: Some(v.kind),
                        host: v.host.clone(),
                        purpose: LanePurpose::Switchover,
                        actions: actions.into_iter().map(LaneAction::Resource).collect(),
                    });
                }
                let outcomes = self.execute(s.clone(), report);
                for (i, lane) in s.lanes.iter().enumerate() {
                    let ok = outcomes.iter().filter(|o| o.lane == i && o.success).count() == lane.actions.len();
                    if !ok {
                        let r = lane.resource.clone().expect("resource lane");
                        self.rg.mark_failed(&r);
                        report.failed_resources.push(r);
                    }
                }
            }
            if let Some(u) = self.rg.units.get_mut(&unit.id) {
                u.switchover_done = true;
            }
            report.switchovers.push(unit.id.to_string());
        }
        Ok(())
    }

    /// Step 3: consolidation, batch selection and execution with recovery.
    fn step3(&mut self, report: &mut UpgradeIterationReport) -> Result<()> {
        self.switchovers(report)?;
        self.refresh_graphs()?;

        let ppu_blocked = self
            .ctx()
            .ppu_requirements()
            .map(|(o, n)| !crate::planner::ppu_storage_check(&PartitionView::of(&self.sim.state), o, n))
            .unwrap_or(false);
        let plan = plan_consolidation(&self.sim.state, &self.cg, ppu_blocked);
        for step in &plan.steps {
            let id = self.next_id("consolidate");
            let s = migration_schedule(id, self.sim.now(), LanePurpose::Consolidation, step);
            self.execute_migrations(s, None, report);
        }
        report.consolidation = plan.steps;
        self.refresh_graphs()?;

        let ctx = PlanContext {
            rg: &self.rg,
            cg: &self.cg,
            config: &self.sim.state,
            catalog: &self.catalog,
        };
        let init = initial_batch(&ctx);
        report.initial_batch = init.batch.groups.iter().cloned().collect();
        report.eliminated = init.eliminated.clone();
        report.ppu_check = init.ppu_check;
        if init.batch.groups.is_empty() {
            return Ok(());
        }
        let t_i = compute_t_i(&init.batch, &self.cg, &self.rg)?;
        let view = PartitionView::of(&self.sim.state);
        let budget = iteration_budget(&view, &self.sim.state, t_i, &self.config.policies);
        let sel = select_final_batch(&ctx, &init.batch, budget.z_i, &self.config.policies);
        report.budget = Some(budget);
        report.final_batch = sel.batch.groups.iter().cloned().collect();
        if sel.batch.groups.is_empty() {
            return Ok(());
        }
        let now = self.sim.now();
        self.schedule_seq += 1;
        let id = format!("i{}-s{}-batch", self.iteration, self.schedule_seq);
        let schedules = build_schedule(&ctx, &sel, &id, now);
        for s in schedules {
            let purpose_upgrade = s.lanes.iter().any(|l| l.resource.is_some());
            if !purpose_upgrade {
                self.execute_migrations(s, None, report);
                continue;
            }
            // Lanes whose host still holds VMs after evacuation are dropped.
            let mut s = s;
            let state = &self.sim.state;
            let cg = &self.cg;
            s.lanes.retain(|l| {
                let r = l.resource.as_ref().expect("resource lane");
                let hosts: Vec<&ResourceId> = cg
                    .group_of(r)
                    .map(|g| g.members.iter().filter(|m| state.hosts.get(*m).is_some_and(|h| h.is_compute())).collect())
                    .unwrap_or_default();
                let deact = l.actions.iter().any(|a| matches!(a, LaneAction::Resource(x) if x.kind == crate::catalog::ActionKind::Deactivate));
                !deact || hosts.iter().all(|h| state.load(h) == 0)
            });
            let outcomes = self.execute(s.clone(), report);
            let fb = process_feedback(&mut self.rg, &mut self.sim.state, &s, &outcomes);
            report.failed_resources.extend(fb.failed.iter().map(|(r, _)| r.clone()));
            report.failed.extend(fb.marked_failed.iter().cloned());
            if let Some(mut rec) = fb.recovery {
                rec.id = self.next_id("recovery");
                let rec_out = self.execute(rec.clone(), report);
                let failed = process_recovery_feedback(&mut self.rg, &mut self.sim.state, &rec, &rec_out);
                report.failed.extend(failed);
            }
        }
        self.refresh_graphs()?;
        Ok(())
    }

    /// Step 4: sub-iterations moving old VMs to the new partition.
    fn step4(&mut self, report: &mut UpgradeIterationReport) -> Result<()> {
        if self.sim.state.partitioning.is_none() || !self.new_side_ready() {
            return Ok(());
        }
        if !self.sim.state.vms.values().any(|v| v.generation == VmGeneration::Old) {
            return Ok(());
        }
        let per_vm = self.sim.timing.migration + self.sim.timing.vm_conversion;
        let failover = self.config.policies.failover;
        let Ok(budget) = migration_budget(&self.sim.state, per_vm, failover) else {
            return Ok(());
        };
        let mut remaining = budget.v_i;
        let mut j = 0;
        while remaining > 0 {
            j += 1;
            let sub = select_sub_iteration(&self.sim.state, remaining, j);
            let sub = reevaluate_new_reservation(&self.sim.state, sub, &budget, failover);
            if sub.batch.is_empty() {
                break;
            }
            remaining = remaining.saturating_sub(sub.batch.len() as u32);
            let id = self.next_id("migrate");
            let s = build_vm_schedule(&sub, true, id, self.sim.now());
            report.sub_iterations.push(sub);
            self.execute_migrations(s, Some(VmGeneration::New), report);
        }
        report.migration_budget = Some(budget);
        self.refresh_graphs()?;
        Ok(())
    }

    /// One pass of steps 1 to 4.
    pub fn run_iteration(&mut self) -> Result<UpgradeIterationReport> {
        self.iteration += 1;
        let mut report = UpgradeIterationReport {
            iteration: self.iteration,
            started_ms: self.sim.now(),
            ..Default::default()
        };
        let now = self.sim.now();
        self.sim.advance_to(now);
        self.step1(&mut report)?;
        self.finalize_change_sets(&mut report)?;
        self.cg = update_cg(&self.cg, &self.rg);
        self.step3(&mut report)?;
        self.step4(&mut report)?;
        self.finalize_change_sets(&mut report)?;
        let overhead = self.sim.timing.coordination_overhead;
        self.sim.advance_by(overhead);

        for u in self.rg.undo_units.values() {
            report.isolated_only.extend(u.isolated_only.iter().cloned());
            if !u.failed.is_empty() {
                report.failed_undo_units.push(u.id.clone());
            }
        }
        report.isolated_only.sort();
        report.isolated_only.dedup();
        report.failed.sort();
        report.failed.dedup();
        report.finished_ms = self.sim.now();

        let quiet = self.model.all_final() && self.model.unmerged.is_empty() && self.sim.inbox.is_empty();
        self.phase = if quiet && !self.work_pending() {
            if self.sim.has_future_events() {
                Phase::Suspended
            } else {
                Phase::Terminated
            }
        } else if report.did_work() {
            Phase::Running
        } else {
            Phase::Suspended
        };
        report.phase = Some(self.phase);
        self.sim.record(LogEvent::Iteration {
            index: self.iteration,
            phase: format!("{:?}", self.phase).to_lowercase(),
        });
        self.reports.push(report.clone());
        Ok(report)
    }

    fn work_pending(&self) -> bool {
        self.rg.vertices.values().any(|v| !v.levels.is_empty())
    }

    /// Re-evaluates a suspended upgrade after configuration changes; returns the
    /// new phase without executing anything.
    pub fn check_suspension_resume(&mut self) -> Result<Phase> {
        let notices = self.sim.take_notices();
        let mut wake = false;
        for n in &notices {
            match n {
                Notice::UpgradeRequest { .. } | Notice::AdminUndo { .. } => wake = true,
                Notice::CapacityChanged => {}
            }
        }
        let capacity = notices.iter().any(|n| matches!(n, Notice::CapacityChanged));
        self.notices.extend(notices);
        let now = self.sim.now();
        if self.model.open_sets().any(|s| now > s.deadline()) {
            wake = true;
        }
        if !wake && capacity && self.would_progress()? {
            wake = true;
        }
        if wake {
            self.phase = Phase::Running;
        }
        Ok(self.phase)
    }

    /// Whether planning against the current configuration finds any work.
    pub fn would_progress(&self) -> Result<bool> {
        let mut rg = self.rg.clone();
        rg.sync_with_config(&self.sim.state)?;
        let cg = coarsen(&rg);
        let ctx = PlanContext {
            rg: &rg,
            cg: &cg,
            config: &self.sim.state,
            catalog: &self.catalog,
        };
        let blocked = ctx
            .ppu_requirements()
            .map(|(o, n)| !crate::planner::ppu_storage_check(&PartitionView::of(&self.sim.state), o, n))
            .unwrap_or(false);
        if !plan_consolidation(&self.sim.state, &cg, blocked).is_empty() {
            return Ok(true);
        }
        let init = initial_batch(&ctx);
        if !init.batch.groups.is_empty() {
            let t_i = compute_t_i(&init.batch, &cg, &rg)?;
            let view = PartitionView::of(&self.sim.state);
            let budget = iteration_budget(&view, &self.sim.state, t_i, &self.config.policies);
            if !select_final_batch(&ctx, &init.batch, budget.z_i, &self.config.policies).batch.groups.is_empty() {
                return Ok(true);
            }
        }
        if self.sim.state.partitioning.is_some() && self.new_side_ready() {
            let per_vm = self.sim.timing.migration + self.sim.timing.vm_conversion;
            if let Ok(b) = migration_budget(&self.sim.state, per_vm, self.config.policies.failover) {
                let sub = select_sub_iteration(&self.sim.state, b.v_i, 1);
                let sub = reevaluate_new_reservation(&self.sim.state, sub, &b, self.config.policies.failover);
                if !sub.batch.is_empty() {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    fn next_wake(&self) -> Option<SimTime> {
        let deadline = self.model.open_sets().map(|s| s.deadline() + 1).min();
        match (self.sim.next_event_time(), deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs iterations until every request is handled and no events remain.
    pub fn run(&mut self) -> Result<()> {
        loop {
            if let Some(max) = self.config.max_sim_time {
                if self.sim.now() > max {
                    self.phase = Phase::Terminated;
                    break;
                }
            }
            if self.iteration >= self.config.max_iterations {
                self.phase = Phase::Terminated;
                break;
            }
            match self.phase {
                Phase::Terminated => break,
                Phase::Running => {
                    self.run_iteration()?;
                }
                Phase::Suspended => {
                    let Some(wake) = self.next_wake() else {
                        self.phase = Phase::Terminated;
                        break;
                    };
                    let wake = wake.max(self.sim.now());
                    if let Some(max) = self.config.max_sim_time {
                        if wake > max {
                            self.sim.advance_to(max);
                            self.phase = Phase::Terminated;
                            break;
                        }
                    }
                    self.sim.advance_to(wake);
                    self.check_suspension_resume()?;
                }
            }
        }
        Ok(())
    }

    /// Every report as one JSON line each.
    pub fn reports_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    /// Sets that did not complete.
    pub fn unsuccessful_sets(&self) -> Vec<SetId> {
        self.model
            .sets
            .values()
            .filter(|s| s.status != Status::Completed)
            .map(|s| s.id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EventKind, ScriptedFailure};
    use crate::presets;
    use crate::types::{ResourceId, Status};

    fn hv_version(c: &Coordinator, r: &str) -> String {
        c.sim.state.resources[&ResourceId::from(r)].components[&"hypervisor".into()].clone()
    }

    #[test]
    fn first_iteration_upgrades_the_empty_hosts() {
        let mut c = presets::scenario_a().coordinator(None, None).unwrap();
        let r = c.run_iteration().unwrap();
        assert_eq!(r.iteration, 1);
        assert_eq!(r.accepted_requests.len(), 1);
        assert!(r.consolidation.is_empty());
        assert_eq!(r.final_batch.len(), 3);
        assert!(r.outcomes().all(|o| o.success));
        assert_eq!(r.finished_ms, 41_230);
        for g in &r.final_batch {
            let host = g.as_str().trim_start_matches("G:");
            assert_eq!(hv_version(&c, &format!("hv-{host}")), "2");
        }
    }

    #[test]
    fn request_arriving_mid_run_is_taken_next_iteration() {
        let mut s = presets::scenario_a();
        for e in &mut s.events {
            e.at = 20_000;
        }
        let mut c = s.coordinator(None, None).unwrap();
        let first = c.run_iteration().unwrap();
        assert!(first.accepted_requests.is_empty());
        c.sim.advance_to(20_000);
        let second = c.run_iteration().unwrap();
        assert_eq!(second.accepted_requests.len(), 1);
        assert!(!second.final_batch.is_empty());
    }

    #[test]
    fn full_cloud_suspends_until_a_scale_in() {
        let mut c = presets::suspension_scenario(600_000).coordinator(None, None).unwrap();
        c.run().unwrap();
        let phases: Vec<Option<Phase>> = c.reports.iter().map(|r| r.phase).collect();
        assert!(phases.contains(&Some(Phase::Suspended)));
        assert_eq!(c.phase, Phase::Terminated);
        assert!(c.unsuccessful_sets().is_empty());
    }

    fn failing(threshold: u32) -> Coordinator {
        let mut s = presets::two_set_scenario(threshold, 2);
        s.failure.scripted = (1..=2)
            .map(|k| ScriptedFailure {
                resource: Some("hv-h02".into()),
                action: Some("install".into()),
                nth: Some(k),
                ..Default::default()
            })
            .collect();
        let mut c = s.coordinator(None, None).unwrap();
        c.run().unwrap();
        c
    }

    #[test]
    fn completed_set_marks_its_isolated_member_failed() {
        let c = failing(4);
        assert_eq!(c.model.set(&"A".into()).unwrap().status, Status::Completed);
        assert!(c.rg.vertices[&ResourceId::from("hv-h02")].failed);
        assert_eq!(hv_version(&c, "hv-h02"), "1");
        assert_eq!(hv_version(&c, "hv-h01"), "2");
    }

    #[test]
    fn undone_set_returns_every_member_to_the_undo_version() {
        let c = failing(5);
        assert_eq!(c.model.set(&"A".into()).unwrap().status, Status::Failed);
        for i in 1..=5 {
            assert_eq!(hv_version(&c, &format!("hv-h0{i}")), "1");
        }
        assert!(c.sim.state.isolated.is_empty());
        assert_eq!(c.unsuccessful_sets(), vec![SetId::from("A")]);
        assert_eq!(c.model.set(&"B".into()).unwrap().status, Status::Completed);
    }

    #[test]
    fn admin_undo_of_a_running_set() {
        let mut s = presets::scenario_a();
        let set = match &s.events[0].kind {
            EventKind::UpgradeRequest { request } => request.change_sets[0].id.clone(),
            _ => unreachable!(),
        };
        s.events.push(crate::engine::ScenarioEvent {
            at: 50_000,
            kind: EventKind::AdminUndo { set: set.clone() },
        });
        let mut c = s.coordinator(None, None).unwrap();
        c.run().unwrap();
        assert_eq!(c.model.set(&set).unwrap().status, Status::Failed);
        for i in 1..=10 {
            assert_eq!(hv_version(&c, &format!("hv-{}", presets::host_id(i))), "1");
        }
    }

    #[test]
    fn report_lines_parse_back() {
        let mut c = presets::scenario_a().coordinator(None, None).unwrap();
        c.run().unwrap();
        for line in c.reports_jsonl().lines() {
            let back: UpgradeIterationReport = serde_json::from_str(line).unwrap();
            assert!(back.iteration >= 1);
        }
    }
}
