//! Outage, SLA violation and penalty accounting over engine event logs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::engine::{LogEvent, LogRecord, OutageCause};
use crate::error::Result;
use crate::types::{GroupId, Millis, SimTime, TenantId, VmId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageRecord {
    pub vm: VmId,
    pub tenant: TenantId,
    pub start: SimTime,
    pub end: SimTime,
    pub cause: OutageCause,
}

impl OutageRecord {
    pub fn duration(&self) -> Millis {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaViolation {
    pub tenant: TenantId,
    pub start: SimTime,
    pub end: SimTime,
    pub impacted: u32,
}

impl SlaViolation {
    pub fn duration(&self) -> Millis {
        self.end - self.start
    }
}

/// VM outage intervals; an outage still open at the end of the log ends at its last record.
pub fn outage_records(log: &[LogRecord]) -> Vec<OutageRecord> {
    let mut open: BTreeMap<VmId, (TenantId, SimTime, OutageCause)> = BTreeMap::new();
    let mut out = Vec::new();
    let last = log.last().map(|r| r.t_ms).unwrap_or(0);
    for rec in log {
        match &rec.event {
            LogEvent::VmDown { vm, tenant, cause, .. } => {
                open.entry(vm.clone()).or_insert((tenant.clone(), rec.t_ms, *cause));
            }
            LogEvent::VmUp { vm, .. } | LogEvent::VmDeleted { vm, .. } => {
                if let Some((tenant, start, cause)) = open.remove(vm) {
                    out.push(OutageRecord {
                        vm: vm.clone(),
                        tenant,
                        start,
                        end: rec.t_ms,
                        cause,
                    });
                }
            }
            _ => {}
        }
    }
    for (vm, (tenant, start, cause)) in open {
        out.push(OutageRecord {
            vm,
            tenant,
            start,
            end: last,
            cause,
        });
    }
    out.sort_by(|a, b| (a.start, &a.vm).cmp(&(b.start, &b.vm)));
    out
}

/// Total outage per VM that went down at least once.
pub fn per_vm_outage(log: &[LogRecord]) -> BTreeMap<VmId, Millis> {
    let mut m = BTreeMap::new();
    for o in outage_records(log) {
        *m.entry(o.vm).or_insert(0) += o.duration();
    }
    m
}

/// Per-tenant state while sweeping the log.
#[derive(Default)]
struct TenantTrack {
    committed: u32,
    down: BTreeMap<VmId, GroupId>,
}

impl TenantTrack {
    fn app_down(&self) -> bool {
        if self.committed == 1 && self.down.len() == 1 {
            return true;
        }
        let mut per_group: BTreeMap<&GroupId, u32> = BTreeMap::new();
        for g in self.down.values() {
            *per_group.entry(g).or_default() += 1;
        }
        per_group.values().any(|&n| n >= 2)
    }
}

/// Replays the log and calls `sample(tenant, track, from, to)` for every
/// interval during which the tenant's state is constant.
fn sweep(log: &[LogRecord], initial: &ClusterState, mut sample: impl FnMut(&TenantId, &TenantTrack, SimTime, SimTime)) {
    let mut tracks: BTreeMap<TenantId, TenantTrack> = initial
        .tenants
        .keys()
        .map(|t| (t.clone(), TenantTrack::default()))
        .collect();
    for vm in initial.vms.values() {
        let t = tracks.entry(vm.tenant.clone()).or_default();
        t.committed += 1;
        if vm.host.is_none() {
            t.down.insert(vm.id.clone(), vm.group.clone());
        }
    }
    let mut at = initial.clock;
    for rec in log {
        if rec.t_ms > at {
            for (id, t) in &tracks {
                sample(id, t, at, rec.t_ms);
            }
            at = rec.t_ms;
        }
        match &rec.event {
            LogEvent::VmCreated { tenant, .. } => tracks.entry(tenant.clone()).or_default().committed += 1,
            LogEvent::VmDeleted { vm, tenant } => {
                let t = tracks.entry(tenant.clone()).or_default();
                t.committed = t.committed.saturating_sub(1);
                t.down.remove(vm);
            }
            LogEvent::VmDown { vm, tenant, group, .. } => {
                tracks.entry(tenant.clone()).or_default().down.insert(vm.clone(), group.clone());
            }
            LogEvent::VmUp { vm, tenant, .. } => {
                tracks.entry(tenant.clone()).or_default().down.remove(vm);
            }
            _ => {}
        }
    }
}

/// Time during which a tenant's application is out of service: two VMs of one
/// anti-affinity group down at once, or the only VM of a single-VM tenant down.
pub fn compute_application_outage(log: &[LogRecord], initial: &ClusterState) -> BTreeMap<TenantId, Millis> {
    let mut out: BTreeMap<TenantId, Millis> = initial.tenants.keys().map(|t| (t.clone(), 0)).collect();
    sweep(log, initial, |tenant, t, from, to| {
        if t.app_down() {
            *out.entry(tenant.clone()).or_default() += to - from;
        }
    });
    out
}

/// Maximal intervals with fewer live VMs than the tenant's committed count.
pub fn compute_sla_violations(log: &[LogRecord], initial: &ClusterState) -> Vec<SlaViolation> {
    let mut open: BTreeMap<TenantId, SlaViolation> = BTreeMap::new();
    let mut out = Vec::new();
    sweep(log, initial, |tenant, t, from, to| {
        let down = t.down.len() as u32;
        if down == 0 {
            if let Some(v) = open.remove(tenant) {
                out.push(v);
            }
            return;
        }
        let v = open.entry(tenant.clone()).or_insert(SlaViolation {
            tenant: tenant.clone(),
            start: from,
            end: to,
            impacted: down,
        });
        v.end = to;
        v.impacted = v.impacted.max(down);
    });
    out.extend(open.into_values());
    out.sort_by(|a, b| (a.start, &a.tenant).cmp(&(b.start, &b.tenant)));
    out
}

/// Penalty in milliseconds times VMs squared; divide by 1000 for units of q' seconds.
pub fn quadratic_penalty_ms(violations: &[SlaViolation]) -> u64 {
    violations
        .iter()
        .map(|v| v.duration() * (v.impacted as u64).pow(2))
        .sum()
}

/// `q' * sum(duration * impacted^2)`, durations in seconds.
pub fn quadratic_penalty(violations: &[SlaViolation], rate: f64) -> f64 {
    rate * quadratic_penalty_ms(violations) as f64 / 1000.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TenantPenalty {
    pub violations: u32,
    pub min_impacted: u32,
    pub max_impacted: u32,
    #[serde(with = "crate::types::serde_secs")]
    pub total_duration: Millis,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub tenants: BTreeMap<TenantId, TenantPenalty>,
    #[serde(with = "crate::types::serde_secs")]
    pub total_violation: Millis,
    pub penalty_ms: u64,
    /// Penalty in units of q'.
    pub penalty: f64,
}

impl PenaltyReport {
    pub fn from_violations(violations: &[SlaViolation]) -> Self {
        let mut tenants: BTreeMap<TenantId, TenantPenalty> = BTreeMap::new();
        for v in violations {
            let t = tenants.entry(v.tenant.clone()).or_default();
            t.min_impacted = if t.violations == 0 { v.impacted } else { t.min_impacted.min(v.impacted) };
            t.max_impacted = t.max_impacted.max(v.impacted);
            t.violations += 1;
            t.total_duration += v.duration();
        }
        let penalty_ms = quadratic_penalty_ms(violations);
        Self {
            tenants,
            total_violation: violations.iter().map(|v| v.duration()).sum(),
            penalty_ms,
            penalty: penalty_ms as f64 / 1000.0,
        }
    }
}

/// Measurements of one upgrade run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(with = "crate::types::serde_secs")]
    pub duration: Millis,
    pub violations: Vec<SlaViolation>,
    pub penalty: PenaltyReport,
    pub per_vm_outage: BTreeMap<VmId, Millis>,
    pub application_outage: BTreeMap<TenantId, Millis>,
}

impl RunMetrics {
    pub fn collect(log: &[LogRecord], initial: &ClusterState, duration: Millis) -> Self {
        let violations = compute_sla_violations(log, initial);
        Self {
            duration,
            penalty: PenaltyReport::from_violations(&violations),
            violations,
            per_vm_outage: per_vm_outage(log),
            application_outage: compute_application_outage(log, initial),
        }
    }
}

/// One row of the comparison table; values averaged over the runs of a method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub runs: usize,
    pub total_duration_s: f64,
    pub violations_min: u32,
    pub violations_max: u32,
    pub impacted_min: u32,
    pub impacted_max: u32,
    pub avg_violation_duration_s: f64,
    pub penalty_q: f64,
}

/// Rows of `(method, runs)`: per-tenant violation counts and impacted VMs as
/// min/max over tenants and runs, durations and penalties as run averages.
pub fn comparison_report(runs: &[(String, Vec<RunMetrics>)]) -> Vec<ComparisonRow> {
    runs.iter()
        .map(|(method, ms)| {
            let n = ms.len().max(1) as f64;
            let mut counts = BTreeSet::new();
            let mut impacted = BTreeSet::new();
            for m in ms {
                for t in m.penalty.tenants.values() {
                    counts.insert(t.violations);
                    impacted.insert(t.min_impacted);
                    impacted.insert(t.max_impacted);
                }
            }
            ComparisonRow {
                method: method.clone(),
                runs: ms.len(),
                total_duration_s: ms.iter().map(|m| m.duration as f64).sum::<f64>() / n / 1000.0,
                violations_min: counts.first().copied().unwrap_or(0),
                violations_max: counts.last().copied().unwrap_or(0),
                impacted_min: impacted.first().copied().unwrap_or(0),
                impacted_max: impacted.last().copied().unwrap_or(0),
                avg_violation_duration_s: ms.iter().map(|m| m.penalty.total_violation as f64).sum::<f64>() / n / 1000.0,
                penalty_q: ms.iter().map(|m| m.penalty.penalty_ms).sum::<u64>() as f64 / n / 1000.0,
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn violations_csv(violations: &[SlaViolation]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tenant", "start_s", "end_s", "duration_s", "impacted"])?;
    for v in violations {
        w.write_record([
            v.tenant.to_string(),
            secs(v.start),
            secs(v.end),
            secs(v.duration()),
            v.impacted.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn secs(ms: Millis) -> String {
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{TenantSla, Vm, VmGeneration};

    fn state(vms: &[(&str, &str, &str)]) -> ClusterState {
        let mut s = ClusterState::default();
        for (id, tenant, group) in vms {
            s.vms.insert(
                (*id).into(),
                Vm {
                    id: (*id).into(),
                    tenant: (*tenant).into(),
                    group: (*group).into(),
                    host: Some("h1".into()),
                    generation: VmGeneration::Old,
                },
            );
            s.tenants.entry((*tenant).into()).or_insert(TenantSla {
                id: (*tenant).into(),
                min: 1,
                max: 4,
                scaling_step: 1,
                cooldown: 120_000,
                groups: vec![(*group).into()],
                last_scaling_at: None,
            });
        }
        s
    }

    fn down(t: SimTime, vm: &str, tenant: &str, group: &str) -> LogRecord {
        LogRecord {
            t_ms: t,
            event: LogEvent::VmDown {
                vm: vm.into(),
                tenant: tenant.into(),
                group: group.into(),
                cause: OutageCause::Migration,
            },
        }
    }

    fn up(t: SimTime, vm: &str, tenant: &str) -> LogRecord {
        LogRecord {
            t_ms: t,
            event: LogEvent::VmUp {
                vm: vm.into(),
                tenant: tenant.into(),
                host: "h2".into(),
            },
        }
    }

    #[test]
    fn disjoint_downs_of_two_vms_are_no_outage() {
        let s = state(&[("a", "t", "g"), ("b", "t", "g")]);
        let log = vec![down(0, "a", "t", "g"), up(600, "a", "t"), down(1000, "b", "t", "g"), up(1600, "b", "t")];
        assert_eq!(compute_application_outage(&log, &s)[&TenantId::from("t")], 0);
    }

    #[test]
    fn single_vm_tenant_migrated_once() {
        let s = state(&[("a", "t", "g")]);
        let log = vec![down(22_400, "a", "t", "g"), up(23_000, "a", "t")];
        assert_eq!(compute_application_outage(&log, &s)[&TenantId::from("t")], 600);
    }

    #[test]
    fn overlap_of_one_group_counts() {
        let s = state(&[("a", "t", "g"), ("b", "t", "g")]);
        let log = vec![down(0, "a", "t", "g"), down(300, "b", "t", "g"), up(600, "a", "t"), up(900, "b", "t")];
        assert_eq!(compute_application_outage(&log, &s)[&TenantId::from("t")], 300);
    }

    #[test]
    fn violations_merge_overlaps() {
        let s = state(&[("a", "t", "g"), ("b", "t", "g")]);
        assert!(compute_sla_violations(&[], &s).is_empty());
        let one = vec![down(0, "a", "t", "g"), up(600, "a", "t")];
        let v = compute_sla_violations(&one, &s);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].duration(), v[0].impacted), (600, 1));
        let two = vec![down(0, "a", "t", "g"), down(300, "b", "t", "g"), up(600, "a", "t"), up(900, "b", "t")];
        let v = compute_sla_violations(&two, &s);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].duration(), v[0].impacted), (900, 2));
    }

    #[test]
    fn penalty_is_duration_times_impacted_squared() {
        let v = |d: Millis, k: u32| SlaViolation {
            tenant: "t".into(),
            start: 0,
            end: d,
            impacted: k,
        };
        assert_eq!(quadratic_penalty_ms(&[v(1350, 1)]), 1350);
        assert_eq!(quadratic_penalty_ms(&[v(1260, 1), v(430, 2)]), 2980);
        assert_eq!(quadratic_penalty(&[v(2250, 1)], 1.0), 2.25);
    }

    #[test]
    fn comparison_rows() {
        let m = RunMetrics::collect(&[], &state(&[("a", "t", "g")]), 1000);
        let rows = comparison_report(&[("coordinator".into(), vec![m])]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].penalty_q, 0.0);
        let csv = comparison_csv(&rows).unwrap();
        assert!(csv.starts_with("method,runs,"));
    }
}
