//! Fixed-batch rolling upgrade: hosts are upgraded in batches of a fixed size
//! regardless of the system state, each batch evacuated first.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterState;
use crate::engine::{LogEvent, LogRecord, OutageCause, Timing};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::types::{HostId, Millis, SimTime, VmId};

/// Which host orderings the baseline is averaged over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Every ordering for up to 8 hosts, otherwise 200 seeded samples.
    Auto,
    EnumerateAll,
    SampleN(usize),
    /// Hosts in id order.
    FixedOrder,
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "enumerate-all" => Ok(Self::EnumerateAll),
            "fixed-order" => Ok(Self::FixedOrder),
            _ => s
                .strip_prefix("sample-")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(Self::SampleN)
                .ok_or_else(|| Error::InvalidFlags(format!("unknown order policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingBaselineConfig {
    pub batch_size: usize,
    pub order_policy: OrderPolicy,
    pub seed: u64,
}

impl Default for RollingBaselineConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            order_policy: OrderPolicy::Auto,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingRun {
    pub ordering: Vec<HostId>,
    #[serde(with = "crate::types::serde_secs")]
    pub duration: Millis,
    pub migrations: u32,
    /// Batches whose VMs could not all be evacuated.
    pub infeasible_batches: Vec<usize>,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingBaselineResult {
    pub config: RollingBaselineConfig,
    pub runs: Vec<RollingRun>,
    pub metrics: Vec<RunMetrics>,
}

impl RollingBaselineResult {
    pub fn mean_duration_ms(&self) -> f64 {
        self.runs.iter().map(|r| r.duration as f64).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_migrations(&self) -> f64 {
        self.runs.iter().map(|r| r.migrations as f64).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_penalty(&self) -> f64 {
        self.metrics.iter().map(|m| m.penalty.penalty).sum::<f64>() / self.metrics.len().max(1) as f64
    }

    pub fn infeasible(&self) -> bool {
        self.runs.iter().any(|r| !r.infeasible_batches.is_empty())
    }
}

fn permutations(items: &[HostId]) -> Vec<Vec<HostId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// Orderings of the up compute hosts selected by the policy.
pub fn orderings(state: &ClusterState, policy: &OrderPolicy, seed: u64) -> Vec<Vec<HostId>> {
    let hosts: Vec<HostId> = state.compute_hosts().filter(|h| h.up).map(|h| h.id.clone()).collect();
    let sample = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut h = hosts.clone();
                h.shuffle(&mut rng);
                h
            })
            .collect()
    };
    match policy {
        OrderPolicy::FixedOrder => vec![hosts],
        OrderPolicy::EnumerateAll => permutations(&hosts),
        OrderPolicy::SampleN(n) => sample(*n),
        OrderPolicy::Auto if hosts.len() <= 8 => permutations(&hosts),
        OrderPolicy::Auto => sample(200),
    }
}

struct Rolling<'a> {
    state: ClusterState,
    timing: &'a Timing,
    log: Vec<LogRecord>,
    clock: SimTime,
    upgraded: BTreeSet<HostId>,
    migrations: u32,
}

impl Rolling<'_> {
    fn record(&mut self, t: SimTime, event: LogEvent) {
        self.log.push(LogRecord { t_ms: t, event });
    }

    /// Upgraded hosts with room first, then non-upgraded in-use hosts, then
    /// empty non-upgraded hosts; never a host of the current batch.
    fn destination(&self, vm: &VmId, batch: &BTreeSet<HostId>, inbound: &BTreeMap<VmId, HostId>) -> Option<HostId> {
        let v = &self.state.vms[vm];
        let mut best: Option<(u8, HostId)> = None;
        for h in self.state.compute_hosts().filter(|h| h.up && !batch.contains(&h.id)) {
            let arriving: Vec<&VmId> = inbound.iter().filter(|(_, d)| **d == h.id).map(|(v, _)| v).collect();
            let load = self.state.vm_count_on(&h.id) + arriving.len();
            if load as u32 >= self.state.host_capacity(&h.id) {
                continue;
            }
            let clash = self.state.vms_on(&h.id).any(|o| o.group == v.group)
                || arriving.iter().any(|a| self.state.vms[*a].group == v.group);
            if clash {
                continue;
            }
            let tier = if self.upgraded.contains(&h.id) {
                0
            } else if self.state.vm_count_on(&h.id) > 0 {
                1
            } else {
                2
            };
            if best.as_ref().is_none_or(|(t, _)| tier < *t) {
                best = Some((tier, h.id.clone()));
            }
        }
        best.map(|b| b.1)
    }

    /// One batch: a parallel evacuation wave, then a parallel upgrade wave.
    /// Returns whether every VM could be evacuated.
    fn batch(&mut self, index: usize, hosts: &[HostId]) -> bool {
        let batch: BTreeSet<HostId> = hosts.iter().cloned().collect();
        let mut inbound = BTreeMap::new();
        let mut stranded = Vec::new();
        for h in hosts {
            let vms: Vec<VmId> = self.state.vms_on(h).map(|v| v.id.clone()).collect();
            for vm in vms {
                match self.destination(&vm, &batch, &inbound) {
                    Some(d) => {
                        inbound.insert(vm, d);
                    }
                    None => stranded.push(vm),
                }
            }
        }
        let schedule = format!("rolling/batch{index}");
        if !inbound.is_empty() {
            let start = self.clock;
            let end = start + self.timing.migration;
            let blackout = end - self.timing.migration_outage.min(self.timing.migration);
            for vm in inbound.keys() {
                self.record(start, LogEvent::ActionStarted {
                    schedule: schedule.clone(),
                    resource: None,
                    vm: Some(vm.clone()),
                    action: "migrate".into(),
                });
            }
            for vm in inbound.keys() {
                let v = &self.state.vms[vm];
                let event = LogEvent::VmDown {
                    vm: vm.clone(),
                    tenant: v.tenant.clone(),
                    group: v.group.clone(),
                    cause: OutageCause::Migration,
                };
                self.record(blackout, event);
            }
            for (vm, to) in &inbound {
                let v = self.state.vms.get_mut(vm).expect("vm");
                v.host = Some(to.clone());
                let tenant = v.tenant.clone();
                self.record(end, LogEvent::VmUp {
                    vm: vm.clone(),
                    tenant,
                    host: to.clone(),
                });
                self.record(end, LogEvent::ActionFinished {
                    schedule: schedule.clone(),
                    resource: None,
                    vm: Some(vm.clone()),
                    action: "migrate".into(),
                    success: true,
                });
            }
            self.migrations += inbound.len() as u32;
            self.clock = end;
        }
        let start = self.clock;
        let end = start + self.timing.upgrade;
        for vm in &stranded {
            let v = &self.state.vms[vm];
            let event = LogEvent::VmDown {
                vm: vm.clone(),
                tenant: v.tenant.clone(),
                group: v.group.clone(),
                cause: OutageCause::VmUpgrade,
            };
            self.record(start, event);
        }
        for h in hosts {
            self.record(start, LogEvent::ActionStarted {
                schedule: schedule.clone(),
                resource: Some(h.as_str().into()),
                vm: None,
                action: "upgrade".into(),
            });
        }
        for h in hosts {
            self.record(end, LogEvent::ActionFinished {
                schedule: schedule.clone(),
                resource: Some(h.as_str().into()),
                vm: None,
                action: "upgrade".into(),
                success: true,
            });
            if let Some(host) = self.state.hosts.get_mut(h) {
                host.capacity = host.upgraded_capacity;
            }
            self.upgraded.insert(h.clone());
        }
        for vm in &stranded {
            let v = &self.state.vms[vm];
            let (tenant, host) = (v.tenant.clone(), v.host.clone().expect("stranded vms keep their host"));
            self.record(end, LogEvent::VmUp { vm: vm.clone(), tenant, host });
        }
        self.clock = end;
        stranded.is_empty()
    }
}

/// Runs the rolling upgrade along one host ordering.
pub fn rolling_run(state: &ClusterState, timing: &Timing, batch_size: usize, ordering: &[HostId]) -> Result<RollingRun> {
    if batch_size < 1 {
        return Err(Error::InvalidBatchSize);
    }
    let mut r = Rolling {
        state: state.clone(),
        timing,
        log: Vec::new(),
        clock: state.clock,
        upgraded: BTreeSet::new(),
        migrations: 0,
    };
    let mut infeasible = Vec::new();
    for (i, chunk) in ordering.chunks(batch_size).enumerate() {
        if !r.batch(i + 1, chunk) {
            infeasible.push(i + 1);
        }
    }
    Ok(RollingRun {
        ordering: ordering.to_vec(),
        duration: r.clock - state.clock,
        migrations: r.migrations,
        infeasible_batches: infeasible,
        log: r.log,
    })
}

/// Rolling upgrade of every compute host, averaged over the configured orderings.
pub fn run_rolling_baseline(state: &ClusterState, timing: &Timing, cfg: &RollingBaselineConfig) -> Result<RollingBaselineResult> {
    if cfg.batch_size < 1 {
        return Err(Error::InvalidBatchSize);
    }
    let mut runs = Vec::new();
    let mut metrics = Vec::new();
    for ordering in orderings(state, &cfg.order_policy, cfg.seed) {
        let run = rolling_run(state, timing, cfg.batch_size, &ordering)?;
        metrics.push(RunMetrics::collect(&run.log, state, run.duration));
        runs.push(run);
    }
    Ok(RollingBaselineResult {
        config: cfg.clone(),
        runs,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Host, TenantSla, Vm, VmGeneration};
    use crate::types::HostRole;

    fn cluster(hosts: usize, k: u32, vms_on: &[usize]) -> ClusterState {
        let mut s = ClusterState::default();
        for i in 0..hosts {
            let id: HostId = format!("h{i:02}").into();
            s.hosts.insert(
                id.clone(),
                Host {
                    id,
                    roles: [HostRole::Compute].into(),
                    capacity: k,
                    upgraded_capacity: k,
                    up: true,
                    dedicated: false,
                },
            );
        }
        for (n, &h) in vms_on.iter().enumerate() {
            let tenant = format!("t{n}");
            s.vms.insert(
                format!("vm{n}").into(),
                Vm {
                    id: format!("vm{n}").into(),
                    tenant: tenant.clone().into(),
                    group: format!("g{n}").into(),
                    host: Some(format!("h{h:02}").into()),
                    generation: VmGeneration::Old,
                },
            );
            s.tenants.insert(
                tenant.clone().into(),
                TenantSla {
                    id: tenant.clone().into(),
                    min: 1,
                    max: 2,
                    scaling_step: 1,
                    cooldown: 120_000,
                    groups: vec![format!("g{n}").into()],
                    last_scaling_at: None,
                },
            );
        }
        s
    }

    #[test]
    fn empty_hosts_batch_one() {
        let s = cluster(10, 4, &[]);
        let cfg = RollingBaselineConfig {
            order_policy: OrderPolicy::FixedOrder,
            ..Default::default()
        };
        let r = run_rolling_baseline(&s, &Timing::default(), &cfg).unwrap();
        assert_eq!(r.runs[0].duration, 410_000);
    }

    #[test]
    fn six_waves_over_ten_hosts() {
        let s = cluster(10, 6, &[0, 2, 4, 5, 7, 9]);
        let cfg = RollingBaselineConfig {
            order_policy: OrderPolicy::SampleN(50),
            seed: 7,
            ..Default::default()
        };
        let r = run_rolling_baseline(&s, &Timing::default(), &cfg).unwrap();
        assert!((r.mean_duration_ms() - 548_000.0).abs() < 10.0);
    }

    #[test]
    fn full_batch_without_spare_capacity_is_infeasible() {
        let s = cluster(10, 4, &[0, 1, 2]);
        let cfg = RollingBaselineConfig {
            batch_size: 10,
            order_policy: OrderPolicy::FixedOrder,
            seed: 0,
        };
        assert!(run_rolling_baseline(&s, &Timing::default(), &cfg).unwrap().infeasible());
    }

    #[test]
    fn batch_size_zero_is_rejected() {
        let cfg = RollingBaselineConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert_eq!(
            run_rolling_baseline(&cluster(2, 4, &[]), &Timing::default(), &cfg).unwrap_err(),
            Error::InvalidBatchSize
        );
    }

    #[test]
    fn order_policy_parses() {
        assert_eq!("sample-20".parse::<OrderPolicy>().unwrap(), OrderPolicy::SampleN(20));
        assert!("sample-0".parse::<OrderPolicy>().is_err());
        assert_eq!(orderings(&cluster(3, 4, &[]), &OrderPolicy::Auto, 0).len(), 6);
    }
}
