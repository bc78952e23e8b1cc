//! Simulated cloud configuration: hosts, infrastructure resources, VMs, tenants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{
    DependencyKind, GroupId, HostId, HostRole, Millis, ProductId, ResourceId, ResourceKind,
    SimTime, TenantId, Version, VmId,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub id: HostId,
    pub roles: BTreeSet<HostRole>,
    /// K: VMs this host can run.
    pub capacity: u32,
    /// K': capacity once the host's hypervisor has been upgraded.
    pub upgraded_capacity: u32,
    pub up: bool,
    /// Hosts dedicated to upgrades are not counted in the system capacity.
    #[serde(default)]
    pub dedicated: bool,
}

impl Host {
    pub fn is_compute(&self) -> bool {
        self.roles.contains(&HostRole::Compute)
    }

    pub fn is_storage(&self) -> bool {
        self.roles.contains(&HostRole::Storage)
    }

    pub fn kind(&self) -> ResourceKind {
        if self.is_compute() {
            ResourceKind::ComputeHost
        } else if self.is_storage() {
            ResourceKind::StorageHost
        } else if self.roles.contains(&HostRole::Network) {
            ResourceKind::NetworkHost
        } else {
            ResourceKind::ControllerHost
        }
    }
}

/// Any non-VM resource of the configuration, including the hosts themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfraResource {
    pub id: ResourceId,
    pub kind: ResourceKind,
    /// Host this resource is contained in (hypervisors, disks).
    #[serde(default)]
    pub host: Option<HostId>,
    pub components: BTreeMap<ProductId, Version>,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigDependency {
    /// Dependent resource.
    pub from: ResourceId,
    /// Sponsor resource.
    pub to: ResourceId,
    pub kind: DependencyKind,
    #[serde(default)]
    pub min_sponsors: Option<u32>,
}

/// Which side of a partitioned compute cluster a VM is compatible with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmGeneration {
    Old,
    New,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vm {
    pub id: VmId,
    pub tenant: TenantId,
    pub group: GroupId,
    /// `None` while the VM is inside an outage interval.
    pub host: Option<HostId>,
    pub generation: VmGeneration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantSla {
    pub id: TenantId,
    pub min: u32,
    pub max: u32,
    /// s_n: VMs per scaling operation.
    pub scaling_step: u32,
    /// c_n: minimum time between two scaling operations.
    #[serde(with = "crate::types::serde_secs")]
    pub cooldown: Millis,
    pub groups: Vec<GroupId>,
    #[serde(default)]
    pub last_scaling_at: Option<SimTime>,
}

/// Old/new membership of compute hosts while an incompatible upgrade is in progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partitioning {
    pub new_side: BTreeSet<HostId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub hosts: BTreeMap<HostId, Host>,
    pub resources: BTreeMap<ResourceId, InfraResource>,
    pub dependencies: Vec<ConfigDependency>,
    pub vms: BTreeMap<VmId, Vm>,
    pub tenants: BTreeMap<TenantId, TenantSla>,
    #[serde(default)]
    pub partitioning: Option<Partitioning>,
    /// Resources excluded from service after exhausting their retries.
    #[serde(default)]
    pub isolated: BTreeSet<ResourceId>,
    #[serde(default)]
    pub clock: SimTime,
    #[serde(default)]
    pub next_vm_seq: u64,
    /// Destination slots held by in-flight migrations.
    #[serde(default)]
    pub inbound: BTreeMap<VmId, HostId>,
}

impl ClusterState {
    /// N_i: tenants served right now.
    pub fn tenant_count(&self) -> usize {
        self.tenants.len()
    }

    pub fn vms_on(&self, host: &HostId) -> impl Iterator<Item = &Vm> + '_ {
        let host = host.clone();
        self.vms
            .values()
            .filter(move |vm| vm.host.as_ref() == Some(&host))
    }

    pub fn vm_count_on(&self, host: &HostId) -> usize {
        self.vms_on(host).count()
    }

    pub fn tenant_vms(&self, tenant: &TenantId) -> impl Iterator<Item = &Vm> + '_ {
        let tenant = tenant.clone();
        self.vms.values().filter(move |vm| vm.tenant == tenant)
    }

    pub fn tenant_vm_count(&self, tenant: &TenantId) -> u32 {
        self.tenant_vms(tenant).count() as u32
    }

    pub fn host_capacity(&self, host: &HostId) -> u32 {
        self.hosts.get(host).map_or(0, |h| h.capacity)
    }

    /// A compute host can run VMs when it is up, not isolated, and it and every
    /// resource it contains are active.
    pub fn host_available(&self, host: &HostId) -> bool {
        let Some(h) = self.hosts.get(host) else {
            return false;
        };
        if !h.up || !h.is_compute() || self.isolated.contains(host) {
            return false;
        }
        if let Some(r) = self.resources.get(host) {
            if !r.active {
                return false;
            }
        }
        self.resources
            .values()
            .filter(|r| r.host.as_ref() == Some(host))
            .all(|r| r.active && !self.isolated.contains(&r.id))
    }

    pub fn compute_hosts(&self) -> impl Iterator<Item = &Host> + '_ {
        self.hosts.values().filter(|h| h.is_compute())
    }

    pub fn is_new_side(&self, host: &HostId) -> bool {
        self.partitioning
            .as_ref()
            .is_some_and(|p| p.new_side.contains(host))
    }

    /// Whether a VM of the given generation may run on `host` under the current partitioning.
    pub fn compatible(&self, generation: VmGeneration, host: &HostId) -> bool {
        match &self.partitioning {
            None => true,
            Some(p) => (generation == VmGeneration::New) == p.new_side.contains(host),
        }
    }

    /// Whether placing a VM of `group` on `host` keeps the anti-affinity constraint.
    pub fn group_free_on(&self, group: &GroupId, host: &HostId, ignore: Option<&VmId>) -> bool {
        let placed = self
            .vms_on(host)
            .any(|vm| &vm.group == group && Some(&vm.id) != ignore);
        let incoming = self.inbound.iter().any(|(id, h)| {
            h == host && Some(id) != ignore && self.vms.get(id).is_some_and(|vm| &vm.group == group)
        });
        !placed && !incoming
    }

    /// VMs on the host plus migrations headed to it.
    pub fn load(&self, host: &HostId) -> usize {
        self.vm_count_on(host) + self.inbound.values().filter(|h| *h == host).count()
    }

    pub fn has_room(&self, host: &HostId) -> bool {
        (self.load(host) as u32) < self.host_capacity(host)
    }

    /// Deterministic placement for a VM: compatible available hosts with room that keep
    /// anti-affinity, preferring non-storage hosts, then fuller hosts, then lower ids.
    pub fn find_placement(
        &self,
        generation: VmGeneration,
        group: &GroupId,
        exclude: &BTreeSet<HostId>,
    ) -> Option<HostId> {
        self.compute_hosts()
            .filter(|h| !exclude.contains(&h.id))
            .filter(|h| self.host_available(&h.id))
            .filter(|h| self.compatible(generation, &h.id))
            .filter(|h| self.has_room(&h.id))
            .filter(|h| self.group_free_on(group, &h.id, None))
            .min_by_key(|h| {
                (
                    h.is_storage(),
                    std::cmp::Reverse(self.load(&h.id)),
                    h.id.clone(),
                )
            })
            .map(|h| h.id.clone())
    }

    pub fn fresh_vm_id(&mut self, tenant: &TenantId) -> VmId {
        self.next_vm_seq += 1;
        VmId::new(format!("{}-vm{}", tenant, self.next_vm_seq))
    }

    /// Provided dependents of `id` along edges of `kind`.
    pub fn dependents_of<'a>(
        &'a self,
        id: &'a ResourceId,
        kind: DependencyKind,
    ) -> impl Iterator<Item = &'a ResourceId> + 'a {
        self.dependencies
            .iter()
            .filter(move |d| &d.to == id && d.kind == kind)
            .map(|d| &d.from)
    }

    pub fn sponsors_of<'a>(
        &'a self,
        id: &'a ResourceId,
        kind: DependencyKind,
    ) -> impl Iterator<Item = &'a ResourceId> + 'a {
        self.dependencies
            .iter()
            .filter(move |d| &d.from == id && d.kind == kind)
            .map(|d| &d.to)
    }

    /// Checks anti-affinity and capacity; returns the first violation found.
    pub fn placement_violation(&self) -> Option<String> {
        for host in self.hosts.values() {
            let vms: Vec<&Vm> = self.vms_on(&host.id).collect();
            if vms.len() as u32 > host.capacity {
                return Some(format!("host {} over capacity", host.id));
            }
            let mut groups = BTreeSet::new();
            for vm in vms {
                if !groups.insert(&vm.group) {
                    return Some(format!("group {} twice on host {}", vm.group, host.id));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host(id: &str, cap: u32, roles: &[HostRole]) -> Host {
        Host {
            id: id.into(),
            roles: roles.iter().copied().collect(),
            capacity: cap,
            upgraded_capacity: cap,
            up: true,
            dedicated: false,
        }
    }

    fn vm(id: &str, tenant: &str, host: &str) -> Vm {
        Vm {
            id: id.into(),
            tenant: tenant.into(),
            group: tenant.into(),
            host: Some(host.into()),
            generation: VmGeneration::Old,
        }
    }

    #[test]
    fn placement_prefers_fuller_compute_only_hosts() {
        let mut s = ClusterState::default();
        for (id, roles) in [
            ("h1", &[HostRole::Compute, HostRole::Storage][..]),
            ("h2", &[HostRole::Compute][..]),
            ("h3", &[HostRole::Compute][..]),
        ] {
            s.hosts.insert(id.into(), host(id, 2, roles));
        }
        s.vms.insert("a".into(), vm("a", "t1", "h3"));
        let got = s.find_placement(VmGeneration::Old, &"t2".into(), &BTreeSet::new());
        assert_eq!(got, Some("h3".into()));
        // anti-affinity pushes t1 away from h3
        let got = s.find_placement(VmGeneration::Old, &"t1".into(), &BTreeSet::new());
        assert_eq!(got, Some("h2".into()));
    }

    #[test]
    fn partitioning_restricts_generations() {
        let mut s = ClusterState::default();
        s.hosts
            .insert("h1".into(), host("h1", 2, &[HostRole::Compute]));
        s.hosts
            .insert("h2".into(), host("h2", 2, &[HostRole::Compute]));
        s.partitioning = Some(Partitioning {
            new_side: ["h2".into()].into_iter().collect(),
        });
        assert!(s.compatible(VmGeneration::Old, &"h1".into()));
        assert!(!s.compatible(VmGeneration::Old, &"h2".into()));
        assert!(s.compatible(VmGeneration::New, &"h2".into()));
    }

    #[test]
    fn inactive_hypervisor_makes_host_unavailable() {
        let mut s = ClusterState::default();
        s.hosts
            .insert("h1".into(), host("h1", 2, &[HostRole::Compute]));
        s.resources.insert(
            "hv1".into(),
            InfraResource {
                id: "hv1".into(),
                kind: ResourceKind::Hypervisor,
                host: Some("h1".into()),
                components: BTreeMap::new(),
                active: false,
            },
        );
        assert!(!s.host_available(&"h1".into()));
    }
}
