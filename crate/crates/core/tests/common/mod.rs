//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

pub mod failure;

use std::collections::BTreeSet;

use iaas_upgrade::catalog::StorageRequirement;
use iaas_upgrade::cluster::TenantSla;
use iaas_upgrade::migration::compute_v_i;
use iaas_upgrade::planner::{compute_s_i, compute_scaling_reservation, compute_z_i, ppu_storage_check, PartitionView};
use iaas_upgrade::types::HostId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-host flags from which a view is assembled.
#[derive(Clone, Debug)]
pub struct HostFlags {
    pub new_side: bool,
    pub storage: bool,
    pub available: bool,
    pub used: bool,
}

pub fn random_hosts(rng: &mut ChaCha8Rng) -> Vec<HostFlags> {
    (0..rng.gen_range(0..=24))
        .map(|_| HostFlags {
            new_side: rng.gen_bool(0.4),
            storage: rng.gen_bool(0.3),
            available: rng.gen_bool(0.85),
            used: rng.gen_bool(0.5),
        })
        .collect()
}

pub fn view(hosts: &[HostFlags], k: u32, k_new: u32) -> PartitionView {
    let mut v = PartitionView {
        k,
        k_new,
        ..Default::default()
    };
    for (i, f) in hosts.iter().enumerate() {
        let id = HostId::from(format!("h{i:02}"));
        v.compute.insert(id.clone());
        if f.storage {
            v.storage.insert(id.clone());
        }
        if f.available {
            v.available.insert(id.clone());
        }
        if f.used {
            v.used_compute.insert(id.clone());
        }
        let (all, used) = if f.new_side {
            (&mut v.compute_for_new, &mut v.used_new)
        } else {
            (&mut v.compute_for_old, &mut v.used_old)
        };
        all.insert(id.clone());
        if f.used {
            used.insert(id);
        }
    }
    v
}

/// Number of scaling operations a tenant can start within `t` ms.
pub fn scaling_ops_oracle(t: u64, cooldown: u64) -> u64 {
    let mut n = 0;
    while n * cooldown < t {
        n += 1;
    }
    n
}

pub fn s_i_oracle(tenants: &[(u32, u64)], t: u64) -> u32 {
    let mut best = 0;
    for &(s, c) in tenants {
        best = best.max(s as u64 * scaling_ops_oracle(t, c));
    }
    best as u32
}

/// Hosts needed to hold `a` VMs at `k` per host.
pub fn hosts_for_oracle(a: u32, k: u32) -> u32 {
    let mut h = 0;
    while h * k < a {
        h += 1;
    }
    h
}

pub fn z_i_oracle(hosts: &[HostFlags], scaling: u32, failover: u32) -> u32 {
    let old: Vec<&HostFlags> = hosts.iter().filter(|f| !f.new_side).collect();
    if old.iter().all(|f| !f.used) {
        return old.len() as u32;
    }
    let mut free = old.iter().filter(|f| f.available && !f.used).count() as u32;
    for _ in 0..scaling + failover {
        if free == 0 {
            break;
        }
        free -= 1;
    }
    free
}

pub fn v_i_oracle(hosts: &[HostFlags], scaling: u32, failover: u32, k_new: u32) -> u32 {
    let mut free = hosts.iter().filter(|f| f.new_side && f.available && !f.used).count() as u32;
    for _ in 0..scaling + failover {
        free = free.saturating_sub(1);
    }
    let mut slots = 0;
    for _ in 0..free {
        slots += k_new;
    }
    slots
}

pub fn ppu_oracle(hosts: &[HostFlags], old: (u32, u32), new: (u32, u32)) -> bool {
    let free = hosts.iter().filter(|f| f.storage && !f.used).count() as u32;
    let need = |(a, b): (u32, u32)| if a > b { a } else { b };
    free >= need(old) + need(new)
}

fn tenant(i: usize, s: u32, c: u64) -> TenantSla {
    TenantSla {
        id: format!("t{i}").into(),
        min: 1,
        max: 10,
        scaling_step: s,
        cooldown: c,
        groups: vec![format!("t{i}-g").into()],
        last_scaling_at: None,
    }
}

/// Checks every budget formula against its oracle on `n` random inputs each.
/// Returns the number of checked inputs.
pub fn check_budget_formulas(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for _ in 0..n {
        let t = rng.gen_range(0..2_000_000u64);
        let raw: Vec<(u32, u64)> = (0..rng.gen_range(0..6)).map(|_| (rng.gen_range(1..=6), rng.gen_range(1_000..=600_000))).collect();
        let tenants: Vec<TenantSla> = raw.iter().enumerate().map(|(i, &(s, c))| tenant(i, s, c)).collect();
        let got = compute_s_i(&tenants, t);
        let want = s_i_oracle(&raw, t);
        if got != want {
            return Err(format!("S_i: {raw:?} t={t}: {got} != {want}"));
        }

        let (s, a, k) = (rng.gen_range(0..20), rng.gen_range(0..40), rng.gen_range(1..=8));
        let got = compute_scaling_reservation(s, a, k);
        let want = s * hosts_for_oracle(a, k);
        if got != want {
            return Err(format!("ScalingResv: s={s} a={a} k={k}: {got} != {want}"));
        }

        let hosts = random_hosts(&mut rng);
        let (k, k_new) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let v = view(&hosts, k, k_new);
        let (scaling, failover) = (rng.gen_range(0..8), rng.gen_range(0..3));
        let got = compute_z_i(&v, scaling, failover);
        let want = z_i_oracle(&hosts, scaling, failover);
        if got != want {
            return Err(format!("Z_i: {hosts:?} {scaling}/{failover}: {got} != {want}"));
        }
        let got = compute_v_i(&v, scaling, failover);
        let want = v_i_oracle(&hosts, scaling, failover, k_new);
        if got != want {
            return Err(format!("V_i: {hosts:?} {scaling}/{failover} k'={k_new}: {got} != {want}"));
        }

        let old = (rng.gen_range(0..6), rng.gen_range(0..6));
        let new = (rng.gen_range(0..6), rng.gen_range(0..6));
        let req = |(a, b)| StorageRequirement {
            min_hosts_for_configuration: a,
            min_hosts_for_capacity: b,
        };
        let got = ppu_storage_check(&v, req(old), req(new));
        if got != ppu_oracle(&hosts, old, new) {
            return Err(format!("PPU check: {hosts:?} {old:?} {new:?}: {got}"));
        }
        checked += 5;
    }
    Ok(checked)
}

pub fn ids<T: Clone + Ord>(xs: &[T]) -> BTreeSet<T> {
    xs.iter().cloned().collect()
}
