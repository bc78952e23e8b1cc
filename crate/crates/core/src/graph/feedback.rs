//! Execution feedback on the resource graph: level completion, retries,
//! isolation, and system-level undo of change sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CompletedLevel, ExecutionLevel, ResourceGraph, UpgradeMethod, UpgradeUnit};
use crate::catalog::{ComponentChange, ResolvedAction, ResourceUpgradeCatalog};
use crate::cluster::ClusterState;
use crate::coordinator::UpgradeIterationReport;
use crate::error::Result;
use crate::request::{check_completion_deadline, DeadlineStatus, UpgradeRequestModel};
use crate::types::{ProductId, ResourceId, SetId, SimTime, Status, UnitId, Version};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndoTrigger {
    UndoThreshold,
    DeadlineExceeded,
    AdminUndo,
}

impl ResourceGraph {
    /// Pops the first level of `r` after it executed successfully and applies its
    /// edge switches to the configuration.
    pub fn level_succeeded(&mut self, r: &ResourceId, config: &mut ClusterState) {
        let Some(v) = self.vertices.get_mut(r) else { return };
        if v.levels.is_empty() {
            return;
        }
        let level = v.levels.remove(0);
        if !level.is_undo {
            v.history.push(CompletedLevel {
                undo_unit: level.undo_unit.clone(),
                undo: level.undo.clone(),
                before: v.components.clone(),
            });
        }
        if let Some(res) = config.resources.get(r) {
            v.components = res.components.clone();
            v.active = res.active;
            v.exists = true;
        } else {
            v.exists = false;
        }
        v.derive_modification();
        if !level.is_undo {
            self.switch_edges(r, config);
        }
        if !self.vertices[r].exists && self.vertices[r].levels.is_empty() {
            self.vertices.remove(r);
            self.edges.retain(|e| !e.touches(r));
        }
    }

    /// Records a failed attempt of the first level of `r` after `completed` of its
    /// actions succeeded. Returns the resource-level undo (reverse undo of the
    /// completed prefix), or `None` when the failed level was itself an undo, in
    /// which case the resource is isolated and marked failed.
    pub fn level_failed(&mut self, r: &ResourceId, completed: usize) -> Option<Vec<ResolvedAction>> {
        let v = self.vertices.get_mut(r)?;
        let level = v.levels.first()?.clone();
        if level.is_undo {
            self.mark_failed(r);
            return None;
        }
        *v.failed_attempts.entry(level.undo_unit.clone()).or_insert(0) += 1;
        Some(
            level.actions[..completed.min(level.actions.len())]
                .iter()
                .rev()
                .flat_map(|a| a.undo.iter().cloned())
                .collect(),
        )
    }

    /// A resource whose recovery failed is out of service for good.
    pub fn mark_failed(&mut self, r: &ResourceId) {
        let Some(v) = self.vertices.get_mut(r) else { return };
        v.isolated = true;
        v.failed = true;
        let units: Vec<SetId> = v.undo_units.iter().cloned().collect();
        v.levels.retain(|l| !units.contains(&l.undo_unit));
        v.derive_modification();
        for u in units {
            if let Some(uu) = self.undo_units.get_mut(&u) {
                uu.failed.insert(r.clone());
                uu.isolated_only.remove(r);
            }
        }
    }

    /// Isolates resources that used up their retries.
    pub fn isolate_exhausted(&mut self) -> Vec<ResourceId> {
        let mut out = Vec::new();
        for v in self.vertices.values_mut() {
            if v.isolated {
                continue;
            }
            let exhausted: Vec<SetId> = v
                .failed_attempts
                .iter()
                .filter(|(s, n)| self.undo_units.get(*s).is_some_and(|u| **n >= u.max_retry))
                .map(|(s, _)| s.clone())
                .collect();
            if exhausted.is_empty() {
                continue;
            }
            v.isolated = true;
            v.levels.retain(|l| l.is_undo || !exhausted.contains(&l.undo_unit));
            v.derive_modification();
            for s in exhausted {
                if let Some(u) = self.undo_units.get_mut(&s) {
                    u.isolated_only.insert(v.id.clone());
                }
            }
            out.push(v.id.clone());
        }
        out
    }

    /// Step 1 feedback handling: isolation, undo triggers and re-derivation.
    /// Returns the sets that were undone in this call.
    pub fn apply_iteration_report(
        &mut self,
        report: &UpgradeIterationReport,
        model: &mut UpgradeRequestModel,
        config: &ClusterState,
        catalog: &ResourceUpgradeCatalog,
        now: SimTime,
    ) -> Result<Vec<(SetId, UndoTrigger)>> {
        for r in &report.failed_resources {
            if let Some(v) = self.vertices.get_mut(r) {
                v.derive_modification();
            }
        }
        self.isolate_exhausted();
        let mut undone = Vec::new();
        let open: Vec<SetId> = model.open_sets().map(|s| s.id.clone()).collect();
        for id in open {
            let set = model.set(&id)?;
            let trigger = if set.undo_requested {
                Some(UndoTrigger::AdminUndo)
            } else if check_completion_deadline(set, now) == DeadlineStatus::DeadlineExceeded {
                Some(UndoTrigger::DeadlineExceeded)
            } else if self.threshold_violated(&id, model) {
                Some(UndoTrigger::UndoThreshold)
            } else {
                None
            };
            if let Some(t) = trigger {
                self.undo_change_set(&id, config, catalog)?;
                model.advance(&id, Status::Failed)?;
                undone.push((id, t));
            }
        }
        Ok(undone)
    }

    /// True when fewer members than a change's undo-threshold can still succeed.
    pub fn threshold_violated(&self, set: &SetId, model: &UpgradeRequestModel) -> bool {
        let Ok(cs) = model.set(set) else { return false };
        let Some(u) = self.undo_units.get(set) else { return false };
        cs.changes.iter().any(|c| {
            let lost = c
                .targets
                .iter()
                .filter(|t| u.isolated_only.contains(*t) || u.failed.contains(*t))
                .count();
            c.targets.len() - lost < c.undo_threshold as usize
        })
    }

    /// System-level undo: every non-failed member that applied the set's level gets
    /// the undo operation as its new first level; pending levels of the set are
    /// dropped; isolated-only members still at the undo version are released.
    pub fn undo_change_set(&mut self, set: &SetId, config: &ClusterState, catalog: &ResourceUpgradeCatalog) -> Result<()> {
        let members: Vec<ResourceId> = self.undo_units.get(set).map(|u| u.members.iter().cloned().collect()).unwrap_or_default();
        let mut new_units = Vec::new();
        for r in members {
            let Some(v) = self.vertices.get_mut(&r) else { continue };
            if v.failed {
                continue;
            }
            v.levels.retain(|l| &l.undo_unit != set || l.is_undo);
            let done = v.history.iter().rposition(|h| &h.undo_unit == set);
            match done {
                Some(pos) => {
                    let h = v.history.remove(pos);
                    if !h.undo.is_empty() {
                        self.next_level += 1;
                        let unit = UnitId::new(format!("{set}/undo/{r}"));
                        v.levels.insert(
                            0,
                            ExecutionLevel {
                                index: self.next_level,
                                actions: h.undo,
                                unit: unit.clone(),
                                undo_unit: set.clone(),
                                changes: Vec::new(),
                                undo: Vec::new(),
                                is_undo: true,
                            },
                        );
                        new_units.push(UpgradeUnit {
                            id: unit,
                            members: [r.clone()].into_iter().collect(),
                            method: UpgradeMethod::Rolling,
                            undo_unit: set.clone(),
                            partitions: None,
                            switchover_done: false,
                            switch_actions: Vec::new(),
                        });
                    }
                }
                None => {
                    if v.isolated {
                        v.isolated = false;
                        v.failed_attempts.remove(set);
                        if let Some(u) = self.undo_units.get_mut(set) {
                            u.isolated_only.remove(&r);
                        }
                    }
                }
            }
            let start_components = config.resources.get(&r).map(|x| x.components.clone()).unwrap_or_default();
            rederive_levels(&mut v.levels, start_components, catalog)?;
            v.derive_modification();
            if !v.exists && v.levels.is_empty() {
                self.vertices.remove(&r);
                self.edges.retain(|e| !e.touches(&r));
            }
        }
        for u in new_units {
            self.units.insert(u.id.clone(), u);
        }
        for u in self.units.values_mut().filter(|u| &u.undo_unit == set) {
            u.switch_actions.clear();
        }
        Ok(())
    }

    /// Whether any work (levels or a pending switchover) of the set remains.
    pub fn set_pending(&self, set: &SetId) -> bool {
        self.vertices.values().any(|v| v.levels.iter().any(|l| &l.undo_unit == set))
            || self
                .units
                .values()
                .any(|u| &u.undo_unit == set && !u.switch_actions.is_empty() && !u.switchover_done)
    }

    /// Marks the isolated-only members of a completed set as failed.
    pub fn finalize_completed(&mut self, set: &SetId) -> Vec<ResourceId> {
        let isolated: Vec<ResourceId> = self
            .undo_units
            .get(set)
            .map(|u| u.isolated_only.iter().cloned().collect())
            .unwrap_or_default();
        for r in &isolated {
            if let Some(v) = self.vertices.get_mut(r) {
                v.failed = true;
            }
            if let Some(u) = self.undo_units.get_mut(set) {
                u.failed.insert(r.clone());
            }
        }
        if let Some(u) = self.undo_units.get_mut(set) {
            u.isolated_only.clear();
        }
        isolated
    }
}

/// Recomputes the actions of non-undo levels against the versions they will
/// actually start from.
fn rederive_levels(
    levels: &mut Vec<ExecutionLevel>,
    start: BTreeMap<ProductId, Version>,
    catalog: &ResourceUpgradeCatalog,
) -> Result<()> {
    let mut comps = start;
    let mut active = true;
    let mut drop = BTreeSet::new();
    for (i, level) in levels.iter_mut().enumerate() {
        if level.is_undo {
            let (c, a) = level.project(&comps, active);
            comps = c;
            active = a;
            continue;
        }
        let mut changes: Vec<ComponentChange> = Vec::new();
        for c in &level.changes {
            let from = comps.get(&c.product).cloned();
            if from == c.to {
                continue;
            }
            changes.push(ComponentChange {
                product: c.product.clone(),
                from,
                to: c.to.clone(),
                undo_to: c.undo_to.clone(),
            });
        }
        if changes.is_empty() {
            drop.insert(i);
            continue;
        }
        if changes != level.changes {
            let mut actions = Vec::new();
            let mut undos = Vec::new();
            for c in &changes {
                let op = catalog.lookup_upgrade_operation(c)?;
                actions.extend(op.actions);
                undos.push(op.undo);
            }
            level.actions = actions;
            level.undo = undos.into_iter().rev().flatten().collect();
            level.changes = changes;
        }
        let (c, a) = level.project(&comps, active);
        comps = c;
        active = a;
    }
    let mut i = 0;
    levels.retain(|_| {
        let keep = !drop.contains(&i);
        i += 1;
        keep
    });
    Ok(())
}
