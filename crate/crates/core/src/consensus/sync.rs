// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Plan computation for the leader-change (synchronization) step.
//!
//! After a new regency is installed every replica broadcasts a STOPDATA
//! report. The new leader picks a set of reports whose weight meets the
//! quorum threshold and derives the instances that must be (re)decided
//! before fresh proposals resume:
//!
//! * every instance between the lowest and highest reported decision is
//!   re-run with the batch some reporter already decided for it;
//! * the instance right after the highest decision is re-run with the
//!   highest-regency locked batch among the most advanced reporters, if any.
//!
//! Followers recompute the plan from the same reports and reject a SYNC
//! whose entries differ. Any decided batch has an ACCEPT quorum behind it,
//! which intersects every report quorum in a correct replica, so a decided
//! value always shows up either as a decision or as the highest lock.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::ClusterConfig;
use super::message::{Batch, StopData};
use crate::crypto::NodeId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanError {
    NotEnoughWeight,
    /// No report carries the decided batch of this instance.
    MissingDecision(u64),
}

pub type PlanEntries = Vec<(u64, Arc<Batch>)>;

pub fn compute_plan(reports: &BTreeMap<NodeId, StopData>, cfg: &ClusterConfig) -> Result<PlanEntries, PlanError> {
    let weight = cfg.weight_of(reports.keys()).map_err(|_| PlanError::NotEnoughWeight)?;
    if weight < cfg.threshold() || reports.is_empty() {
        return Err(PlanError::NotEnoughWeight);
    }
    let lo = reports.values().map(|r| r.last_decided).min().unwrap_or(0) + 1;
    let hi = reports.values().map(|r| r.last_decided).max().unwrap_or(0);

    let mut entries = Vec::new();
    for inst in lo..=hi {
        // Lowest reporter id wins for determinism.
        let batch = reports
            .values()
            .find_map(|r| r.decided_tail.iter().find(|(i, _)| *i == inst).map(|(_, b)| b.clone()))
            .ok_or(PlanError::MissingDecision(inst))?;
        entries.push((inst, batch));
    }

    let lock = reports
        .values()
        .filter(|r| r.last_decided == hi)
        .filter_map(|r| r.lock.as_ref())
        .fold(None::<&(u64, Arc<Batch>)>, |best, cand| match best {
            Some(b) if b.0 >= cand.0 => Some(b),
            _ => Some(cand),
        });
    if let Some((_, batch)) = lock {
        entries.push((hi + 1, batch.clone()));
    }
    Ok(entries)
}

/// The leader's choice of report set: all reports, or, when some decided
/// batch is missing, the reports left after dropping the least advanced
/// reporters one at a time while the set still forms a quorum.
pub fn choose_reports(reports: &BTreeMap<NodeId, StopData>, cfg: &ClusterConfig) -> Option<(Vec<NodeId>, PlanEntries)> {
    let mut set = reports.clone();
    loop {
        match compute_plan(&set, cfg) {
            Ok(plan) => return Some((set.keys().copied().collect(), plan)),
            Err(PlanError::NotEnoughWeight) => return None,
            Err(PlanError::MissingDecision(_)) => {
                let laggard = set
                    .iter()
                    .min_by_key(|(id, r)| (r.last_decided, std::cmp::Reverse(**id)))
                    .map(|(id, _)| *id)?;
                set.remove(&laggard);
            }
        }
    }
}
