//! Repartition planning, subscale division and scheduling, and scaling
//! session bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DataflowGraph;
use crate::ids::{InstanceId, KeyGroupId, OperatorId, SubscaleId, Tick};
use crate::protocol::{ProtocolChoice, Subscale, SubscalePhase};

/// Owner slot of `kg` among `n` contiguous ranges over `num_keygroups`.
pub fn uniform_owner(kg: u32, n: u32, num_keygroups: u32) -> u32 {
    (u64::from(kg) * u64::from(n) / u64::from(num_keygroups)) as u32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleRequest {
    pub operator: OperatorId,
    pub new_parallelism: u32,
    pub protocol: ProtocolChoice,
    pub issued_at: Tick,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Migration {
    pub kg: KeyGroupId,
    pub source: InstanceId,
    pub target: InstanceId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub owner_before: Vec<InstanceId>,
    pub owner_after: Vec<InstanceId>,
    pub migrations: Vec<Migration>,
    pub subscales: Vec<Subscale>,
}

impl MigrationPlan {
    /// Plan from arbitrary current owners to a uniform split over `after`.
    pub fn rebalance(owner_before: Vec<InstanceId>, after: &[InstanceId]) -> Result<Self> {
        let k = owner_before.len() as u32;
        if after.is_empty() || after.len() as u32 > k {
            return Err(Error::InvalidPartitioning(format!(
                "cannot spread {k} key-groups over {} instances",
                after.len()
            )));
        }
        let n = after.len() as u32;
        let owner_after: Vec<_> = (0..k)
            .map(|kg| after[uniform_owner(kg, n, k) as usize])
            .collect();
        let migrations = owner_before
            .iter()
            .zip(&owner_after)
            .enumerate()
            .filter(|(_, (b, a))| b != a)
            .map(|(kg, (&source, &target))| Migration {
                kg: KeyGroupId(kg as u32),
                source,
                target,
            })
            .collect();
        Ok(MigrationPlan {
            owner_before,
            owner_after,
            migrations,
            subscales: Vec::new(),
        })
    }

    pub fn migrating_keygroups(&self) -> BTreeSet<KeyGroupId> {
        self.migrations.iter().map(|m| m.kg).collect()
    }

    /// New instances in `owner_after` that own nothing in `owner_before`.
    pub fn reassignments(&self) -> BTreeMap<KeyGroupId, InstanceId> {
        self.migrations.iter().map(|m| (m.kg, m.target)).collect()
    }
}

/// Uniform repartition from `n_old` to `n_new` instances. Instances are
/// identified by their slot `0..n`; old slots keep their identity.
pub fn plan_repartition(num_keygroups: u32, n_old: u32, n_new: u32) -> Result<MigrationPlan> {
    if n_old == 0 || n_new == 0 {
        return Err(Error::InvalidPartitioning(
            "parallelism must be positive".into(),
        ));
    }
    if n_old > num_keygroups || n_new > num_keygroups {
        return Err(Error::InvalidPartitioning(format!(
            "parallelism exceeds {num_keygroups} key-groups"
        )));
    }
    let before = (0..num_keygroups)
        .map(|kg| InstanceId(uniform_owner(kg, n_old, num_keygroups)))
        .collect();
    let after: Vec<_> = (0..n_new).map(InstanceId).collect();
    MigrationPlan::rebalance(before, &after)
}

/// Groups migrations by `(source, target)` and splits each group, in
/// ascending key-group order, into `⌈m / max_size⌉` near-equal parts.
pub fn divide_subscales(migrations: &[Migration], max_size: usize, first_id: u32) -> Vec<Subscale> {
    let max_size = max_size.max(1);
    let mut groups: BTreeMap<(InstanceId, InstanceId), Vec<KeyGroupId>> = BTreeMap::new();
    for m in migrations {
        groups.entry((m.source, m.target)).or_default().push(m.kg);
    }
    let mut out = Vec::new();
    let mut next = first_id;
    for ((source, target), mut kgs) in groups {
        kgs.sort();
        let m = kgs.len();
        let parts = m.div_ceil(max_size);
        let (base, extra) = (m / parts, m % parts);
        let mut rest = kgs.as_slice();
        for p in 0..parts {
            let size = base + usize::from(p < extra);
            let (head, tail) = rest.split_at(size);
            rest = tail;
            out.push(Subscale::new(
                SubscaleId(next),
                head.iter().copied().collect(),
                source,
                target,
            ));
            next += 1;
        }
    }
    out
}

/// Greedy choice: among subscales whose source and target are below `cap`
/// in-flight operations, the one whose target holds the fewest keys (ties
/// to the lowest id).
pub fn next_subscale<'a>(
    pending: &'a [Subscale],
    holdings: &BTreeMap<InstanceId, usize>,
    in_flight: &BTreeMap<InstanceId, usize>,
    cap: usize,
) -> Option<&'a Subscale> {
    let load = |i: InstanceId| in_flight.get(&i).copied().unwrap_or(0);
    pending
        .iter()
        .filter(|s| load(s.source) < cap && load(s.target) < cap)
        .min_by_key(|s| (holdings.get(&s.target).copied().unwrap_or(0), s.id))
}

/// What the coordinator does with an incoming request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScaleAction {
    Start,
    /// Same operator is already scaling: stop scheduling its pending
    /// subscales, drain in-flight ones, then start over from current owners.
    TerminateAndRestart {
        previous: usize,
    },
    /// The operator feeds or is fed by another scaling operator; new
    /// instances copy the live routing of their siblings.
    StartWithDeploymentSync {
        related: Vec<OperatorId>,
    },
    /// Parallelism unchanged.
    Noop,
}

pub fn handle_scale_request(
    graph: &DataflowGraph,
    operator: &str,
    new_parallelism: u32,
    active: &BTreeMap<OperatorId, usize>,
) -> Result<(OperatorId, ScaleAction)> {
    let op = graph.operator_by_name(operator)?;
    if !graph.operator(op).spec.kind.is_stateful() {
        return Err(Error::InvalidSpec(format!(
            "operator `{operator}` is not keyed"
        )));
    }
    if new_parallelism == 0 || new_parallelism > graph.num_keygroups {
        return Err(Error::InvalidPartitioning(format!(
            "parallelism {new_parallelism} out of range 1..={}",
            graph.num_keygroups
        )));
    }
    if let Some(&previous) = active.get(&op) {
        return Ok((op, ScaleAction::TerminateAndRestart { previous }));
    }
    let related: Vec<_> = active
        .keys()
        .copied()
        .filter(|&other| {
            graph
                .edges
                .iter()
                .any(|e| (e.from == op && e.to == other) || (e.from == other && e.to == op))
        })
        .collect();
    if !related.is_empty() {
        return Ok((op, ScaleAction::StartWithDeploymentSync { related }));
    }
    if graph.operator(op).instances.len() as u32 == new_parallelism {
        return Ok((op, ScaleAction::Noop));
    }
    Ok((op, ScaleAction::Start))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Completed,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscaleTimeline {
    pub id: SubscaleId,
    pub source: InstanceId,
    pub target: InstanceId,
    pub keygroups: Vec<u32>,
    pub injected_at: Option<Tick>,
    pub completed_at: Option<Tick>,
}

/// One scaling operation on one operator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingSession {
    pub id: usize,
    pub operator: OperatorId,
    pub protocol: ProtocolChoice,
    pub plan: MigrationPlan,
    pub status: SessionStatus,
    pub started_at: Tick,
    pub ended_at: Option<Tick>,
    pub timeline: Vec<SubscaleTimeline>,
    pub terminations: Vec<Tick>,
    /// Scaling request arrived while this session ran and replaced it.
    pub terminate_requested: bool,
}

impl ScalingSession {
    pub fn new(
        id: usize,
        operator: OperatorId,
        protocol: ProtocolChoice,
        plan: MigrationPlan,
        now: Tick,
    ) -> Self {
        let timeline = plan
            .subscales
            .iter()
            .map(|s| SubscaleTimeline {
                id: s.id,
                source: s.source,
                target: s.target,
                keygroups: s.keygroups.iter().map(|k| k.0).collect(),
                injected_at: None,
                completed_at: None,
            })
            .collect();
        ScalingSession {
            id,
            operator,
            protocol,
            plan,
            status: SessionStatus::Running,
            started_at: now,
            ended_at: None,
            timeline,
            terminations: Vec::new(),
            terminate_requested: false,
        }
    }

    pub fn subscale(&self, id: SubscaleId) -> Option<&Subscale> {
        self.plan.subscales.iter().find(|s| s.id == id)
    }

    pub fn subscale_mut(&mut self, id: SubscaleId) -> Option<&mut Subscale> {
        self.plan.subscales.iter_mut().find(|s| s.id == id)
    }

    pub fn pending(&self) -> Vec<Subscale> {
        self.plan
            .subscales
            .iter()
            .filter(|s| s.phase == SubscalePhase::Pending)
            .cloned()
            .collect()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Subscale> {
        self.plan
            .subscales
            .iter()
            .filter(|s| matches!(s.phase, SubscalePhase::Triggered | SubscalePhase::Migrating))
    }

    pub fn mark(&mut self, id: SubscaleId, phase: SubscalePhase, now: Tick) {
        if let Some(s) = self.subscale_mut(id) {
            s.phase = phase;
        }
        if let Some(t) = self.timeline.iter_mut().find(|t| t.id == id) {
            match phase {
                SubscalePhase::Triggered => {
                    t.injected_at.get_or_insert(now);
                }
                SubscalePhase::Completed => t.completed_at = Some(now),
                _ => {}
            }
        }
    }

    /// Whether every subscale that was started has completed.
    pub fn is_drained(&self) -> bool {
        self.in_flight().next().is_none()
    }

    pub fn is_complete(&self) -> bool {
        self.plan
            .subscales
            .iter()
            .all(|s| s.phase == SubscalePhase::Completed)
    }

    /// Marks the session finished. Errors unless every subscale completed
    /// or the session was terminated with nothing left in flight.
    pub fn finalize(&mut self, now: Tick) -> Result<()> {
        if self.terminate_requested {
            if !self.is_drained() {
                return Err(Error::SessionIncomplete);
            }
            self.status = SessionStatus::Terminated;
            self.terminations.push(now);
        } else {
            if !self.is_complete() {
                return Err(Error::SessionIncomplete);
            }
            self.status = SessionStatus::Completed;
        }
        self.ended_at = Some(now);
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "session": self.id,
            "operator": self.operator.0,
            "protocol": self.protocol.name(),
            "status": self.status,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "plan": {
                "owner_before": self.plan.owner_before,
                "owner_after": self.plan.owner_after,
                "migrations": self.plan.migrations.len(),
            },
            "subscales": self.timeline,
            "terminations": self.terminations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_plan_counts_match_brute_force() {
        for (k, a, b) in [(128, 8, 12), (256, 25, 30), (32, 2, 3), (128, 8, 8)] {
            let brute = (0..k)
                .filter(|&kg| (kg as u64 * a / k as u64) != (kg as u64 * b / k as u64))
                .count();
            let plan = plan_repartition(k, a as u32, b as u32).unwrap();
            assert_eq!(plan.migrations.len(), brute);
        }
        assert_eq!(plan_repartition(128, 8, 12).unwrap().migrations.len(), 111);
        assert_eq!(plan_repartition(256, 25, 30).unwrap().migrations.len(), 229);
        assert!(plan_repartition(128, 8, 8).unwrap().migrations.is_empty());
    }

    #[test]
    fn too_many_instances_is_rejected() {
        assert!(matches!(
            plan_repartition(4, 2, 5),
            Err(Error::InvalidPartitioning(_))
        ));
    }

    #[test]
    fn uniform_split_is_balanced() {
        for k in [7u32, 32, 128] {
            for n in 1..=k.min(20) {
                let mut counts = vec![0; n as usize];
                for kg in 0..k {
                    counts[uniform_owner(kg, n, k) as usize] += 1;
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "k={k} n={n} {counts:?}");
            }
        }
    }

    fn group(n: u32, source: u32, target: u32) -> Vec<Migration> {
        (0..n)
            .map(|kg| Migration {
                kg: KeyGroupId(kg * 3),
                source: InstanceId(source),
                target: InstanceId(target),
            })
            .collect()
    }

    #[test]
    fn eleven_keygroups_split_four_four_three() {
        let subs = divide_subscales(&group(11, 0, 1), 4, 0);
        let sizes: Vec<_> = subs.iter().map(|s| s.keygroups.len()).collect();
        assert_eq!(sizes, vec![4, 4, 3]);
        let all: Vec<_> = subs
            .iter()
            .flat_map(|s| s.keygroups.iter().copied())
            .collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pairs_are_never_mixed() {
        let mut m = group(3, 0, 2);
        m.extend(group(2, 1, 2).into_iter().map(|mut x| {
            x.kg.0 += 1;
            x
        }));
        let subs = divide_subscales(&m, 10, 5);
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].id, SubscaleId(5));
        for s in &subs {
            assert!(m
                .iter()
                .filter(|x| s.keygroups.contains(&x.kg))
                .all(|x| x.source == s.source && x.target == s.target));
        }
    }

    #[test]
    fn greedy_prefers_emptier_target_and_respects_cap() {
        let subs = vec![
            Subscale::new(
                SubscaleId(0),
                [KeyGroupId(0)].into(),
                InstanceId(0),
                InstanceId(2),
            ),
            Subscale::new(
                SubscaleId(1),
                [KeyGroupId(1)].into(),
                InstanceId(0),
                InstanceId(1),
            ),
        ];
        let holdings = BTreeMap::from([(InstanceId(1), 0), (InstanceId(2), 11)]);
        let none = BTreeMap::new();
        assert_eq!(
            next_subscale(&subs, &holdings, &none, 2).unwrap().id,
            SubscaleId(1)
        );
        let busy = BTreeMap::from([(InstanceId(1), 2)]);
        assert_eq!(
            next_subscale(&subs, &holdings, &busy, 2).unwrap().id,
            SubscaleId(0)
        );
        assert!(next_subscale(&[], &holdings, &none, 2).is_none());
    }

    #[test]
    fn session_finalize_requires_completion() {
        let mut plan = plan_repartition(8, 1, 2).unwrap();
        plan.subscales = divide_subscales(&plan.migrations, 4, 0);
        let mut s = ScalingSession::new(0, OperatorId(1), ProtocolChoice::Drrs, plan, 0);
        assert_eq!(s.finalize(5), Err(Error::SessionIncomplete));
        s.mark(SubscaleId(0), SubscalePhase::Triggered, 1);
        s.mark(SubscaleId(0), SubscalePhase::Completed, 4);
        s.finalize(5).unwrap();
        assert_eq!(s.status, SessionStatus::Completed);
        assert_eq!(s.timeline[0].injected_at, Some(1));
    }
}
