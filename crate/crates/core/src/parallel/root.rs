//! Root role: grants per-chain sample quotas, executes the phonebook's
//! reassignment decisions, tracks exact per-level accounting, and drives
//! finalization: collectors merge and report, the phonebook surrenders
//! its ledger summary, everyone shuts down.
//!
//! Quota accounting is conservative by construction: quotas are granted
//! from the per-level remainder, aborted chunks return their unproduced
//! remainder, and collectors stop at exactly the configured totals, so
//! the per-level sample files always hold exactly the requested counts.

use std::collections::HashMap;
use std::time::Duration;

use super::message::{
    CoarseMode, CollectorDirective, DecisionRecord, GroupAssignment, LoadInfo, Message, ProcessId,
    Reassignment, StatsReport,
};
use super::transport::Transport;

pub struct PlanGroup {
    pub controller: ProcessId,
    pub initial_level: usize,
}

pub struct PlanCollector {
    pub pid: ProcessId,
    pub level: usize,
    pub shard: usize,
}

pub struct RootPlan {
    pub levels: usize,
    pub samples: Vec<u64>,
    pub burn_in: Vec<u64>,
    /// Dynamic grant size per level; 0 means one even split up front.
    pub chunk: Vec<u64>,
    pub load_balancing: bool,
    pub coarse_mode: CoarseMode,
    pub groups: Vec<PlanGroup>,
    pub collectors: Vec<PlanCollector>,
    pub phonebook: ProcessId,
    /// Everyone except the root, for the shutdown broadcast.
    pub other_pids: Vec<ProcessId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GroupPhase {
    Busy,
    Idle,
    Dead,
}

struct GroupState {
    controller: ProcessId,
    level: usize,
    epoch: u64,
    chain: u64,
    chain_quota: u64,
    phase: GroupPhase,
}

/// Per-level model evaluation totals reported by controllers.
#[derive(Debug, Clone, Copy, Default)]
pub struct LevelEvalStats {
    pub evaluations: u64,
    pub total_seconds: f64,
}

pub struct RootOutcome {
    pub complete: bool,
    pub reports: Vec<Option<StatsReport>>,
    pub produced: Vec<u64>,
    pub eval_stats: Vec<LevelEvalStats>,
    pub ema_ms: Vec<f64>,
    pub decisions: Vec<DecisionRecord>,
}

struct Root {
    transport: Box<dyn Transport>,
    plan: RootPlan,
    remaining: Vec<u64>,
    produced: Vec<u64>,
    outstanding: Vec<u64>,
    groups: Vec<GroupState>,
    chain_counter: u64,
    collectors_done: HashMap<(usize, usize), u64>,
    eval_stats: Vec<LevelEvalStats>,
}

pub fn root_loop(transport: Box<dyn Transport>, plan: RootPlan) -> RootOutcome {
    let levels = plan.levels;
    let mut root = Root {
        remaining: plan.samples.clone(),
        produced: vec![0; levels],
        outstanding: vec![0; levels],
        groups: plan
            .groups
            .iter()
            .map(|g| GroupState {
                controller: g.controller,
                level: g.initial_level,
                epoch: 0,
                chain: 0,
                chain_quota: 0,
                phase: GroupPhase::Idle,
            })
            .collect(),
        chain_counter: 0,
        collectors_done: HashMap::new(),
        eval_stats: vec![LevelEvalStats::default(); levels],
        transport,
        plan,
    };
    root.start_collectors();
    root.initial_grants();
    root.push_remaining();

    let incomplete = loop {
        if root.all_collected() {
            break false;
        }
        if let Some(stuck) = root.stuck_level() {
            let _ = stuck;
            break true;
        }
        let env = match root.transport.recv_timeout(Duration::from_secs(120)) {
            Ok(Some(env)) => env,
            Ok(None) => break true,
            Err(_) => break true,
        };
        match env.message {
            Message::LoadReport(LoadInfo::ChunkComplete {
                group,
                level,
                chain,
                produced,
                returned,
                evaluations,
                mean_eval_ms,
                ..
            }) => {
                root.account(level, produced, returned, evaluations, mean_eval_ms);
                root.on_chunk_complete(group, level, chain);
            }
            Message::LoadReport(LoadInfo::GroupDead {
                group, level, produced, returned, reason, ..
            }) => {
                let _ = reason;
                if level < levels {
                    root.account(level, produced, returned, 0, 0.0);
                } else {
                    // Construction failed before the grant took effect.
                    let g = &root.groups[group];
                    let (lvl, quota) = (g.level, g.chain_quota);
                    root.remaining[lvl] += quota;
                    root.outstanding[lvl] -= quota;
                }
                root.groups[group].phase = GroupPhase::Dead;
                let message = Message::LoadReport(LoadInfo::GroupRetired { group });
                let phonebook = root.plan.phonebook;
                let _ = root.transport.send(phonebook, message);
                root.push_remaining();
            }
            Message::LoadReport(LoadInfo::CollectorDone { level, shard, collected }) => {
                root.collectors_done.insert((level, shard), collected);
            }
            Message::ReassignGroup(Reassignment::Decision { group, to_level, .. }) => {
                root.execute_decision(group, to_level);
            }
            _ => {}
        }
    };

    root.finalize(incomplete)
}

impl Root {
    fn next_chain(&mut self) -> u64 {
        self.chain_counter += 1;
        self.chain_counter
    }

    fn start_collectors(&mut self) {
        let shards = self
            .plan
            .collectors
            .iter()
            .fold(vec![0usize; self.plan.levels], |mut acc, c| {
                acc[c.level] += 1;
                acc
            });
        let merge_targets: HashMap<usize, ProcessId> = self
            .plan
            .collectors
            .iter()
            .filter(|c| c.shard == 0)
            .map(|c| (c.level, c.pid))
            .collect();
        for i in 0..self.plan.collectors.len() {
            let (pid, level, shard) = {
                let c = &self.plan.collectors[i];
                (c.pid, c.level, c.shard)
            };
            let n = self.plan.samples[level];
            let s = shards[level] as u64;
            let base = n / s;
            let extra = (shard as u64) < (n % s);
            let quota = base + extra as u64;
            let message = Message::CollectRequest(CollectorDirective::Begin {
                level,
                quota,
                shard,
                shards: shards[level],
                merge_target: merge_targets[&level],
            });
            let _ = self.transport.send(pid, message);
        }
    }

    fn initial_grants(&mut self) {
        // Even split per level over its initially assigned groups when no
        // chunk size is configured.
        let mut level_groups: Vec<Vec<usize>> = vec![Vec::new(); self.plan.levels];
        for (i, g) in self.plan.groups.iter().enumerate() {
            level_groups[g.initial_level].push(i);
        }
        for level in 0..self.plan.levels {
            let ids = level_groups[level].clone();
            if ids.is_empty() {
                continue;
            }
            let n = self.plan.samples[level];
            for (slot, &group) in ids.iter().enumerate() {
                let quota = if self.plan.chunk[level] > 0 {
                    self.plan.chunk[level].min(self.remaining[level])
                } else {
                    let g = ids.len() as u64;
                    let base = n / g;
                    base + ((slot as u64) < (n % g)) as u64
                };
                if quota == 0 {
                    self.set_idle(group);
                    continue;
                }
                self.grant_new_chain(group, level, quota);
            }
        }
    }

    fn grant_new_chain(&mut self, group: usize, level: usize, quota: u64) {
        let chain = self.next_chain();
        let state = &mut self.groups[group];
        state.level = level;
        state.epoch += 1;
        state.chain = chain;
        state.chain_quota = quota;
        state.phase = GroupPhase::Busy;
        self.remaining[level] -= quota;
        self.outstanding[level] += quota;
        let assignment = GroupAssignment {
            group,
            level,
            chain,
            epoch: state.epoch,
            quota,
            burn_in: self.plan.burn_in[level],
            coarse_mode: self.plan.coarse_mode,
        };
        let controller = state.controller;
        let message = if state.epoch == 1 {
            Message::AssignGroup(assignment)
        } else {
            Message::ReassignGroup(Reassignment::Directive(assignment))
        };
        let _ = self.transport.send(controller, message);
        self.push_group_status(group, true);
    }

    fn extend_chain(&mut self, group: usize, extra: u64) {
        let state = &mut self.groups[group];
        let level = state.level;
        state.chain_quota += extra;
        state.phase = GroupPhase::Busy;
        self.remaining[level] -= extra;
        self.outstanding[level] += extra;
        let assignment = GroupAssignment {
            group,
            level,
            chain: state.chain,
            epoch: state.epoch,
            quota: state.chain_quota,
            burn_in: self.plan.burn_in[level],
            coarse_mode: self.plan.coarse_mode,
        };
        let controller = state.controller;
        let _ = self.transport.send(controller, Message::AssignGroup(assignment));
        self.push_group_status(group, true);
    }

    fn set_idle(&mut self, group: usize) {
        self.groups[group].phase = GroupPhase::Idle;
        self.push_group_status(group, false);
    }

    fn account(&mut self, level: usize, produced: u64, returned: u64, evals: u64, mean_ms: f64) {
        self.produced[level] += produced;
        self.remaining[level] += returned;
        self.outstanding[level] -= produced + returned;
        self.eval_stats[level].evaluations += evals;
        self.eval_stats[level].total_seconds += mean_ms * evals as f64 / 1e3;
        self.push_remaining();
    }

    fn on_chunk_complete(&mut self, group: usize, level: usize, chain: u64) {
        let state = &self.groups[group];
        if state.phase == GroupPhase::Dead {
            return;
        }
        // Reports from an aborted chain arrive after the group moved on;
        // only the current chain drives new grants.
        if state.chain != chain || state.level != level {
            return;
        }
        let chunk = self.plan.chunk[level];
        if self.remaining[level] > 0 {
            let extra =
                if chunk > 0 { chunk.min(self.remaining[level]) } else { self.remaining[level] };
            self.extend_chain(group, extra);
        } else {
            self.set_idle(group);
        }
    }

    fn execute_decision(&mut self, group: usize, to_level: usize) {
        if !self.plan.load_balancing
            || to_level >= self.plan.levels
            || group >= self.groups.len()
        {
            return;
        }
        let state = &self.groups[group];
        if state.phase == GroupPhase::Dead || state.level == to_level {
            // Correct the phonebook's optimistic view.
            let level = state.level;
            let busy = state.phase == GroupPhase::Busy;
            self.push_group_status_at(group, level, busy);
            return;
        }
        if self.remaining[to_level] == 0 {
            let level = state.level;
            let busy = state.phase == GroupPhase::Busy;
            self.push_group_status_at(group, level, busy);
            return;
        }
        let quota = if self.plan.chunk[to_level] > 0 {
            self.plan.chunk[to_level].min(self.remaining[to_level])
        } else {
            self.remaining[to_level]
        };
        self.grant_new_chain(group, to_level, quota);
    }

    fn push_remaining(&mut self) {
        let message = Message::LoadReport(LoadInfo::Remaining { per_level: self.remaining.clone() });
        let phonebook = self.plan.phonebook;
        let _ = self.transport.send(phonebook, message);
    }

    fn push_group_status(&mut self, group: usize, busy: bool) {
        let level = self.groups[group].level;
        self.push_group_status_at(group, level, busy);
    }

    fn push_group_status_at(&mut self, group: usize, level: usize, busy: bool) {
        let message = Message::LoadReport(LoadInfo::GroupStatus { group, level, busy });
        let phonebook = self.plan.phonebook;
        let _ = self.transport.send(phonebook, message);
    }

    fn all_collected(&self) -> bool {
        let needed: usize = self
            .plan
            .collectors
            .iter()
            .map(|c| (c.level, c.shard))
            .collect::<std::collections::HashSet<_>>()
            .len();
        self.collectors_done.len() == needed
    }

    /// A level that still owes samples but can never get them: no group
    /// is working on it and none can be brought to it.
    fn stuck_level(&self) -> Option<usize> {
        for level in 0..self.plan.levels {
            let owed = self.plan.samples[level] - self.produced[level];
            if owed == 0 || self.outstanding[level] > 0 {
                continue;
            }
            let any_alive = self.groups.iter().any(|g| g.phase != GroupPhase::Dead);
            if !any_alive {
                return Some(level);
            }
            if !self.plan.load_balancing {
                let local_alive = self
                    .groups
                    .iter()
                    .any(|g| g.phase != GroupPhase::Dead && g.level == level);
                if !local_alive {
                    return Some(level);
                }
            }
        }
        None
    }

    fn finalize(mut self, incomplete: bool) -> RootOutcome {
        for c in &self.plan.collectors {
            let _ = self
                .transport
                .send(c.pid, Message::CollectRequest(CollectorDirective::Finalize));
        }
        let mut reports: Vec<Option<StatsReport>> = vec![None; self.plan.levels];
        let mut ema_ms = vec![0.0; self.plan.levels];
        let mut decisions = Vec::new();
        let deadline = std::time::Instant::now() + Duration::from_secs(60);
        while reports.iter().any(|r| r.is_none()) {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            match self.transport.recv_timeout(deadline - now) {
                Ok(Some(env)) => match env.message {
                    Message::CollectedStats(report) => {
                        let level = report.level;
                        if level < reports.len() {
                            reports[level] = Some(report);
                        }
                    }
                    _ => {}
                },
                _ => break,
            }
        }
        // The phonebook surrenders its ledger before the broadcast.
        let _ = self.transport.send(self.plan.phonebook, Message::Shutdown);
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            match self.transport.recv_timeout(deadline - now) {
                Ok(Some(env)) => match env.message {
                    Message::LoadReport(LoadInfo::LedgerSummary {
                        ema_ms_per_level,
                        decisions: d,
                    }) => {
                        for (slot, value) in ema_ms.iter_mut().zip(ema_ms_per_level) {
                            *slot = value;
                        }
                        decisions = d;
                        break;
                    }
                    _ => {}
                },
                _ => break,
            }
        }
        for &pid in &self.plan.other_pids {
            if pid != self.plan.phonebook {
                let _ = self.transport.send(pid, Message::Shutdown);
            }
        }
        let complete = !incomplete
            && reports
                .iter()
                .all(|r| r.as_ref().map(|s| s.complete).unwrap_or(false));
        RootOutcome {
            complete,
            reports,
            produced: self.produced,
            eval_stats: self.eval_stats,
            ema_ms,
            decisions,
        }
    }
}
