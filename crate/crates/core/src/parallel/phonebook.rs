//! The phonebook: directory of sample producers and consumers, seat of
//! load inference, and the dynamic load balancer.
//!
//! Chains announce produced samples; collectors and finer chains request
//! them. Unmatched requests queue here and double as the overload signal,
//! with chain-origin requests weighted above collector-origin ones since
//! a waiting chain means idle workers. Samples announced but not picked
//! up signal underload. Per-level model runtimes are inferred from the
//! spacing of announcements, and a group is never reassigned again before
//! one inferred runtime of the levels involved has elapsed.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use super::message::{
    DecisionRecord, LoadInfo, Message, ProcessId, RequesterKind, SamplePayloadBody, SamplePurpose,
};

#[derive(Debug, Clone)]
pub struct BalanceSettings {
    pub enabled: bool,
    /// Weighted-request hysteresis threshold H.
    pub hysteresis: f64,
    /// Smoothing factor of the runtime estimate.
    pub ema_alpha: f64,
    /// Rebalance cadence.
    pub tick: Duration,
    /// Lower bound on the per-group reassignment gap.
    pub throttle_floor: Duration,
}

impl Default for BalanceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            hysteresis: 4.0,
            ema_alpha: 0.3,
            tick: Duration::from_millis(25),
            throttle_floor: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingRequest {
    requester: ProcessId,
    request: u64,
}

#[derive(Debug, Clone, Copy)]
struct ReadyEntry {
    provider: ProcessId,
}

#[derive(Debug, Default)]
struct LevelLoad {
    queued_chain: VecDeque<PendingRequest>,
    queued_collector: VecDeque<PendingRequest>,
    ready_proposal: VecDeque<ReadyEntry>,
    ready_collection: VecDeque<ReadyEntry>,
    ema_ms: Option<f64>,
    last_ready: HashMap<u64, Instant>,
    first_busy: Option<Instant>,
}

#[derive(Debug, Clone, Copy)]
struct GroupEntry {
    level: usize,
    busy: bool,
    alive: bool,
    last_move: Instant,
}

/// Everything the phonebook knows about the system's load.
pub struct LoadLedger {
    started: Instant,
    levels: Vec<LevelLoad>,
    groups: HashMap<usize, GroupEntry>,
    remaining: Vec<u64>,
    decisions: Vec<DecisionRecord>,
}

/// A reassignment the balancer wants executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReassignDecision {
    pub group: usize,
    pub from_level: usize,
    pub to_level: usize,
}

impl LoadLedger {
    pub fn new(levels: usize, started: Instant) -> Self {
        Self {
            started,
            levels: (0..levels).map(|_| LevelLoad::default()).collect(),
            groups: HashMap::new(),
            remaining: vec![0; levels],
            decisions: Vec::new(),
        }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn queued_requests(&self, level: usize) -> (usize, usize) {
        let l = &self.levels[level];
        (l.queued_chain.len(), l.queued_collector.len())
    }

    pub fn unclaimed(&self, level: usize) -> (usize, usize) {
        let l = &self.levels[level];
        (l.ready_proposal.len(), l.ready_collection.len())
    }

    /// Inferred mean model runtime at one level, milliseconds.
    pub fn inferred_runtime_ms(&self, level: usize) -> Option<f64> {
        self.levels[level].ema_ms
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    fn idle_groups(&self, level: usize) -> usize {
        self.groups
            .values()
            .filter(|g| g.alive && !g.busy && g.level == level)
            .count()
    }

    fn alive_groups(&self, level: usize) -> usize {
        self.groups.values().filter(|g| g.alive && g.level == level).count()
    }

    /// Weighted load signal of one level. Queued chain requests weigh
    /// double, waiting samples and idle groups count as negative load.
    pub fn load_score(&self, level: usize) -> f64 {
        let l = &self.levels[level];
        2.0 * l.queued_chain.len() as f64 + l.queued_collector.len() as f64
            - l.ready_collection.len() as f64
            - 4.0 * self.idle_groups(level) as f64
    }

    fn observe_ready(&mut self, level: usize, chain: u64, now: Instant, alpha: f64) {
        let start = self.started;
        let l = &mut self.levels[level];
        let since = match l.last_ready.get(&chain) {
            Some(&prev) => now.duration_since(prev),
            None => now.duration_since(l.first_busy.unwrap_or(start)),
        };
        l.last_ready.insert(chain, now);
        let interval_ms = (since.as_secs_f64() * 1e3).max(1e-3);
        l.ema_ms = Some(match l.ema_ms {
            Some(ema) => alpha * interval_ms + (1.0 - alpha) * ema,
            None => interval_ms,
        });
    }

    /// Fold one message into the ledger, producing any forwards or
    /// negative responses it triggers.
    pub fn handle(
        &mut self,
        message: &Message,
        now: Instant,
        settings: &BalanceSettings,
    ) -> Vec<(ProcessId, Message)> {
        let mut out = Vec::new();
        match message {
            Message::SampleRequest { level, kind, requester, request } => {
                if *level >= self.levels.len() {
                    out.push((
                        *requester,
                        Message::SamplePayload {
                            request: *request,
                            body: SamplePayloadBody::Unavailable,
                        },
                    ));
                    return out;
                }
                let l = &mut self.levels[*level];
                let (ready, queue) = match kind {
                    RequesterKind::Chain => (&mut l.ready_proposal, &mut l.queued_chain),
                    RequesterKind::Collector => (&mut l.ready_collection, &mut l.queued_collector),
                };
                match ready.pop_front() {
                    Some(entry) => out.push((
                        entry.provider,
                        Message::SampleRequest {
                            level: *level,
                            kind: *kind,
                            requester: *requester,
                            request: *request,
                        },
                    )),
                    None => queue.push_back(PendingRequest {
                        requester: *requester,
                        request: *request,
                    }),
                }
            }
            Message::SampleReady { level, chain, provider, purpose } => {
                if *level >= self.levels.len() {
                    return out;
                }
                if *purpose == SamplePurpose::Collection {
                    self.observe_ready(*level, *chain, now, settings.ema_alpha);
                }
                let l = &mut self.levels[*level];
                let (queue, ready, kind) = match purpose {
                    SamplePurpose::Proposal => {
                        (&mut l.queued_chain, &mut l.ready_proposal, RequesterKind::Chain)
                    }
                    SamplePurpose::Collection => (
                        &mut l.queued_collector,
                        &mut l.ready_collection,
                        RequesterKind::Collector,
                    ),
                };
                match queue.pop_front() {
                    Some(pending) => out.push((
                        *provider,
                        Message::SampleRequest {
                            level: *level,
                            kind,
                            requester: pending.requester,
                            request: pending.request,
                        },
                    )),
                    None => ready.push_back(ReadyEntry { provider: *provider }),
                }
            }
            Message::LoadReport(info) => match info {
                LoadInfo::Remaining { per_level } => {
                    for (slot, value) in self.remaining.iter_mut().zip(per_level.iter()) {
                        *slot = *value;
                    }
                }
                LoadInfo::GroupStatus { group, level, busy } => {
                    if *level < self.levels.len() {
                        self.levels[*level].first_busy.get_or_insert(now);
                    }
                    let entry = self.groups.entry(*group).or_insert(GroupEntry {
                        level: *level,
                        busy: *busy,
                        alive: true,
                        last_move: now,
                    });
                    if entry.level != *level {
                        entry.last_move = now;
                    }
                    entry.level = *level;
                    entry.busy = *busy;
                    entry.alive = true;
                }
                LoadInfo::GroupRetired { group } => {
                    if let Some(entry) = self.groups.get_mut(group) {
                        entry.alive = false;
                    }
                }
                _ => {}
            },
            _ => {}
        }
        out
    }

    /// Cancel everything still queued; used at shutdown so no request is
    /// left unanswered.
    pub fn cancel_pending(&mut self) -> Vec<(ProcessId, Message)> {
        let mut out = Vec::new();
        for l in &mut self.levels {
            for pending in l.queued_chain.drain(..).chain(l.queued_collector.drain(..)) {
                out.push((
                    pending.requester,
                    Message::SamplePayload {
                        request: pending.request,
                        body: SamplePayloadBody::Unavailable,
                    },
                ));
            }
        }
        out
    }

    /// At most one reassignment decision per call: move a group from the
    /// least-loaded level to the most overloaded one once the weighted
    /// difference clears the hysteresis threshold, subject to the
    /// per-group runtime throttle.
    pub fn rebalance(
        &mut self,
        now: Instant,
        settings: &BalanceSettings,
    ) -> Option<ReassignDecision> {
        if !settings.enabled || self.levels.len() < 2 {
            return None;
        }
        let scores: Vec<f64> = (0..self.levels.len()).map(|l| self.load_score(l)).collect();
        let target = (0..self.levels.len())
            .filter(|&l| self.remaining[l] > 0)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())?;
        // Cheapest-to-raid level first.
        let mut sources: Vec<usize> = (0..self.levels.len()).filter(|&l| l != target).collect();
        sources.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        for source in sources {
            if scores[target] - scores[source] <= settings.hysteresis {
                continue;
            }
            let gap_ms = self.throttle_gap_ms(source, target, settings);
            let candidate = self
                .groups
                .iter()
                .filter(|(_, g)| g.alive && g.level == source)
                .filter(|(_, g)| {
                    // Keep the last group on a level that still owes work.
                    let movable = !g.busy
                        || self.remaining[source] == 0
                        || self.alive_groups(source) > 1;
                    movable
                        && now.duration_since(g.last_move)
                            >= Duration::from_secs_f64(gap_ms / 1e3)
                })
                .min_by_key(|(id, g)| (g.busy, g.last_move, **id))
                .map(|(id, _)| *id);
            if let Some(group) = candidate {
                let entry = self.groups.get_mut(&group).unwrap();
                entry.last_move = now;
                entry.level = target;
                entry.busy = true;
                let record = DecisionRecord {
                    at_ns: now.duration_since(self.started).as_nanos() as u64,
                    group,
                    from_level: source,
                    to_level: target,
                    enforced_gap_ms: gap_ms,
                    ema_from_ms: self.levels[source].ema_ms.unwrap_or(0.0),
                    ema_to_ms: self.levels[target].ema_ms.unwrap_or(0.0),
                };
                self.decisions.push(record);
                return Some(ReassignDecision { group, from_level: source, to_level: target });
            }
        }
        None
    }

    fn throttle_gap_ms(&self, source: usize, target: usize, settings: &BalanceSettings) -> f64 {
        let floor = settings.throttle_floor.as_secs_f64() * 1e3;
        let a = self.levels[source].ema_ms.unwrap_or(0.0);
        let b = self.levels[target].ema_ms.unwrap_or(0.0);
        a.max(b).max(floor)
    }

    pub fn summary(&self) -> LoadInfo {
        LoadInfo::LedgerSummary {
            ema_ms_per_level: self
                .levels
                .iter()
                .map(|l| l.ema_ms.unwrap_or(0.0))
                .collect(),
            decisions: self.decisions.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> BalanceSettings {
        BalanceSettings::default()
    }

    fn ready(level: usize, chain: u64, provider: ProcessId) -> Message {
        Message::SampleReady { level, chain, provider, purpose: SamplePurpose::Collection }
    }

    fn request(level: usize, requester: ProcessId, id: u64) -> Message {
        Message::SampleRequest {
            level,
            kind: RequesterKind::Collector,
            requester,
            request: id,
        }
    }

    #[test]
    fn ready_then_request_matches_immediately() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        assert!(ledger.handle(&ready(1, 7, 9), t0, &settings()).is_empty());
        let out = ledger.handle(&request(1, 4, 100), t0, &settings());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 9);
        match &out[0].1 {
            Message::SampleRequest { requester: 4, request: 100, .. } => {}
            other => panic!("unexpected forward {other:?}"),
        }
        assert_eq!(ledger.unclaimed(1), (0, 0));
    }

    #[test]
    fn unmatched_requests_queue_and_signal_overload() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        for i in 0..5 {
            let msg = Message::SampleRequest {
                level: 1,
                kind: RequesterKind::Chain,
                requester: 3,
                request: i,
            };
            assert!(ledger.handle(&msg, t0, &settings()).is_empty());
        }
        assert_eq!(ledger.queued_requests(1), (5, 0));
        assert_eq!(ledger.load_score(1), 10.0);
    }

    #[test]
    fn unknown_level_gets_a_negative_response() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(1, t0);
        let out = ledger.handle(&request(5, 2, 1), t0, &settings());
        assert_eq!(out.len(), 1);
        assert!(matches!(
            out[0].1,
            Message::SamplePayload { request: 1, body: SamplePayloadBody::Unavailable }
        ));
    }

    /// Replay oracle: a deliberately naive re-implementation of the
    /// matching bookkeeping, driven over the same interleaved trace.
    #[test]
    fn ledger_matches_sequential_replay() {
        #[derive(Default)]
        struct Naive {
            ready: Vec<usize>,
            queued: Vec<usize>,
            forwards: usize,
        }
        impl Naive {
            fn on_ready(&mut self, level: usize) {
                if let Some(pos) = self.queued.iter().position(|&l| l == level) {
                    self.queued.remove(pos);
                    self.forwards += 1;
                } else {
                    self.ready.push(level);
                }
            }
            fn on_request(&mut self, level: usize) {
                if let Some(pos) = self.ready.iter().position(|&l| l == level) {
                    self.ready.remove(pos);
                    self.forwards += 1;
                } else {
                    self.queued.push(level);
                }
            }
        }
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(3, t0);
        let mut naive = Naive::default();
        let mut forwards = 0usize;
        let mut rng = crate::probability::RngStream::new(99, 0);
        for i in 0..100u64 {
            let level = (rng.uniform() * 3.0) as usize;
            if rng.uniform() < 0.5 {
                forwards += ledger.handle(&ready(level, i, 7), t0, &settings()).len();
                naive.on_ready(level);
            } else {
                forwards += ledger.handle(&request(level, 4, i), t0, &settings()).len();
                naive.on_request(level);
            }
        }
        assert_eq!(forwards, naive.forwards);
        for level in 0..3 {
            let per_level_ready = naive.ready.iter().filter(|&&l| l == level).count();
            let per_level_queued = naive.queued.iter().filter(|&&l| l == level).count();
            assert_eq!(ledger.unclaimed(level).1, per_level_ready, "ready at {level}");
            assert_eq!(ledger.queued_requests(level).1, per_level_queued, "queued at {level}");
        }
    }

    fn busy_group(ledger: &mut LoadLedger, group: usize, level: usize, at: Instant) {
        let msg = Message::LoadReport(LoadInfo::GroupStatus { group, level, busy: true });
        ledger.handle(&msg, at, &settings());
    }

    #[test]
    fn balanced_ledger_makes_no_decision() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        ledger.handle(
            &Message::LoadReport(LoadInfo::Remaining { per_level: vec![10, 10] }),
            t0,
            &settings(),
        );
        busy_group(&mut ledger, 0, 0, t0);
        busy_group(&mut ledger, 1, 1, t0);
        let later = t0 + Duration::from_secs(10);
        assert_eq!(ledger.rebalance(later, &settings()), None);
    }

    #[test]
    fn overloaded_fine_level_raids_the_coarse_one() {
        // Ten queued chain requests at the fine level against three
        // unclaimed samples and four groups at the coarse level.
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        ledger.handle(
            &Message::LoadReport(LoadInfo::Remaining { per_level: vec![50, 50] }),
            t0,
            &settings(),
        );
        for g in 0..4 {
            busy_group(&mut ledger, g, 0, t0);
        }
        busy_group(&mut ledger, 4, 1, t0);
        for i in 0..10 {
            let msg = Message::SampleRequest {
                level: 1,
                kind: RequesterKind::Chain,
                requester: 9,
                request: i,
            };
            ledger.handle(&msg, t0, &settings());
        }
        for i in 0..3u64 {
            ledger.handle(&ready(0, i, 5), t0, &settings());
        }
        let later = t0 + Duration::from_secs(1);
        let decision = ledger.rebalance(later, &settings()).expect("should move a group");
        assert_eq!(decision.from_level, 0);
        assert_eq!(decision.to_level, 1);
    }

    #[test]
    fn throttle_suppresses_back_to_back_moves() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        ledger.handle(
            &Message::LoadReport(LoadInfo::Remaining { per_level: vec![50, 50] }),
            t0,
            &settings(),
        );
        for g in 0..3 {
            busy_group(&mut ledger, g, 0, t0);
        }
        // Inferred runtime of 5 seconds at the coarse level.
        ledger.levels[0].ema_ms = Some(5000.0);
        for i in 0..20 {
            let msg = Message::SampleRequest {
                level: 1,
                kind: RequesterKind::Chain,
                requester: 9,
                request: i,
            };
            ledger.handle(&msg, t0, &settings());
        }
        let t1 = t0 + Duration::from_secs(6);
        let first = ledger.rebalance(t1, &settings());
        assert!(first.is_some());
        // One millisecond later every remaining group is still throttled
        // against the 5 s inferred runtime.
        let t2 = t1 + Duration::from_millis(1);
        assert_eq!(ledger.rebalance(t2, &settings()), None);
        // Well past the inferred runtime another move is allowed.
        let t3 = t1 + Duration::from_secs(6);
        assert!(ledger.rebalance(t3, &settings()).is_some());
    }

    #[test]
    fn last_busy_group_with_remaining_work_stays() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(2, t0);
        ledger.handle(
            &Message::LoadReport(LoadInfo::Remaining { per_level: vec![5, 50] }),
            t0,
            &settings(),
        );
        busy_group(&mut ledger, 0, 0, t0);
        for i in 0..20 {
            let msg = Message::SampleRequest {
                level: 1,
                kind: RequesterKind::Chain,
                requester: 9,
                request: i,
            };
            ledger.handle(&msg, t0, &settings());
        }
        let later = t0 + Duration::from_secs(5);
        assert_eq!(ledger.rebalance(later, &settings()), None);
        // Once the coarse level owes nothing, the group may move.
        ledger.handle(
            &Message::LoadReport(LoadInfo::Remaining { per_level: vec![0, 50] }),
            later,
            &settings(),
        );
        assert!(ledger.rebalance(later, &settings()).is_some());
    }

    #[test]
    fn shutdown_cancels_queued_requests() {
        let t0 = Instant::now();
        let mut ledger = LoadLedger::new(1, t0);
        ledger.handle(&request(0, 3, 11), t0, &settings());
        ledger.handle(&request(0, 4, 12), t0, &settings());
        let cancelled = ledger.cancel_pending();
        assert_eq!(cancelled.len(), 2);
        assert!(cancelled.iter().all(|(_, m)| matches!(
            m,
            Message::SamplePayload { body: SamplePayloadBody::Unavailable, .. }
        )));
    }
}
