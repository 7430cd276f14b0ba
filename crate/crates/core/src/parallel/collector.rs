//! Collector role: pulls samples for one level through the phonebook
//! until its shard quota is met, folds them into a mergeable estimate,
//! and ships statistics up the merge chain on finalize. Shard 0 merges
//! all shards of its level pairwise and reports the result to the root.

use std::time::Duration;

use nalgebra::DVector;

use super::message::{
    CollectionSample, CollectorDirective, LoadInfo, Message, ProcessId, RequesterKind,
    SamplePayloadBody, StatsReport,
};
use super::transport::Transport;
use crate::hierarchy::LevelIndex;
use crate::multilevel::{merge_statistics, EstimateKind, LevelEstimate};

pub struct CollectorConfig {
    pub root: ProcessId,
    pub phonebook: ProcessId,
    /// Maximum sample requests in flight.
    pub window: usize,
}

struct Shard {
    level: usize,
    quota: u64,
    shard: usize,
    shards: usize,
    merge_target: ProcessId,
    estimate: Option<LevelEstimate>,
    rows: Vec<CollectionSample>,
    outstanding: u64,
    next_request: u64,
    collected: u64,
    done_reported: bool,
}

impl Shard {
    fn kind(&self) -> EstimateKind {
        if self.level == 0 {
            EstimateKind::Base
        } else {
            EstimateKind::Correction
        }
    }

    fn observe(&mut self, sample: CollectionSample) {
        let value = DVector::from_column_slice(&sample.value);
        if self.estimate.is_none() {
            self.estimate =
                Some(LevelEstimate::new(LevelIndex(self.level), self.kind(), value.len()));
        }
        self.estimate.as_mut().unwrap().observe(&value);
        self.rows.push(sample);
        self.collected += 1;
    }

    fn report(&self, complete: bool) -> StatsReport {
        let (count, mean, m2) = match &self.estimate {
            Some(est) => (
                est.count(),
                est.mean().iter().copied().collect(),
                est.raw_m2().iter().copied().collect(),
            ),
            None => (0, Vec::new(), Vec::new()),
        };
        StatsReport {
            level: self.level,
            shard: self.shard,
            kind: self.kind(),
            count,
            mean,
            m2,
            rows: self.rows.clone(),
            complete,
        }
    }
}

pub fn collector_loop(mut transport: Box<dyn Transport>, cfg: CollectorConfig) {
    let mut shard: Option<Shard> = None;
    let mut peer_reports: Vec<StatsReport> = Vec::new();
    let mut finalized = false;
    loop {
        let env = match transport.recv_timeout(Duration::from_millis(100)) {
            Ok(Some(env)) => env,
            Ok(None) => continue,
            Err(_) => return,
        };
        match env.message {
            Message::CollectRequest(CollectorDirective::Begin {
                level,
                quota,
                shard: index,
                shards,
                merge_target,
            }) => {
                let mut s = Shard {
                    level,
                    quota,
                    shard: index,
                    shards,
                    merge_target,
                    estimate: None,
                    rows: Vec::new(),
                    outstanding: 0,
                    next_request: 0,
                    collected: 0,
                    done_reported: false,
                };
                pump_requests(&mut transport, &cfg, &mut s);
                maybe_report_done(&mut transport, &cfg, &mut s);
                shard = Some(s);
            }
            Message::SamplePayload { body, .. } => {
                if let Some(s) = shard.as_mut() {
                    s.outstanding = s.outstanding.saturating_sub(1);
                    if let SamplePayloadBody::Collection(sample) = body {
                        s.observe(sample);
                    }
                    if !finalized {
                        pump_requests(&mut transport, &cfg, s);
                        maybe_report_done(&mut transport, &cfg, s);
                    }
                }
            }
            Message::CollectRequest(CollectorDirective::Finalize) => {
                finalized = true;
                if let Some(s) = shard.as_ref() {
                    let complete = s.collected >= s.quota;
                    if s.shard != 0 {
                        let _ = transport
                            .send(s.merge_target, Message::CollectedStats(s.report(complete)));
                    } else if peer_reports.len() + 1 >= s.shards {
                        send_merged(&mut transport, &cfg, s, &peer_reports);
                    }
                } else {
                    // Never assigned a level; nothing to contribute.
                }
            }
            Message::CollectedStats(report) => {
                peer_reports.push(report);
                if finalized {
                    if let Some(s) = shard.as_ref() {
                        if s.shard == 0 && peer_reports.len() + 1 >= s.shards {
                            send_merged(&mut transport, &cfg, s, &peer_reports);
                        }
                    }
                }
            }
            Message::Shutdown => return,
            _ => {}
        }
    }
}

fn pump_requests(transport: &mut Box<dyn Transport>, cfg: &CollectorConfig, s: &mut Shard) {
    while s.outstanding < cfg.window as u64 && s.collected + s.outstanding < s.quota {
        s.next_request += 1;
        let message = Message::SampleRequest {
            level: s.level,
            kind: RequesterKind::Collector,
            requester: transport.local_id(),
            request: s.next_request,
        };
        if transport.send(cfg.phonebook, message).is_err() {
            return;
        }
        s.outstanding += 1;
    }
}

fn maybe_report_done(transport: &mut Box<dyn Transport>, cfg: &CollectorConfig, s: &mut Shard) {
    if !s.done_reported && s.collected >= s.quota {
        s.done_reported = true;
        let _ = transport.send(
            cfg.root,
            Message::LoadReport(LoadInfo::CollectorDone {
                level: s.level,
                shard: s.shard,
                collected: s.collected,
            }),
        );
    }
}

/// Merge the local shard with its peers pairwise and report to the root.
fn send_merged(
    transport: &mut Box<dyn Transport>,
    cfg: &CollectorConfig,
    s: &Shard,
    peers: &[StatsReport],
) {
    let mut complete = s.collected >= s.quota;
    let mut merged = s
        .estimate
        .clone()
        .unwrap_or_else(|| LevelEstimate::new(LevelIndex(s.level), s.kind(), 0));
    let mut rows = s.rows.clone();
    for peer in peers {
        complete &= peer.complete;
        if peer.count > 0 {
            let peer_estimate = LevelEstimate::from_raw_parts(
                LevelIndex(peer.level),
                peer.kind,
                peer.count,
                DVector::from_column_slice(&peer.mean),
                DVector::from_column_slice(&peer.m2),
            );
            merged = if merged.count() == 0 {
                peer_estimate
            } else {
                match merge_statistics(&merged, &peer_estimate) {
                    Ok(out) => out,
                    Err(_) => merged,
                }
            };
        }
        rows.extend(peer.rows.iter().cloned());
    }
    let report = StatsReport {
        level: s.level,
        shard: 0,
        kind: s.kind(),
        count: merged.count(),
        mean: merged.mean().iter().copied().collect(),
        m2: merged.raw_m2().iter().copied().collect(),
        rows,
        complete,
    };
    let _ = transport.send(cfg.root, Message::CollectedStats(report));
}
