//! Binary frame codec for the socket transport.
//!
//! Frame layout: a 4-byte little-endian length (covering everything after
//! it), a 1-byte tag, an 8-byte little-endian sequence number, then the
//! tag's payload. Payloads consist of little-endian 64-bit integers and
//! floats; the first two integers are always the sender and receiver ids.
//! Variable-length vectors are a 64-bit count followed by their elements;
//! error texts are a 64-bit byte count followed by UTF-8 bytes. Booleans
//! and enum discriminants travel as single bytes.
//!
//! Tag 255 is a transport-level hello carrying the connecting process id;
//! it never appears in the protocol trace.

use thiserror::Error;

use super::message::{
    CoarseMode, CollectionSample, CollectorDirective, DecisionRecord, Envelope, EvalKind,
    EvalTarget, GroupAssignment, LoadInfo, Message, ProposalSample, Reassignment, RequesterKind,
    SamplePayloadBody, SamplePurpose, StatsReport, Tag,
};
use crate::multilevel::EstimateKind;

pub const HELLO_TAG: u8 = 255;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("invalid discriminant {value} for {what}")]
    BadDiscriminant { what: &'static str, value: u8 },
    #[error("invalid utf-8 in string field")]
    BadString,
}

#[derive(Debug)]
pub enum Frame {
    Hello { pid: u64 },
    Message(Envelope),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(tag: u8, seq: u64) -> Self {
        // Length placeholder is filled in by `finish`.
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&[0u8; 4]);
        buf.push(tag);
        buf.extend_from_slice(&seq.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn boolean(&mut self, v: bool) {
        self.u8(v as u8);
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    fn u64s(&mut self, vs: &[u64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.u64(v);
        }
    }

    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn finish(mut self) -> Vec<u8> {
        let len = (self.buf.len() - 4) as u32;
        self.buf[..4].copy_from_slice(&len.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn boolean(&mut self) -> Result<bool, WireError> {
        Ok(self.u8()? != 0)
    }

    fn f64s(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn u64s(&mut self) -> Result<Vec<u64>, WireError> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.u64()).collect()
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::BadString)
    }
}

fn put_assignment(w: &mut Writer, a: &GroupAssignment) {
    w.u64(a.group as u64);
    w.u64(a.level as u64);
    w.u64(a.chain);
    w.u64(a.epoch);
    w.u64(a.quota);
    w.u64(a.burn_in);
    w.u8(match a.coarse_mode {
        CoarseMode::Local => 0,
        CoarseMode::Remote => 1,
    });
}

fn get_assignment(r: &mut Reader) -> Result<GroupAssignment, WireError> {
    Ok(GroupAssignment {
        group: r.u64()? as usize,
        level: r.u64()? as usize,
        chain: r.u64()?,
        epoch: r.u64()?,
        quota: r.u64()?,
        burn_in: r.u64()?,
        coarse_mode: match r.u8()? {
            0 => CoarseMode::Local,
            1 => CoarseMode::Remote,
            v => return Err(WireError::BadDiscriminant { what: "coarse mode", value: v }),
        },
    })
}

fn put_row(w: &mut Writer, s: &CollectionSample) {
    w.u64(s.level as u64);
    w.u64(s.chain);
    w.u64(s.step);
    w.boolean(s.accepted);
    w.f64s(&s.theta);
    w.f64(s.log_density);
    w.f64s(&s.value);
}

fn get_row(r: &mut Reader) -> Result<CollectionSample, WireError> {
    Ok(CollectionSample {
        level: r.u64()? as usize,
        chain: r.u64()?,
        step: r.u64()?,
        accepted: r.boolean()?,
        theta: r.f64s()?,
        log_density: r.f64()?,
        value: r.f64s()?,
    })
}

/// Encode a routed protocol message as one complete frame.
pub fn encode_envelope(env: &Envelope) -> Vec<u8> {
    let mut w = Writer::new(env.message.tag() as u8, env.seq);
    w.u64(env.from as u64);
    w.u64(env.to as u64);
    match &env.message {
        Message::AssignGroup(a) => put_assignment(&mut w, a),
        Message::ReassignGroup(r) => match r {
            Reassignment::Decision { group, from_level, to_level } => {
                w.u8(0);
                w.u64(*group as u64);
                w.u64(*from_level as u64);
                w.u64(*to_level as u64);
            }
            Reassignment::Directive(a) => {
                w.u8(1);
                put_assignment(&mut w, a);
            }
        },
        Message::EvaluateDensity { epoch, eval, target, kind, theta } => {
            w.u64(*epoch);
            w.u64(*eval);
            w.u8(match target {
                EvalTarget::Fine => 0,
                EvalTarget::Coarse => 1,
            });
            w.u8(match kind {
                EvalKind::Density => 0,
                EvalKind::Qoi => 1,
            });
            w.f64s(theta);
        }
        Message::DensityResult { epoch, eval, log_density, qoi, error } => {
            w.u64(*epoch);
            w.u64(*eval);
            w.f64(*log_density);
            match qoi {
                Some(q) => {
                    w.u8(1);
                    w.f64s(q);
                }
                None => w.u8(0),
            }
            match error {
                Some(e) => {
                    w.u8(1);
                    w.string(e);
                }
                None => w.u8(0),
            }
        }
        Message::SampleRequest { level, kind, requester, request } => {
            w.u64(*level as u64);
            w.u8(match kind {
                RequesterKind::Chain => 0,
                RequesterKind::Collector => 1,
            });
            w.u64(*requester as u64);
            w.u64(*request);
        }
        Message::SampleReady { level, chain, provider, purpose } => {
            w.u64(*level as u64);
            w.u64(*chain);
            w.u64(*provider as u64);
            w.u8(match purpose {
                SamplePurpose::Collection => 0,
                SamplePurpose::Proposal => 1,
            });
        }
        Message::SamplePayload { request, body } => {
            w.u64(*request);
            match body {
                SamplePayloadBody::Collection(s) => {
                    w.u8(0);
                    put_row(&mut w, s);
                }
                SamplePayloadBody::Proposal(p) => {
                    w.u8(1);
                    w.f64s(&p.theta);
                    w.f64(p.log_density);
                    w.f64s(&p.qoi);
                }
                SamplePayloadBody::Unavailable => w.u8(2),
            }
        }
        Message::CollectRequest(directive) => match directive {
            CollectorDirective::Begin { level, quota, shard, shards, merge_target } => {
                w.u8(0);
                w.u64(*level as u64);
                w.u64(*quota);
                w.u64(*shard as u64);
                w.u64(*shards as u64);
                w.u64(*merge_target as u64);
            }
            CollectorDirective::Finalize => w.u8(1),
        },
        Message::CollectedStats(s) => {
            w.u64(s.level as u64);
            w.u64(s.shard as u64);
            w.u8(match s.kind {
                EstimateKind::Base => 0,
                EstimateKind::Correction => 1,
            });
            w.u64(s.count);
            w.f64s(&s.mean);
            w.f64s(&s.m2);
            w.u64(s.rows.len() as u64);
            for row in &s.rows {
                put_row(&mut w, row);
            }
            w.boolean(s.complete);
        }
        Message::LoadReport(info) => match info {
            LoadInfo::Remaining { per_level } => {
                w.u8(0);
                w.u64s(per_level);
            }
            LoadInfo::GroupStatus { group, level, busy } => {
                w.u8(1);
                w.u64(*group as u64);
                w.u64(*level as u64);
                w.boolean(*busy);
            }
            LoadInfo::GroupRetired { group } => {
                w.u8(2);
                w.u64(*group as u64);
            }
            LoadInfo::ChunkComplete {
                group,
                epoch,
                level,
                chain,
                produced,
                returned,
                evaluations,
                mean_eval_ms,
            } => {
                w.u8(3);
                w.u64(*group as u64);
                w.u64(*epoch);
                w.u64(*level as u64);
                w.u64(*chain);
                w.u64(*produced);
                w.u64(*returned);
                w.u64(*evaluations);
                w.f64(*mean_eval_ms);
            }
            LoadInfo::GroupDead { group, epoch, level, chain, produced, returned, reason } => {
                w.u8(4);
                w.u64(*group as u64);
                w.u64(*epoch);
                w.u64(*level as u64);
                w.u64(*chain);
                w.u64(*produced);
                w.u64(*returned);
                w.string(reason);
            }
            LoadInfo::CollectorDone { level, shard, collected } => {
                w.u8(5);
                w.u64(*level as u64);
                w.u64(*shard as u64);
                w.u64(*collected);
            }
            LoadInfo::LedgerSummary { ema_ms_per_level, decisions } => {
                w.u8(6);
                w.f64s(ema_ms_per_level);
                w.u64(decisions.len() as u64);
                for d in decisions {
                    w.u64(d.at_ns);
                    w.u64(d.group as u64);
                    w.u64(d.from_level as u64);
                    w.u64(d.to_level as u64);
                    w.f64(d.enforced_gap_ms);
                    w.f64(d.ema_from_ms);
                    w.f64(d.ema_to_ms);
                }
            }
        },
        Message::Shutdown => {}
    }
    w.finish()
}

/// Encode the transport-level hello announcing the local process id.
pub fn encode_hello(pid: u64) -> Vec<u8> {
    let mut w = Writer::new(HELLO_TAG, 0);
    w.u64(pid);
    w.finish()
}

/// Decode one frame body (everything after the 4-byte length prefix).
pub fn decode_frame(body: &[u8]) -> Result<Frame, WireError> {
    let mut r = Reader::new(body);
    let tag = r.u8()?;
    let seq = r.u64()?;
    if tag == HELLO_TAG {
        return Ok(Frame::Hello { pid: r.u64()? });
    }
    let tag = Tag::from_u8(tag).ok_or(WireError::UnknownTag(tag))?;
    let from = r.u64()? as usize;
    let to = r.u64()? as usize;
    let message = match tag {
        Tag::AssignGroup => Message::AssignGroup(get_assignment(&mut r)?),
        Tag::ReassignGroup => match r.u8()? {
            0 => Message::ReassignGroup(Reassignment::Decision {
                group: r.u64()? as usize,
                from_level: r.u64()? as usize,
                to_level: r.u64()? as usize,
            }),
            1 => Message::ReassignGroup(Reassignment::Directive(get_assignment(&mut r)?)),
            v => return Err(WireError::BadDiscriminant { what: "reassignment", value: v }),
        },
        Tag::EvaluateDensity => Message::EvaluateDensity {
            epoch: r.u64()?,
            eval: r.u64()?,
            target: match r.u8()? {
                0 => EvalTarget::Fine,
                1 => EvalTarget::Coarse,
                v => return Err(WireError::BadDiscriminant { what: "eval target", value: v }),
            },
            kind: match r.u8()? {
                0 => EvalKind::Density,
                1 => EvalKind::Qoi,
                v => return Err(WireError::BadDiscriminant { what: "eval kind", value: v }),
            },
            theta: r.f64s()?,
        },
        Tag::DensityResult => Message::DensityResult {
            epoch: r.u64()?,
            eval: r.u64()?,
            log_density: r.f64()?,
            qoi: if r.u8()? == 1 { Some(r.f64s()?) } else { None },
            error: if r.u8()? == 1 { Some(r.string()?) } else { None },
        },
        Tag::SampleRequest => Message::SampleRequest {
            level: r.u64()? as usize,
            kind: match r.u8()? {
                0 => RequesterKind::Chain,
                1 => RequesterKind::Collector,
                v => return Err(WireError::BadDiscriminant { what: "requester kind", value: v }),
            },
            requester: r.u64()? as usize,
            request: r.u64()?,
        },
        Tag::SampleReady => Message::SampleReady {
            level: r.u64()? as usize,
            chain: r.u64()?,
            provider: r.u64()? as usize,
            purpose: match r.u8()? {
                0 => SamplePurpose::Collection,
                1 => SamplePurpose::Proposal,
                v => return Err(WireError::BadDiscriminant { what: "sample purpose", value: v }),
            },
        },
        Tag::SamplePayload => Message::SamplePayload {
            request: r.u64()?,
            body: match r.u8()? {
                0 => SamplePayloadBody::Collection(get_row(&mut r)?),
                1 => SamplePayloadBody::Proposal(ProposalSample {
                    theta: r.f64s()?,
                    log_density: r.f64()?,
                    qoi: r.f64s()?,
                }),
                2 => SamplePayloadBody::Unavailable,
                v => return Err(WireError::BadDiscriminant { what: "payload body", value: v }),
            },
        },
        Tag::CollectRequest => Message::CollectRequest(match r.u8()? {
            0 => CollectorDirective::Begin {
                level: r.u64()? as usize,
                quota: r.u64()?,
                shard: r.u64()? as usize,
                shards: r.u64()? as usize,
                merge_target: r.u64()? as usize,
            },
            1 => CollectorDirective::Finalize,
            v => return Err(WireError::BadDiscriminant { what: "collector directive", value: v }),
        }),
        Tag::CollectedStats => {
            let level = r.u64()? as usize;
            let shard = r.u64()? as usize;
            let kind = match r.u8()? {
                0 => EstimateKind::Base,
                1 => EstimateKind::Correction,
                v => return Err(WireError::BadDiscriminant { what: "estimate kind", value: v }),
            };
            let count = r.u64()?;
            let mean = r.f64s()?;
            let m2 = r.f64s()?;
            let n_rows = r.u64()? as usize;
            let rows = (0..n_rows).map(|_| get_row(&mut r)).collect::<Result<_, _>>()?;
            let complete = r.boolean()?;
            Message::CollectedStats(StatsReport { level, shard, kind, count, mean, m2, rows, complete })
        }
        Tag::LoadReport => Message::LoadReport(match r.u8()? {
            0 => LoadInfo::Remaining { per_level: r.u64s()? },
            1 => LoadInfo::GroupStatus {
                group: r.u64()? as usize,
                level: r.u64()? as usize,
                busy: r.boolean()?,
            },
            2 => LoadInfo::GroupRetired { group: r.u64()? as usize },
            3 => LoadInfo::ChunkComplete {
                group: r.u64()? as usize,
                epoch: r.u64()?,
                level: r.u64()? as usize,
                chain: r.u64()?,
                produced: r.u64()?,
                returned: r.u64()?,
                evaluations: r.u64()?,
                mean_eval_ms: r.f64()?,
            },
            4 => LoadInfo::GroupDead {
                group: r.u64()? as usize,
                epoch: r.u64()?,
                level: r.u64()? as usize,
                chain: r.u64()?,
                produced: r.u64()?,
                returned: r.u64()?,
                reason: r.string()?,
            },
            5 => LoadInfo::CollectorDone {
                level: r.u64()? as usize,
                shard: r.u64()? as usize,
                collected: r.u64()?,
            },
            6 => LoadInfo::LedgerSummary {
                ema_ms_per_level: r.f64s()?,
                decisions: {
                    let n = r.u64()? as usize;
                    (0..n)
                        .map(|_| -> Result<DecisionRecord, WireError> {
                            Ok(DecisionRecord {
                                at_ns: r.u64()?,
                                group: r.u64()? as usize,
                                from_level: r.u64()? as usize,
                                to_level: r.u64()? as usize,
                                enforced_gap_ms: r.f64()?,
                                ema_from_ms: r.f64()?,
                                ema_to_ms: r.f64()?,
                            })
                        })
                        .collect::<Result<_, _>>()?
                },
            },
            v => return Err(WireError::BadDiscriminant { what: "load info", value: v }),
        }),
        Tag::Shutdown => Message::Shutdown,
    };
    Ok(Frame::Message(Envelope { from, to, seq, message }))
}
