//! Roles, the tagged message protocol exchanged between them, and trace
//! events for post-hoc scheduling analysis.
//!
//! Every request tag has exactly one matching response tag:
//! `EvaluateDensity`/`DensityResult`, `SampleRequest`/`SamplePayload`,
//! `CollectRequest`/`CollectedStats`. The remaining tags are one-way
//! announcements or directives.

use crate::multilevel::EstimateKind;

pub type ProcessId = usize;

/// Static role of a process, fixed by the layout at startup. Controllers
/// and their workers later move between levels; the level and chain here
/// are the initial assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Root,
    Phonebook,
    Collector { level: usize, shard: usize },
    Controller { group: usize, level: usize },
    Worker { group: usize, rank: usize },
    /// Left over by the layout arithmetic; never participates.
    IdleReserve,
}

/// Wire tags, one byte each on the socket transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    AssignGroup = 1,
    ReassignGroup = 2,
    EvaluateDensity = 3,
    DensityResult = 4,
    SampleRequest = 5,
    SampleReady = 6,
    SamplePayload = 7,
    CollectRequest = 8,
    CollectedStats = 9,
    LoadReport = 10,
    Shutdown = 11,
}

impl Tag {
    pub fn from_u8(value: u8) -> Option<Tag> {
        Some(match value {
            1 => Tag::AssignGroup,
            2 => Tag::ReassignGroup,
            3 => Tag::EvaluateDensity,
            4 => Tag::DensityResult,
            5 => Tag::SampleRequest,
            6 => Tag::SampleReady,
            7 => Tag::SamplePayload,
            8 => Tag::CollectRequest,
            9 => Tag::CollectedStats,
            10 => Tag::LoadReport,
            11 => Tag::Shutdown,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::AssignGroup => "AssignGroup",
            Tag::ReassignGroup => "ReassignGroup",
            Tag::EvaluateDensity => "EvaluateDensity",
            Tag::DensityResult => "DensityResult",
            Tag::SampleRequest => "SampleRequest",
            Tag::SampleReady => "SampleReady",
            Tag::SamplePayload => "SamplePayload",
            Tag::CollectRequest => "CollectRequest",
            Tag::CollectedStats => "CollectedStats",
            Tag::LoadReport => "LoadReport",
            Tag::Shutdown => "Shutdown",
        }
    }
}

/// Whether a fine chain draws its coarse proposals from the embedded
/// local chain or requests them from a coarser controller via the
/// phonebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseMode {
    Local,
    Remote,
}

/// A group's task: which level to sample, under which chain identity and
/// epoch, and how many post-burn-in samples to deliver.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub group: usize,
    pub level: usize,
    pub chain: u64,
    pub epoch: u64,
    pub quota: u64,
    pub burn_in: u64,
    pub coarse_mode: CoarseMode,
}

/// Phonebook decision versus root directive, both under the
/// `ReassignGroup` tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Reassignment {
    Decision { group: usize, from_level: usize, to_level: usize },
    Directive(GroupAssignment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Density,
    Qoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequesterKind {
    Chain,
    Collector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplePurpose {
    Collection,
    Proposal,
}

/// One collected estimator sample, also the unit persisted to sample
/// files: the level's contribution value is the qoi on level 0 and the
/// coupled correction difference on finer levels.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectionSample {
    pub level: usize,
    pub chain: u64,
    pub step: u64,
    pub accepted: bool,
    pub theta: Vec<f64>,
    pub log_density: f64,
    pub value: Vec<f64>,
}

/// Coarse-sample payload served to a finer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSample {
    pub theta: Vec<f64>,
    pub log_density: f64,
    pub qoi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplePayloadBody {
    Collection(CollectionSample),
    Proposal(ProposalSample),
    /// Negative response: unknown level or cancelled by shutdown.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CollectorDirective {
    Begin {
        level: usize,
        quota: u64,
        shard: usize,
        shards: usize,
        merge_target: ProcessId,
    },
    /// Ship statistics up the merge chain, complete or not.
    Finalize,
}

/// Per-level statistics shard flowing to the merge target and then root.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub level: usize,
    pub shard: usize,
    pub kind: EstimateKind,
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub rows: Vec<CollectionSample>,
    pub complete: bool,
}

/// One executed reassignment with the throttle window the phonebook
/// enforced when deciding it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub at_ns: u64,
    pub group: usize,
    pub from_level: usize,
    pub to_level: usize,
    pub enforced_gap_ms: f64,
    pub ema_from_ms: f64,
    pub ema_to_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadInfo {
    /// Root -> phonebook: unassigned demand per level.
    Remaining { per_level: Vec<u64> },
    /// Root -> phonebook: a group's current placement.
    GroupStatus { group: usize, level: usize, busy: bool },
    /// Root -> phonebook: group is gone for good.
    GroupRetired { group: usize },
    /// Controller -> root: chunk accounting.
    ChunkComplete {
        group: usize,
        epoch: u64,
        level: usize,
        chain: u64,
        produced: u64,
        returned: u64,
        evaluations: u64,
        mean_eval_ms: f64,
    },
    /// Controller -> root: evaluation infrastructure failed.
    GroupDead {
        group: usize,
        epoch: u64,
        level: usize,
        chain: u64,
        produced: u64,
        returned: u64,
        reason: String,
    },
    /// Collector -> root: shard quota reached.
    CollectorDone { level: usize, shard: usize, collected: u64 },
    /// Phonebook -> root at shutdown: inferred runtimes and the decision
    /// log, for diagnostics and trace audits.
    LedgerSummary { ema_ms_per_level: Vec<f64>, decisions: Vec<DecisionRecord> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    AssignGroup(GroupAssignment),
    ReassignGroup(Reassignment),
    EvaluateDensity {
        epoch: u64,
        eval: u64,
        target: EvalTarget,
        kind: EvalKind,
        theta: Vec<f64>,
    },
    DensityResult {
        epoch: u64,
        eval: u64,
        log_density: f64,
        qoi: Option<Vec<f64>>,
        error: Option<String>,
    },
    SampleRequest {
        level: usize,
        kind: RequesterKind,
        requester: ProcessId,
        request: u64,
    },
    SampleReady {
        level: usize,
        chain: u64,
        provider: ProcessId,
        purpose: SamplePurpose,
    },
    SamplePayload {
        request: u64,
        body: SamplePayloadBody,
    },
    CollectRequest(CollectorDirective),
    CollectedStats(StatsReport),
    LoadReport(LoadInfo),
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::AssignGroup(_) => Tag::AssignGroup,
            Message::ReassignGroup(_) => Tag::ReassignGroup,
            Message::EvaluateDensity { .. } => Tag::EvaluateDensity,
            Message::DensityResult { .. } => Tag::DensityResult,
            Message::SampleRequest { .. } => Tag::SampleRequest,
            Message::SampleReady { .. } => Tag::SampleReady,
            Message::SamplePayload { .. } => Tag::SamplePayload,
            Message::CollectRequest(_) => Tag::CollectRequest,
            Message::CollectedStats(_) => Tag::CollectedStats,
            Message::LoadReport(_) => Tag::LoadReport,
            Message::Shutdown => Tag::Shutdown,
        }
    }
}

/// A routed message with its per-(sender, receiver) sequence number.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub from: ProcessId,
    pub to: ProcessId,
    pub seq: u64,
    pub message: Message,
}

/// One line of the scheduler event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub timestamp_ns: u64,
    pub from: ProcessId,
    pub to: ProcessId,
    pub tag: Tag,
    pub seq: u64,
}

impl TraceEvent {
    /// `timestamp_ns,sender,receiver,tag,seq`
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.timestamp_ns,
            self.from,
            self.to,
            self.tag.name(),
            self.seq
        )
    }
}
