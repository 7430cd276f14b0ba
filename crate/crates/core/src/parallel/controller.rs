//! Controller role: runs the (multilevel) chain for its current
//! assignment, dispatches every model evaluation to its worker group,
//! announces produced samples to the phonebook, serves them on forwarded
//! requests, and obeys reassignment directives between kernel steps (an
//! in-flight evaluation always completes first).

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::DVector;

use super::evaluator::{GroupProblem, SharedIo};
use super::message::{
    CoarseMode, CollectionSample, EvalTarget, GroupAssignment, LoadInfo, Message, ProcessId,
    ProposalSample, Reassignment, RequesterKind, SamplePayloadBody, SamplePurpose,
};
use crate::chain::{ChainState, MetropolisHastings};
use crate::hierarchy::{GroupComm, HierarchyFactory, LevelIndex};
use crate::multilevel::{
    CoarseProposalSource, CoarseSample, LocalCoarseChain, MultilevelError, TwoLevelKernel,
};
use crate::probability::{RngStream, StreamPurpose};

pub struct ControllerConfig {
    pub group: usize,
    pub workers: Vec<ProcessId>,
    pub root: ProcessId,
    pub phonebook: ProcessId,
    pub master_seed: u64,
    pub eval_timeout: Duration,
    /// Burn-in per level, used by embedded coarse chains.
    pub burn_in: Vec<u64>,
    /// Announce subsampled proposal samples for remote consumers.
    pub serve_proposals: bool,
}

/// Coarse proposals fetched from another controller through the phonebook.
struct RemoteCoarseSource {
    io: SharedIo,
    phonebook: ProcessId,
    level: usize,
}

impl CoarseProposalSource for RemoteCoarseSource {
    fn next_proposal(&mut self) -> Result<CoarseSample, MultilevelError> {
        let payload = self
            .io
            .lock()
            .request_remote_proposal(self.phonebook, self.level)
            .map_err(MultilevelError::CoarseSource)?;
        Ok(CoarseSample {
            theta: DVector::from_vec(payload.theta),
            log_density: payload.log_density,
            qoi: DVector::from_vec(payload.qoi),
        })
    }
}

#[derive(Default)]
struct SampleBuffers {
    collection: VecDeque<CollectionSample>,
    proposal: VecDeque<ProposalSample>,
}

enum ChainKind {
    Base { kernel: MetropolisHastings, rng: RngStream },
    TwoLevel { kernel: TwoLevelKernel, rng: RngStream },
}

struct ActiveChain {
    assignment: GroupAssignment,
    kind: ChainKind,
    problem: GroupProblem,
    state: ChainState,
    produced: u64,
    reported: u64,
    proposal_stride: u64,
}

enum Event {
    None,
    NewAssignment(GroupAssignment),
    Shutdown,
}

pub fn controller_loop(
    io: SharedIo,
    cfg: ControllerConfig,
    factory: Arc<dyn HierarchyFactory>,
) {
    let mut buffers = SampleBuffers::default();
    let mut active: Option<ActiveChain> = None;
    loop {
        let idle = active
            .as_ref()
            .map(|c| c.produced >= c.assignment.quota)
            .unwrap_or(true);
        let timeout = if idle { Duration::from_millis(200) } else { Duration::ZERO };
        let env = io.lock().next_message(timeout);
        let event = match env {
            Some(env) => handle_mail(&io, &cfg, env, &mut buffers),
            None => Event::None,
        };
        match event {
            Event::Shutdown => return,
            Event::NewAssignment(assignment) => {
                let extension = active.as_ref().is_some_and(|c| {
                    c.assignment.epoch == assignment.epoch
                        && c.assignment.chain == assignment.chain
                });
                let stale = active
                    .as_ref()
                    .is_some_and(|c| assignment.epoch < c.assignment.epoch);
                if extension {
                    // Same chain, larger quota: keep sampling in place.
                    let chain = active.as_mut().unwrap();
                    chain.assignment.quota = chain.assignment.quota.max(assignment.quota);
                } else if !stale {
                    finish_chunk(&io, &cfg, &mut active);
                    match start_chain(&io, &cfg, &factory, assignment) {
                        Ok(chain) => active = Some(chain),
                        Err(reason) => {
                            report_dead_assignment(&io, &cfg, &reason);
                            active = None;
                        }
                    }
                }
            }
            Event::None => {}
        }
        // Extension grants re-open a finished chain in place.
        if let Some(chain) = active.as_mut() {
            if chain.produced < chain.assignment.quota {
                match produce_one(&io, &cfg, chain, &mut buffers) {
                    Ok(()) => {
                        if chain.produced >= chain.assignment.quota {
                            report_chunk(&io, &cfg, chain, false);
                        }
                    }
                    Err(reason) => {
                        report_group_dead(&io, &cfg, chain, &reason);
                        active = None;
                    }
                }
            }
        }
    }
}

fn handle_mail(
    io: &SharedIo,
    _cfg: &ControllerConfig,
    env: super::message::Envelope,
    buffers: &mut SampleBuffers,
) -> Event {
    match env.message {
        Message::Shutdown => Event::Shutdown,
        Message::AssignGroup(a) => Event::NewAssignment(a),
        Message::ReassignGroup(Reassignment::Directive(a)) => Event::NewAssignment(a),
        Message::SampleRequest { kind, requester, request, .. } => {
            let body = match kind {
                RequesterKind::Collector => match buffers.collection.pop_front() {
                    Some(row) => SamplePayloadBody::Collection(row),
                    None => SamplePayloadBody::Unavailable,
                },
                RequesterKind::Chain => match buffers.proposal.pop_front() {
                    Some(p) => SamplePayloadBody::Proposal(p),
                    None => SamplePayloadBody::Unavailable,
                },
            };
            io.lock().send(requester, Message::SamplePayload { request, body });
            Event::None
        }
        _ => Event::None,
    }
}

/// Build the chain stack for a fresh assignment. Returns an error string
/// when model construction or the initial evaluations fail.
fn start_chain(
    io: &SharedIo,
    cfg: &ControllerConfig,
    factory: &Arc<dyn HierarchyFactory>,
    assignment: GroupAssignment,
) -> Result<ActiveChain, String> {
    let level = assignment.level;
    {
        let mut guard = io.lock();
        guard.clear_failure();
        guard.reset_counters();
        if cfg.workers.is_empty() {
            let comm = GroupComm {
                rank: 0,
                size: 1,
                instance_seed: ((cfg.group as u64) << 32) ^ assignment.epoch,
            };
            let fine = factory
                .sampling_problem(LevelIndex(level), &comm)
                .map_err(|e| e.to_string())?;
            let coarse = if level > 0 && assignment.coarse_mode == CoarseMode::Local {
                Some(
                    factory
                        .sampling_problem(LevelIndex(level - 1), &comm)
                        .map_err(|e| e.to_string())?,
                )
            } else {
                None
            };
            guard.install_inline(assignment.epoch, fine, coarse);
        } else {
            guard.install_group(assignment.epoch, cfg.workers.clone());
            for &w in &cfg.workers {
                guard.send(w, Message::AssignGroup(assignment.clone()));
            }
        }
        if let Some(reason) = guard.failure() {
            return Err(reason.to_string());
        }
    }
    // Dimensions come from a throwaway metadata instance.
    let meta = factory
        .sampling_problem(LevelIndex(level), &GroupComm::solo())
        .map_err(|e| e.to_string())?;
    let (fine_dim, qoi_dim) = (meta.parameter_dim(), meta.qoi_dim());
    drop(meta);

    let mut problem = GroupProblem::new(io.clone(), EvalTarget::Fine, fine_dim, qoi_dim);
    let proposal_stride = factory.subsampling_rate(LevelIndex(level)) as u64 + 1;
    let fine_rng = RngStream::for_chain(
        cfg.master_seed,
        level,
        assignment.chain,
        StreamPurpose::FineChain,
    );

    if level == 0 {
        let mut kernel = MetropolisHastings::new(factory.proposal(LevelIndex(0)));
        let mut rng = fine_rng;
        let mut state = ChainState::at_start(factory.starting_point(LevelIndex(0)), &mut problem)
            .map_err(|e| e.to_string())?;
        check_failure(io)?;
        for _ in 0..assignment.burn_in {
            crate::chain::mh_step(&mut state, &mut problem, kernel.proposal.as_mut(), &mut rng);
            check_failure(io)?;
        }
        Ok(ActiveChain {
            assignment,
            kind: ChainKind::Base { kernel, rng },
            problem,
            state,
            produced: 0,
            reported: 0,
            proposal_stride,
        })
    } else {
        let source: Box<dyn CoarseProposalSource> = match assignment.coarse_mode {
            CoarseMode::Local => {
                let coarse_meta = factory
                    .sampling_problem(LevelIndex(level - 1), &GroupComm::solo())
                    .map_err(|e| e.to_string())?;
                let coarse_dims = (coarse_meta.parameter_dim(), coarse_meta.qoi_dim());
                drop(coarse_meta);
                let coarse_problem = Box::new(GroupProblem::new(
                    io.clone(),
                    EvalTarget::Coarse,
                    coarse_dims.0,
                    coarse_dims.1,
                ));
                let coarse_burn_in =
                    cfg.burn_in.get(level - 1).copied().unwrap_or(0) as usize;
                let source = LocalCoarseChain::new(
                    coarse_problem,
                    factory.proposal(LevelIndex(level - 1)),
                    factory.starting_point(LevelIndex(level - 1)),
                    coarse_burn_in,
                    factory.subsampling_rate(LevelIndex(level - 1)),
                    RngStream::for_chain(
                        cfg.master_seed,
                        level,
                        assignment.chain,
                        StreamPurpose::CoarseChain,
                    ),
                )
                .map_err(|e| e.to_string())?;
                check_failure(io)?;
                Box::new(source)
            }
            CoarseMode::Remote => Box::new(RemoteCoarseSource {
                io: io.clone(),
                phonebook: cfg.phonebook,
                level: level - 1,
            }),
        };
        let interpolation = factory.interpolation(LevelIndex(level));
        let extra_dim = interpolation.extra_dim();
        let fine_proposal = if extra_dim > 0 { Some(factory.proposal(LevelIndex(level))) } else { None };
        let extra_start = if extra_dim > 0 {
            interpolation
                .split(&factory.starting_point(LevelIndex(level)))
                .map_err(|e| e.to_string())?
                .1
        } else {
            DVector::zeros(0)
        };
        let (mut kernel, mut state) = TwoLevelKernel::initialize(
            source,
            fine_proposal,
            interpolation,
            extra_start,
            &mut problem,
        )
        .map_err(|e| e.to_string())?;
        check_failure(io)?;
        let mut rng = fine_rng;
        for _ in 0..assignment.burn_in {
            kernel
                .step(&mut state, &mut problem, &mut rng, false)
                .map_err(|e| e.to_string())?;
            check_failure(io)?;
        }
        Ok(ActiveChain {
            assignment,
            kind: ChainKind::TwoLevel { kernel, rng },
            problem,
            state,
            produced: 0,
            reported: 0,
            proposal_stride,
        })
    }
}

fn check_failure(io: &SharedIo) -> Result<(), String> {
    match io.lock().failure() {
        Some(reason) => Err(reason.to_string()),
        None => Ok(()),
    }
}

/// One post-burn-in sample: step the kernel, build the estimator row,
/// buffer it and announce it to the phonebook.
fn produce_one(
    io: &SharedIo,
    cfg: &ControllerConfig,
    chain: &mut ActiveChain,
    buffers: &mut SampleBuffers,
) -> Result<(), String> {
    let me = io.lock().local_id();
    let (accepted, value, own_qoi) = match &mut chain.kind {
        ChainKind::Base { kernel, rng } => {
            let accepted = crate::chain::mh_step(
                &mut chain.state,
                &mut chain.problem,
                kernel.proposal.as_mut(),
                rng,
            );
            check_failure(io)?;
            let qoi = chain.state.qoi(&mut chain.problem).clone();
            check_failure(io)?;
            let qoi_vec: Vec<f64> = qoi.iter().copied().collect();
            (accepted, qoi_vec.clone(), qoi_vec)
        }
        ChainKind::TwoLevel { kernel, rng } => {
            let outcome = kernel
                .step(&mut chain.state, &mut chain.problem, rng, true)
                .map_err(|e| e.to_string())?;
            check_failure(io)?;
            let pair = outcome.correction.expect("correction requested");
            let difference: Vec<f64> = pair.difference().iter().copied().collect();
            let own: Vec<f64> = pair.fine.iter().copied().collect();
            (outcome.accepted, difference, own)
        }
    };
    chain.produced += 1;
    let row = CollectionSample {
        level: chain.assignment.level,
        chain: chain.assignment.chain,
        step: chain.state.step,
        accepted,
        theta: chain.state.position.iter().copied().collect(),
        log_density: chain.state.log_density,
        value,
    };
    buffers.collection.push_back(row);
    {
        let mut guard = io.lock();
        guard.send(
            cfg.phonebook,
            Message::SampleReady {
                level: chain.assignment.level,
                chain: chain.assignment.chain,
                provider: me,
                purpose: SamplePurpose::Collection,
            },
        );
        if cfg.serve_proposals && (chain.produced - 1) % chain.proposal_stride == 0 {
            buffers.proposal.push_back(ProposalSample {
                theta: chain.state.position.iter().copied().collect(),
                log_density: chain.state.log_density,
                qoi: own_qoi,
            });
            guard.send(
                cfg.phonebook,
                Message::SampleReady {
                    level: chain.assignment.level,
                    chain: chain.assignment.chain,
                    provider: me,
                    purpose: SamplePurpose::Proposal,
                },
            );
        }
        if let Some(reason) = guard.failure() {
            return Err(reason.to_string());
        }
    }
    Ok(())
}

/// Report quota accounting for the chunk in progress, if any.
fn finish_chunk(io: &SharedIo, cfg: &ControllerConfig, active: &mut Option<ActiveChain>) {
    if let Some(chain) = active.as_mut() {
        report_chunk(io, cfg, chain, true);
    }
}

fn report_chunk(io: &SharedIo, cfg: &ControllerConfig, chain: &mut ActiveChain, aborted: bool) {
    let delta = chain.produced - chain.reported;
    chain.reported = chain.produced;
    let returned = if aborted { chain.assignment.quota - chain.produced } else { 0 };
    let mut guard = io.lock();
    let (evaluations, seconds) = guard.counters();
    guard.reset_counters();
    let mean_eval_ms = if evaluations > 0 { seconds * 1e3 / evaluations as f64 } else { 0.0 };
    guard.send(
        cfg.root,
        Message::LoadReport(LoadInfo::ChunkComplete {
            group: cfg.group,
            epoch: chain.assignment.epoch,
            level: chain.assignment.level,
            chain: chain.assignment.chain,
            produced: delta,
            returned,
            evaluations,
            mean_eval_ms,
        }),
    );
}

fn report_group_dead(io: &SharedIo, cfg: &ControllerConfig, chain: &ActiveChain, reason: &str) {
    let mut guard = io.lock();
    let message = Message::LoadReport(LoadInfo::GroupDead {
        group: cfg.group,
        epoch: chain.assignment.epoch,
        level: chain.assignment.level,
        chain: chain.assignment.chain,
        produced: chain.produced - chain.reported,
        returned: chain.assignment.quota - chain.produced,
        reason: reason.to_string(),
    });
    guard.send(cfg.root, message.clone());
    guard.send(cfg.phonebook, message);
}

fn report_dead_assignment(io: &SharedIo, cfg: &ControllerConfig, reason: &str) {
    // Construction failed before any sample was produced; the quota is
    // unknown here, so the root reconstructs it from its grant table.
    let mut guard = io.lock();
    let message = Message::LoadReport(LoadInfo::GroupDead {
        group: cfg.group,
        epoch: guard.epoch(),
        level: usize::MAX,
        chain: 0,
        produced: 0,
        returned: 0,
        reason: reason.to_string(),
    });
    guard.send(cfg.root, message.clone());
    guard.send(cfg.phonebook, message);
}
