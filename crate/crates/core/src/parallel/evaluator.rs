//! Controller-side evaluation layer and the worker loop.
//!
//! A controller with workers broadcasts every density evaluation to all
//! of them and consumes results only once each worker has answered, so
//! user models can assume lock-step parallelism. A controller without
//! workers evaluates in line through the same interface. Model results
//! that are non-finite without being negative infinity are marked as
//! evaluation errors and delivered as negative infinity, which rejects
//! the proposal instead of crashing the chain.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::DVector;

use super::message::{
    Envelope, EvalKind, EvalTarget, Message, ProcessId, ProposalSample, Reassignment,
    RequesterKind, SamplePayloadBody,
};
use super::transport::Transport;
use crate::hierarchy::{GroupComm, HierarchyFactory, SamplingProblem};

/// Outcome of one remote or in-line model evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub log_density: f64,
    pub qoi: Option<DVector<f64>>,
    pub error: Option<String>,
}

impl EvalOutcome {
    fn failed(reason: &str) -> Self {
        Self { log_density: f64::NEG_INFINITY, qoi: None, error: Some(reason.to_string()) }
    }
}

/// Map a raw model density to the delivered value plus an error mark for
/// anything non-finite other than negative infinity.
pub fn density_policy(raw: f64) -> (f64, Option<String>) {
    if raw.is_nan() {
        (f64::NEG_INFINITY, Some("model evaluation returned NaN".to_string()))
    } else if raw == f64::INFINITY {
        (f64::NEG_INFINITY, Some("model evaluation returned +inf".to_string()))
    } else {
        (raw, None)
    }
}

enum Backend {
    Inline {
        fine: Box<dyn SamplingProblem>,
        coarse: Option<Box<dyn SamplingProblem>>,
    },
    Group {
        workers: Vec<ProcessId>,
    },
}

/// Transport plus evaluation backend of one controller. Shared between
/// the controller loop and the chain objects that evaluate through it.
pub struct ControllerIo {
    transport: Box<dyn Transport>,
    backend: Backend,
    epoch: u64,
    eval_seq: u64,
    next_request: u64,
    pending: VecDeque<Envelope>,
    failure: Option<String>,
    eval_timeout: Duration,
    evaluations: u64,
    eval_seconds: f64,
}

#[derive(Clone)]
pub struct SharedIo(Arc<Mutex<ControllerIo>>);

impl SharedIo {
    pub fn new(transport: Box<dyn Transport>, eval_timeout: Duration) -> Self {
        SharedIo(Arc::new(Mutex::new(ControllerIo {
            transport,
            backend: Backend::Group { workers: Vec::new() },
            epoch: 0,
            eval_seq: 0,
            next_request: 0,
            pending: VecDeque::new(),
            failure: None,
            eval_timeout,
            evaluations: 0,
            eval_seconds: 0.0,
        })))
    }

    pub fn lock(&self) -> MutexGuard<'_, ControllerIo> {
        self.0.lock().unwrap()
    }

    pub fn evaluate(&self, target: EvalTarget, kind: EvalKind, theta: &DVector<f64>) -> EvalOutcome {
        self.lock().evaluate(target, kind, theta)
    }
}

impl ControllerIo {
    pub fn local_id(&self) -> ProcessId {
        self.transport.local_id()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn clear_failure(&mut self) {
        self.failure = None;
    }

    /// Chunk counters: evaluations and total evaluation seconds so far.
    pub fn counters(&self) -> (u64, f64) {
        (self.evaluations, self.eval_seconds)
    }

    pub fn reset_counters(&mut self) {
        self.evaluations = 0;
        self.eval_seconds = 0.0;
    }

    /// Install the evaluation backend for a new assignment epoch.
    pub fn install_inline(
        &mut self,
        epoch: u64,
        fine: Box<dyn SamplingProblem>,
        coarse: Option<Box<dyn SamplingProblem>>,
    ) {
        self.epoch = epoch;
        self.backend = Backend::Inline { fine, coarse };
    }

    pub fn install_group(&mut self, epoch: u64, workers: Vec<ProcessId>) {
        self.epoch = epoch;
        self.backend = Backend::Group { workers };
    }

    pub fn send(&mut self, to: ProcessId, message: Message) {
        if let Err(e) = self.transport.send(to, message) {
            if self.failure.is_none() {
                self.failure = Some(format!("send to {to} failed: {e}"));
            }
        }
    }

    /// Next message for the controller loop: deferred mail first.
    pub fn next_message(&mut self, timeout: Duration) -> Option<Envelope> {
        if let Some(env) = self.pending.pop_front() {
            return Some(env);
        }
        match self.transport.recv_timeout(timeout) {
            Ok(found) => found,
            Err(_) => {
                self.failure.get_or_insert_with(|| "transport closed".to_string());
                None
            }
        }
    }

    fn evaluate(&mut self, target: EvalTarget, kind: EvalKind, theta: &DVector<f64>) -> EvalOutcome {
        if let Some(reason) = &self.failure {
            return EvalOutcome::failed(&reason.clone());
        }
        let t0 = Instant::now();
        let outcome = match &mut self.backend {
            Backend::Inline { fine, coarse } => {
                let problem = match target {
                    EvalTarget::Fine => fine.as_mut(),
                    EvalTarget::Coarse => match coarse.as_mut() {
                        Some(c) => c.as_mut(),
                        None => return EvalOutcome::failed("no coarse model installed"),
                    },
                };
                match kind {
                    EvalKind::Density => {
                        let (value, error) = density_policy(problem.log_density(theta));
                        EvalOutcome { log_density: value, qoi: None, error }
                    }
                    EvalKind::Qoi => EvalOutcome {
                        log_density: f64::NAN,
                        qoi: Some(problem.qoi(theta)),
                        error: None,
                    },
                }
            }
            Backend::Group { workers } => {
                let workers = workers.clone();
                self.eval_seq += 1;
                let eval = self.eval_seq;
                let payload: Vec<f64> = theta.iter().copied().collect();
                for &w in &workers {
                    let message = Message::EvaluateDensity {
                        epoch: self.epoch,
                        eval,
                        target,
                        kind,
                        theta: payload.clone(),
                    };
                    if let Err(e) = self.transport.send(w, message) {
                        self.failure = Some(format!("worker {w} unreachable: {e}"));
                        return EvalOutcome::failed(self.failure.as_ref().unwrap());
                    }
                }
                // Lock step: consume nothing until every worker answered.
                let deadline = Instant::now() + self.eval_timeout;
                let mut first: Option<EvalOutcome> = None;
                let mut answers = 0usize;
                while answers < workers.len() {
                    let now = Instant::now();
                    if now >= deadline {
                        self.failure = Some("worker evaluation timed out".to_string());
                        return EvalOutcome::failed(self.failure.as_ref().unwrap());
                    }
                    match self.transport.recv_timeout(deadline - now) {
                        Ok(Some(env)) => match &env.message {
                            Message::DensityResult {
                                epoch,
                                eval: result_eval,
                                log_density,
                                qoi,
                                error,
                            } if *epoch == self.epoch && *result_eval == eval => {
                                answers += 1;
                                if first.is_none() {
                                    first = Some(EvalOutcome {
                                        log_density: *log_density,
                                        qoi: qoi
                                            .as_ref()
                                            .map(|q| DVector::from_column_slice(q)),
                                        error: error.clone(),
                                    });
                                }
                            }
                            // Stale results from a previous epoch or eval
                            // are dropped; anything else waits its turn.
                            Message::DensityResult { .. } => {}
                            _ => self.pending.push_back(env),
                        },
                        Ok(None) => {
                            self.failure = Some("worker evaluation timed out".to_string());
                            return EvalOutcome::failed(self.failure.as_ref().unwrap());
                        }
                        Err(e) => {
                            self.failure = Some(format!("transport failed: {e}"));
                            return EvalOutcome::failed(self.failure.as_ref().unwrap());
                        }
                    }
                }
                first.expect("at least one worker answered")
            }
        };
        self.evaluations += 1;
        self.eval_seconds += t0.elapsed().as_secs_f64();
        outcome
    }

    /// Fetch one coarse proposal from a remote provider via the phonebook.
    pub fn request_remote_proposal(
        &mut self,
        phonebook: ProcessId,
        level: usize,
    ) -> Result<ProposalSample, String> {
        self.next_request += 1;
        let request = self.next_request;
        let me = self.transport.local_id();
        self.send(
            phonebook,
            Message::SampleRequest { level, kind: RequesterKind::Chain, requester: me, request },
        );
        let deadline = Instant::now() + self.eval_timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err("remote coarse proposal timed out".to_string());
            }
            match self.transport.recv_timeout(deadline - now) {
                Ok(Some(env)) => match env.message {
                    Message::SamplePayload { request: id, body } if id == request => match body {
                        SamplePayloadBody::Proposal(p) => return Ok(p),
                        SamplePayloadBody::Unavailable => {
                            return Err("coarse proposal request cancelled".to_string())
                        }
                        SamplePayloadBody::Collection(_) => {
                            return Err("unexpected collection payload".to_string())
                        }
                    },
                    _ => self.pending.push_back(env),
                },
                Ok(None) => return Err("remote coarse proposal timed out".to_string()),
                Err(e) => return Err(format!("transport failed: {e}")),
            }
        }
    }
}

/// A level's sampling problem as seen from a chain: evaluation goes
/// through the controller's backend (workers or in-line models).
pub struct GroupProblem {
    io: SharedIo,
    target: EvalTarget,
    parameter_dim: usize,
    qoi_dim: usize,
}

impl GroupProblem {
    pub fn new(io: SharedIo, target: EvalTarget, parameter_dim: usize, qoi_dim: usize) -> Self {
        Self { io, target, parameter_dim, qoi_dim }
    }
}

impl SamplingProblem for GroupProblem {
    fn parameter_dim(&self) -> usize {
        self.parameter_dim
    }

    fn qoi_dim(&self) -> usize {
        self.qoi_dim
    }

    fn log_density(&mut self, theta: &DVector<f64>) -> f64 {
        self.io.evaluate(self.target, EvalKind::Density, theta).log_density
    }

    fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64> {
        // A failed evaluation leaves the failure mark set; the controller
        // aborts the chunk before this placeholder can enter the estimator.
        self.io
            .evaluate(self.target, EvalKind::Qoi, theta)
            .qoi
            .unwrap_or_else(|| DVector::zeros(self.qoi_dim))
    }
}

struct WorkerProblems {
    epoch: u64,
    level: usize,
    fine: Box<dyn SamplingProblem>,
    coarse: Option<Box<dyn SamplingProblem>>,
}

/// Worker role: construct the assigned level's models and answer
/// evaluation requests until shutdown. Stale-epoch requests are dropped.
pub fn worker_loop(
    mut transport: Box<dyn Transport>,
    group: usize,
    rank: usize,
    group_workers: usize,
    factory: Arc<dyn HierarchyFactory>,
) {
    let mut problems: Option<WorkerProblems> = None;
    loop {
        let env = match transport.recv() {
            Ok(env) => env,
            Err(_) => return,
        };
        match env.message {
            Message::AssignGroup(a) | Message::ReassignGroup(Reassignment::Directive(a)) => {
                let stale = problems
                    .as_ref()
                    .is_some_and(|p| a.epoch < p.epoch || (a.epoch == p.epoch && a.level == p.level));
                if stale {
                    continue;
                }
                let comm = GroupComm {
                    rank,
                    size: group_workers,
                    instance_seed: ((group as u64) << 32) ^ a.epoch,
                };
                let fine = match factory.sampling_problem(crate::hierarchy::LevelIndex(a.level), &comm)
                {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let coarse = if a.level > 0 {
                    factory
                        .sampling_problem(crate::hierarchy::LevelIndex(a.level - 1), &comm)
                        .ok()
                } else {
                    None
                };
                problems = Some(WorkerProblems { epoch: a.epoch, level: a.level, fine, coarse });
            }
            Message::EvaluateDensity { epoch, eval, target, kind, theta } => {
                let Some(p) = problems.as_mut() else { continue };
                if epoch != p.epoch {
                    continue;
                }
                let theta = DVector::from_vec(theta);
                let problem = match target {
                    EvalTarget::Fine => p.fine.as_mut(),
                    EvalTarget::Coarse => match p.coarse.as_mut() {
                        Some(c) => c.as_mut(),
                        None => continue,
                    },
                };
                let reply = match kind {
                    EvalKind::Density => {
                        let (value, error) = density_policy(problem.log_density(&theta));
                        Message::DensityResult { epoch, eval, log_density: value, qoi: None, error }
                    }
                    EvalKind::Qoi => Message::DensityResult {
                        epoch,
                        eval,
                        log_density: f64::NAN,
                        qoi: Some(problem.qoi(&theta).iter().copied().collect()),
                        error: None,
                    },
                };
                if transport.send(env.from, reply).is_err() {
                    return;
                }
            }
            Message::Shutdown => return,
            _ => {}
        }
    }
}
