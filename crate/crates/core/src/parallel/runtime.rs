//! Launches a full parallel run: builds the transport network, spawns one
//! thread per process role, and assembles the run output from the root's
//! outcome.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::collector::{collector_loop, CollectorConfig};
use super::controller::{controller_loop, ControllerConfig};
use super::evaluator::{worker_loop, SharedIo};
use super::layout::{assign_roles, group_members, LayoutConfig, LayoutError, PHONEBOOK, ROOT};
use super::message::{
    CoarseMode, CollectionSample, DecisionRecord, Message, Role, TraceEvent,
};
use super::phonebook::{BalanceSettings, LoadLedger};
use super::root::{root_loop, PlanCollector, PlanGroup, RootOutcome, RootPlan};
use super::socket::{SocketHub, SocketTransport};
use super::transport::{in_process_network, TraceSink, Transport};
use crate::chain::iact;
use crate::hierarchy::{validate_factory, HierarchyError, HierarchyFactory, LevelIndex};
use crate::multilevel::{
    telescoping_estimate, EstimateError, EstimateKind, LevelEstimate, Telescoping,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("role thread failed: {0}")]
    RoleFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub layout: LayoutConfig,
    pub samples: Vec<u64>,
    pub burn_in: Vec<u64>,
    /// Dynamic grant chunk per level (0: one even split up front).
    pub chunk: Vec<u64>,
    pub load_balancing: bool,
    pub balance: BalanceSettings,
    pub coarse_mode: CoarseMode,
    pub master_seed: u64,
    pub transport: TransportKind,
    pub eval_timeout: Duration,
    pub collector_window: usize,
}

impl RuntimeConfig {
    pub fn levels(&self) -> usize {
        self.layout.levels
    }
}

/// Per-level digest of a finished run.
#[derive(Debug, Clone)]
pub struct LevelSummary {
    pub level: usize,
    pub kind: EstimateKind,
    pub estimate: LevelEstimate,
    pub rows: Vec<CollectionSample>,
    pub acceptance_rate: f64,
    /// Sample-weighted mean integrated autocorrelation time over the
    /// level's chains (component 0 of the level's estimator value).
    pub iact: Option<f64>,
    pub evaluations: u64,
    pub mean_eval_ms: f64,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub complete: bool,
    pub telescoping: Option<Telescoping>,
    pub levels: Vec<LevelSummary>,
    pub wall_time: Duration,
    pub trace: Vec<TraceEvent>,
    pub inferred_runtime_ms: Vec<f64>,
    pub reassignments: Vec<DecisionRecord>,
}

impl RunOutput {
    pub fn level(&self, level: usize) -> &LevelSummary {
        &self.levels[level]
    }
}

fn validate(config: &RuntimeConfig, factory: &dyn HierarchyFactory) -> Result<(), RuntimeError> {
    let levels = config.levels();
    if factory.finest_index().0 + 1 != levels {
        return Err(RuntimeError::Config(format!(
            "layout has {levels} levels but the hierarchy provides {}",
            factory.finest_index().0 + 1
        )));
    }
    for (name, len) in [
        ("samples", config.samples.len()),
        ("burn_in", config.burn_in.len()),
        ("chunk", config.chunk.len()),
        ("groups_per_level", config.layout.groups_per_level.len()),
    ] {
        if len != levels {
            return Err(RuntimeError::Config(format!(
                "{name} has {len} entries for {levels} levels"
            )));
        }
    }
    if !config.load_balancing {
        for level in 0..levels {
            if config.samples[level] > 0 && config.layout.groups_per_level[level] == 0 {
                return Err(RuntimeError::Config(format!(
                    "level {level} needs samples but has no groups and load balancing is off"
                )));
            }
        }
    }
    validate_factory(factory)?;
    Ok(())
}

/// Phonebook role: fold messages into the ledger, emit at most one
/// reassignment decision per tick, surrender the ledger summary at
/// shutdown.
fn phonebook_loop(mut transport: Box<dyn Transport>, levels: usize, settings: BalanceSettings) {
    let mut ledger = LoadLedger::new(levels, Instant::now());
    loop {
        match transport.recv_timeout(settings.tick) {
            Ok(Some(env)) => {
                if matches!(env.message, Message::Shutdown) {
                    for (to, message) in ledger.cancel_pending() {
                        let _ = transport.send(to, message);
                    }
                    let _ = transport.send(ROOT, Message::LoadReport(ledger.summary()));
                    return;
                }
                for (to, message) in ledger.handle(&env.message, Instant::now(), &settings) {
                    let _ = transport.send(to, message);
                }
            }
            Ok(None) => {
                if let Some(decision) = ledger.rebalance(Instant::now(), &settings) {
                    let _ = transport.send(
                        ROOT,
                        Message::ReassignGroup(super::message::Reassignment::Decision {
                            group: decision.group,
                            from_level: decision.from_level,
                            to_level: decision.to_level,
                        }),
                    );
                }
            }
            Err(_) => return,
        }
    }
}

/// Run an estimation on the configured transport; blocks until all role
/// threads have joined.
pub fn run_parallel(
    config: &RuntimeConfig,
    factory: Arc<dyn HierarchyFactory>,
) -> Result<RunOutput, RuntimeError> {
    validate(config, factory.as_ref())?;
    let started = Instant::now();
    let total = config.layout.minimum_processes();
    let roles = assign_roles(total, &config.layout)?;
    let trace = TraceSink::new();

    let mut transports: Vec<Box<dyn Transport>> = Vec::with_capacity(total);
    let mut hub = None;
    match config.transport {
        TransportKind::InProcess => {
            for endpoint in in_process_network(total, trace.clone()) {
                transports.push(Box::new(endpoint));
            }
        }
        TransportKind::Socket => {
            let socket_hub = SocketHub::bind("127.0.0.1:0", total, trace.clone())
                .map_err(|e| RuntimeError::Transport(e.to_string()))?;
            for pid in 0..total {
                let endpoint = SocketTransport::connect(socket_hub.addr(), pid)
                    .map_err(|e| RuntimeError::Transport(e.to_string()))?;
                transports.push(Box::new(endpoint));
            }
            hub = Some(socket_hub);
        }
    }

    let plan = RootPlan {
        levels: config.levels(),
        samples: config.samples.clone(),
        burn_in: config.burn_in.clone(),
        chunk: config.chunk.clone(),
        load_balancing: config.load_balancing,
        coarse_mode: config.coarse_mode,
        groups: (0..config.layout.groups)
            .map(|g| PlanGroup {
                controller: group_members(&config.layout, g)[0],
                initial_level: config.layout.initial_level(g),
            })
            .collect(),
        collectors: roles
            .iter()
            .enumerate()
            .filter_map(|(pid, role)| match role {
                Role::Collector { level, shard } => {
                    Some(PlanCollector { pid, level: *level, shard: *shard })
                }
                _ => None,
            })
            .collect(),
        phonebook: PHONEBOOK,
        other_pids: (1..total).collect(),
    };

    let balance = BalanceSettings { enabled: config.load_balancing, ..config.balance.clone() };
    let worker_count = config.layout.group_size - 1;
    let finest = config.levels() - 1;
    let serve_proposals = config.coarse_mode == CoarseMode::Remote;

    let (outcome_tx, outcome_rx) = std::sync::mpsc::channel::<RootOutcome>();
    let mut plan_slot = Some(plan);
    let mut handles = Vec::with_capacity(total);
    for (role, transport) in roles.iter().cloned().zip(transports.into_iter()) {
        let factory = Arc::clone(&factory);
        let builder =
            std::thread::Builder::new().name(format!("mlmcmc-{}", handles.len()));
        let handle = match role {
            Role::Root => {
                let plan = plan_slot.take().expect("single root");
                let tx = outcome_tx.clone();
                builder.spawn(move || {
                    let outcome = root_loop(transport, plan);
                    let _ = tx.send(outcome);
                })
            }
            Role::Phonebook => {
                let levels = config.levels();
                let settings = balance.clone();
                builder.spawn(move || phonebook_loop(transport, levels, settings))
            }
            Role::Collector { .. } => {
                let cfg = CollectorConfig {
                    root: ROOT,
                    phonebook: PHONEBOOK,
                    window: config.collector_window,
                };
                builder.spawn(move || collector_loop(transport, cfg))
            }
            Role::Controller { group, .. } => {
                let cfg = ControllerConfig {
                    group,
                    workers: group_members(&config.layout, group)[1..].to_vec(),
                    root: ROOT,
                    phonebook: PHONEBOOK,
                    master_seed: config.master_seed,
                    eval_timeout: config.eval_timeout,
                    burn_in: config.burn_in.clone(),
                    serve_proposals: serve_proposals && finest > 0,
                };
                let io = SharedIo::new(transport, config.eval_timeout);
                builder.spawn(move || controller_loop(io, cfg, factory))
            }
            Role::Worker { group, rank } => builder.spawn(move || {
                worker_loop(transport, group, rank, worker_count, factory)
            }),
            Role::IdleReserve => builder.spawn(move || {
                let mut transport = transport;
                loop {
                    match transport.recv() {
                        Ok(env) if matches!(env.message, Message::Shutdown) => return,
                        Ok(_) => {}
                        Err(_) => return,
                    }
                }
            }),
        }
        .map_err(|e| RuntimeError::RoleFailure(e.to_string()))?;
        handles.push(handle);
    }
    drop(outcome_tx);

    let mut failures = Vec::new();
    for handle in handles {
        let name = handle.thread().name().unwrap_or("?").to_string();
        if handle.join().is_err() {
            failures.push(name);
        }
    }
    if let Some(mut hub) = hub {
        hub.shutdown();
    }
    if !failures.is_empty() {
        return Err(RuntimeError::RoleFailure(format!(
            "panicked roles: {}",
            failures.join(", ")
        )));
    }
    let outcome = outcome_rx
        .try_recv()
        .map_err(|_| RuntimeError::RoleFailure("root produced no outcome".to_string()))?;

    Ok(assemble_output(outcome, started.elapsed(), trace.snapshot()))
}

fn assemble_output(
    outcome: RootOutcome,
    wall_time: Duration,
    trace: Vec<TraceEvent>,
) -> RunOutput {
    let mut levels = Vec::with_capacity(outcome.reports.len());
    let mut estimates = Vec::new();
    let mut all_complete = outcome.complete;
    for (level, report) in outcome.reports.iter().enumerate() {
        let kind = if level == 0 { EstimateKind::Base } else { EstimateKind::Correction };
        let (estimate, mut rows, complete) = match report {
            Some(r) => (
                LevelEstimate::from_raw_parts(
                    LevelIndex(level),
                    r.kind,
                    r.count,
                    nalgebra::DVector::from_column_slice(&r.mean),
                    nalgebra::DVector::from_column_slice(&r.m2),
                ),
                r.rows.clone(),
                r.complete,
            ),
            None => (LevelEstimate::new(LevelIndex(level), kind, 0), Vec::new(), false),
        };
        all_complete &= complete;
        rows.sort_by_key(|r| (r.chain, r.step));
        let accepted = rows.iter().filter(|r| r.accepted).count();
        let acceptance_rate =
            if rows.is_empty() { 0.0 } else { accepted as f64 / rows.len() as f64 };
        let iact_estimate = level_iact(&rows);
        let stats = outcome.eval_stats[level];
        let mean_eval_ms = if stats.evaluations > 0 {
            stats.total_seconds * 1e3 / stats.evaluations as f64
        } else {
            0.0
        };
        if estimate.count() > 0 {
            estimates.push(estimate.clone());
        }
        levels.push(LevelSummary {
            level,
            kind,
            estimate,
            rows,
            acceptance_rate,
            iact: iact_estimate,
            evaluations: stats.evaluations,
            mean_eval_ms,
            complete,
        });
    }
    let telescoping =
        if all_complete { telescoping_estimate(&estimates).ok() } else { None };
    RunOutput {
        complete: all_complete,
        telescoping,
        levels,
        wall_time,
        trace,
        inferred_runtime_ms: outcome.ema_ms,
        reassignments: outcome.decisions,
    }
}

/// Sample-weighted mean autocorrelation time over the level's chains,
/// measured on component 0 of the estimator values.
fn level_iact(rows: &[CollectionSample]) -> Option<f64> {
    let mut weighted = 0.0;
    let mut weight = 0.0;
    let mut start = 0;
    while start < rows.len() {
        let chain = rows[start].chain;
        let mut end = start;
        while end < rows.len() && rows[end].chain == chain {
            end += 1;
        }
        let series: Vec<f64> =
            rows[start..end].iter().filter_map(|r| r.value.first().copied()).collect();
        if let Ok(estimate) = iact(&series) {
            weighted += estimate.tau * series.len() as f64;
            weight += series.len() as f64;
        }
        start = end;
    }
    if weight > 0.0 {
        Some(weighted / weight)
    } else {
        None
    }
}
