//! Message transport between roles: an in-process channel network for
//! single-machine runs and deterministic testing, plus the trait the
//! socket transport implements as well.
//!
//! Sequence numbers increase strictly per (sender, receiver) pair; every
//! send is recorded in the shared trace with a timestamp relative to the
//! network's start instant.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::message::{Envelope, Message, ProcessId, TraceEvent};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} is unreachable")]
    Disconnected(ProcessId),
    #[error("transport closed")]
    Closed,
    #[error("io: {0}")]
    Io(String),
    #[error("codec: {0}")]
    Codec(String),
}

/// Shared send-side trace of every message in flight.
#[derive(Clone)]
pub struct TraceSink {
    start: Instant,
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self { start: Instant::now(), events: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    pub fn record(&self, env: &Envelope) {
        let event = TraceEvent {
            timestamp_ns: self.now_ns(),
            from: env.from,
            to: env.to,
            tag: env.message.tag(),
            seq: env.seq,
        };
        self.events.lock().unwrap().push(event);
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl Default for TraceSink {
    fn default() -> Self {
        Self::new()
    }
}

pub trait Transport: Send {
    fn local_id(&self) -> ProcessId;

    fn send(&mut self, to: ProcessId, message: Message) -> Result<(), TransportError>;

    /// Blocking receive.
    fn recv(&mut self) -> Result<Envelope, TransportError>;

    /// Receive with a deadline; `Ok(None)` on timeout.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError>;
}

/// Channel-backed endpoint of the in-process network.
pub struct InProcessTransport {
    id: ProcessId,
    senders: Arc<Vec<Sender<Envelope>>>,
    inbox: Receiver<Envelope>,
    next_seq: Vec<u64>,
    trace: TraceSink,
}

impl Transport for InProcessTransport {
    fn local_id(&self) -> ProcessId {
        self.id
    }

    fn send(&mut self, to: ProcessId, message: Message) -> Result<(), TransportError> {
        let seq = self.next_seq[to];
        self.next_seq[to] += 1;
        let env = Envelope { from: self.id, to, seq, message };
        self.trace.record(&env);
        self.senders
            .get(to)
            .ok_or(TransportError::Disconnected(to))?
            .send(env)
            .map_err(|_| TransportError::Disconnected(to))
    }

    fn recv(&mut self) -> Result<Envelope, TransportError> {
        self.inbox.recv().map_err(|_| TransportError::Closed)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        match self.inbox.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

impl InProcessTransport {
    /// Drain anything already queued without blocking.
    pub fn try_drain(&mut self) -> Vec<Envelope> {
        let mut out = Vec::new();
        loop {
            match self.inbox.try_recv() {
                Ok(env) => out.push(env),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        out
    }
}

/// Build a fully connected in-process network of `n` endpoints sharing
/// one trace.
pub fn in_process_network(n: usize, trace: TraceSink) -> Vec<InProcessTransport> {
    let mut senders = Vec::with_capacity(n);
    let mut inboxes = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = mpsc::channel();
        senders.push(tx);
        inboxes.push(rx);
    }
    let senders = Arc::new(senders);
    inboxes
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| InProcessTransport {
            id,
            senders: Arc::clone(&senders),
            inbox,
            next_seq: vec![0; n],
            trace: trace.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::message::Tag;

    #[test]
    fn messages_arrive_in_order_with_increasing_seq() {
        let trace = TraceSink::new();
        let mut net = in_process_network(3, trace.clone());
        let mut c = net.pop().unwrap();
        let mut b = net.pop().unwrap();
        let mut a = net.pop().unwrap();
        a.send(1, Message::Shutdown).unwrap();
        a.send(1, Message::Shutdown).unwrap();
        a.send(2, Message::Shutdown).unwrap();
        let first = b.recv().unwrap();
        let second = b.recv().unwrap();
        assert_eq!((first.from, first.seq), (0, 0));
        assert_eq!((second.from, second.seq), (0, 1));
        assert_eq!(c.recv().unwrap().seq, 0);
        let events = trace.snapshot();
        assert_eq!(events.len(), 3);
        assert!(events.iter().all(|e| e.tag == Tag::Shutdown));
    }

    #[test]
    fn recv_timeout_expires_quietly() {
        let trace = TraceSink::new();
        let mut net = in_process_network(1, trace);
        let mut a = net.pop().unwrap();
        let got = a.recv_timeout(Duration::from_millis(5)).unwrap();
        assert!(got.is_none());
    }
}
