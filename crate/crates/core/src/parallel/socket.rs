//! TCP transport: a hub routes length-prefixed binary frames between
//! connected endpoints. Endpoints identify themselves with a hello frame;
//! afterwards any protocol message addressed to a known process id is
//! forwarded verbatim. The hub records the trace.
//!
//! Roles may live in one process (the default `run` path spawns them as
//! threads, each with its own TCP connection) or in separate processes on
//! other machines pointed at the hub's address.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::message::{Envelope, Message, ProcessId};
use super::transport::{TraceSink, Transport, TransportError};
use super::wire::{decode_frame, encode_envelope, encode_hello, Frame};

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    if let Err(e) = stream.read_exact(&mut len_bytes) {
        return match e.kind() {
            std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset => Ok(None),
            _ => Err(e),
        };
    }
    let len = u32::from_le_bytes(len_bytes) as usize;
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

struct HubShared {
    writers: Mutex<HashMap<ProcessId, TcpStream>>,
    /// Frames for endpoints that have not said hello yet.
    pending: Mutex<HashMap<ProcessId, Vec<Vec<u8>>>>,
    trace: TraceSink,
}

/// Frame router. Owns the listener; connections register via hello.
pub struct SocketHub {
    addr: SocketAddr,
    shared: Arc<HubShared>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl SocketHub {
    pub fn bind(addr: &str, expected: usize, trace: TraceSink) -> std::io::Result<SocketHub> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(HubShared {
            writers: Mutex::new(HashMap::new()),
            pending: Mutex::new(HashMap::new()),
            trace,
        });
        let accept_shared = Arc::clone(&shared);
        let accept_thread = std::thread::Builder::new()
            .name("socket-hub".into())
            .spawn(move || {
                let mut conn_threads = Vec::new();
                for _ in 0..expected {
                    let (stream, _) = match listener.accept() {
                        Ok(pair) => pair,
                        Err(_) => break,
                    };
                    stream.set_nodelay(true).ok();
                    let shared = Arc::clone(&accept_shared);
                    conn_threads.push(std::thread::spawn(move || connection_loop(stream, shared)));
                }
                for t in conn_threads {
                    t.join().ok();
                }
            })
            .expect("spawn hub thread");
        Ok(SocketHub { addr, shared, accept_thread: Some(accept_thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Drop all registered writers so connection loops wind down.
    pub fn shutdown(&mut self) {
        self.shared.writers.lock().unwrap().clear();
        if let Some(t) = self.accept_thread.take() {
            t.join().ok();
        }
    }
}

fn connection_loop(mut stream: TcpStream, shared: Arc<HubShared>) {
    // First frame must be the hello.
    let pid = match read_frame(&mut stream) {
        Ok(Some(body)) => match decode_frame(&body) {
            Ok(Frame::Hello { pid }) => pid as ProcessId,
            _ => return,
        },
        _ => return,
    };
    let reader = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut stream = stream;
    {
        // Register, then flush anything queued while we were connecting.
        let backlog = shared.pending.lock().unwrap().remove(&pid).unwrap_or_default();
        for bytes in backlog {
            if stream.write_all(&bytes).is_err() {
                return;
            }
        }
        shared.writers.lock().unwrap().insert(pid, stream);
    }
    let mut reader = reader;
    while let Ok(Some(body)) = read_frame(&mut reader) {
        let env = match decode_frame(&body) {
            Ok(Frame::Message(env)) => env,
            Ok(Frame::Hello { .. }) | Err(_) => continue,
        };
        shared.trace.record(&env);
        let bytes = encode_envelope(&env);
        let mut writers = shared.writers.lock().unwrap();
        match writers.get_mut(&env.to) {
            Some(writer) => {
                if writer.write_all(&bytes).is_err() {
                    writers.remove(&env.to);
                }
            }
            None => {
                drop(writers);
                shared.pending.lock().unwrap().entry(env.to).or_default().push(bytes);
            }
        }
    }
    shared.writers.lock().unwrap().remove(&pid);
}

/// Endpoint connected to a hub.
pub struct SocketTransport {
    id: ProcessId,
    writer: TcpStream,
    inbox: Receiver<Envelope>,
    next_seq: HashMap<ProcessId, u64>,
    _reader_thread: std::thread::JoinHandle<()>,
}

impl SocketTransport {
    pub fn connect(addr: SocketAddr, id: ProcessId) -> Result<SocketTransport, TransportError> {
        let mut writer =
            TcpStream::connect(addr).map_err(|e| TransportError::Io(e.to_string()))?;
        writer.set_nodelay(true).ok();
        writer
            .write_all(&encode_hello(id as u64))
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let mut reader = writer.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let reader_thread = std::thread::Builder::new()
            .name(format!("socket-rx-{id}"))
            .spawn(move || {
                while let Ok(Some(body)) = read_frame(&mut reader) {
                    match decode_frame(&body) {
                        Ok(Frame::Message(env)) => {
                            if tx.send(env).is_err() {
                                break;
                            }
                        }
                        _ => continue,
                    }
                }
            })
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(SocketTransport {
            id,
            writer,
            inbox: rx,
            next_seq: HashMap::new(),
            _reader_thread: reader_thread,
        })
    }
}

impl Transport for SocketTransport {
    fn local_id(&self) -> ProcessId {
        self.id
    }

    fn send(&mut self, to: ProcessId, message: Message) -> Result<(), TransportError> {
        let seq = self.next_seq.entry(to).or_insert(0);
        let env = Envelope { from: self.id, to, seq: *seq, message };
        *seq += 1;
        self.writer
            .write_all(&encode_envelope(&env))
            .map_err(|e| TransportError::Io(e.to_string()))
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
