//! Networked mode: edge client and server service over TCP.
//!
//! The server multiplexes sessions through the same scheduler the simulator
//! uses: connection handlers enqueue requests, a single verifier thread
//! drains the queue work-conservingly, batching whatever is pending up to
//! the configured capacity. One connection carries one session; a session's
//! failure (malformed frame, lost connection) closes only that session.
//!
//! Token outputs are bit-identical to the simulator under equal seeds: the
//! edge state machine is the same code, metric timings fed to the depth
//! calibration come from the same modeled latency streams, and every verify
//! draw derives from `(seed, session, seq)`. Wall-clock time appears only in
//! trace timestamps.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lm::{StreamPurpose, TokenId};
use crate::metrics::RunTrace;
use crate::proactive::RoundRecord;
use crate::scheduler::{batch_verify, ServerSessions, VerifyQueue, VerifyRequest, VerifyResponse};
use crate::session::{RoundTimings, SessionState};
use crate::simnet::one_way_delay;
use crate::wire::{self, SeqTracker, WireMessage};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

struct ServerState {
    queue: VerifyQueue,
    sessions: ServerSessions,
    responders: HashMap<u64, mpsc::Sender<VerifyResponse>>,
}

struct Shared {
    cfg: ExperimentConfig,
    state: Mutex<ServerState>,
    wakeup: Condvar,
    shutdown: AtomicBool,
    started: Instant,
}

/// Running server; shuts down on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.wakeup.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and serves until the handle is shut down. `bind` may use port 0 to
/// pick an ephemeral port; the bound address is on the handle.
pub fn serve(bind: &str, cfg: &ExperimentConfig) -> Result<ServerHandle> {
    cfg.validate()?;
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;

    let shared = Arc::new(Shared {
        cfg: cfg.clone(),
        state: Mutex::new(ServerState {
            queue: VerifyQueue::new(),
            sessions: ServerSessions::new(),
            responders: HashMap::new(),
        }),
        wakeup: Condvar::new(),
        shutdown: AtomicBool::new(false),
        started: Instant::now(),
    });

    let mut threads = Vec::new();
    {
        let shared = shared.clone();
        threads.push(std::thread::spawn(move || accept_loop(listener, shared)));
    }
    {
        let shared = shared.clone();
        threads.push(std::thread::spawn(move || verifier_loop(shared)));
    }
    Ok(ServerHandle {
        addr,
        shared,
        threads,
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut handlers: Vec<std::thread::JoinHandle<()>> = Vec::new();
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = shared.clone();
                handlers.push(std::thread::spawn(move || {
                    // A failed session must not take the server down.
                    let _ = handle_connection(stream, shared);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(POLL_INTERVAL);
            }
            Err(_) => break,
        }
    }
    for h in handlers {
        let _ = h.join();
    }
}

/// Blocking read that stays responsive to shutdown.
fn read_frame_polling(stream: &mut TcpStream, shared: &Shared) -> Result<Option<Vec<u8>>> {
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let mut frame: Vec<u8> = Vec::new();
    let mut need = 4usize;
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(None);
        }
        let mut chunk = vec![0u8; need - frame.len()];
        match std::io::Read::read(stream, &mut chunk) {
            Ok(0) => {
                if frame.is_empty() {
                    return Ok(None);
                }
                return Err(Error::Decode("payload length: truncated frame".into()));
            }
            Ok(n) => {
                frame.extend_from_slice(&chunk[..n]);
                if frame.len() == 4 && need == 4 {
                    let payload_len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
                    need = wire::HEADER_LEN + payload_len;
                }
                if frame.len() == need && need > 4 {
                    return Ok(Some(frame));
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn handle_connection(mut stream: TcpStream, shared: Arc<Shared>) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut incoming_seq = SeqTracker::default();

    // First frame must introduce the session.
    let Some(frame) = read_frame_polling(&mut stream, &shared)? else {
        return Ok(());
    };
    let (session, prompt) = match wire::decode(&frame)? {
        WireMessage::Hello {
            session,
            seq,
            prompt,
        } => {
            incoming_seq.check(seq)?;
            (session, prompt)
        }
        other => return Err(Error::Protocol(format!("expected HELLO, got {other:?}"))),
    };

    let (tx, rx) = mpsc::channel::<VerifyResponse>();
    {
        let mut state = shared.state.lock().unwrap();
        if state.responders.contains_key(&session) {
            return Err(Error::Protocol(format!(
                "session {session} is already connected"
            )));
        }
        state.sessions.register(session, prompt);
        state.responders.insert(session, tx);
    }

    let result = serve_session(&mut stream, &shared, session, &mut incoming_seq, rx);

    let mut state = shared.state.lock().unwrap();
    state.sessions.remove(session);
    state.responders.remove(&session);
    state.queue.complete(session);
    result
}

fn serve_session(
    stream: &mut TcpStream,
    shared: &Shared,
    session: u64,
    incoming_seq: &mut SeqTracker,
    rx: mpsc::Receiver<VerifyResponse>,
) -> Result<()> {
    loop {
        let Some(frame) = read_frame_polling(stream, shared)? else {
            return Ok(());
        };
        match wire::decode(&frame)? {
            WireMessage::VerifyReq {
                session: s,
                seq,
                tree,
            } => {
                if s != session {
                    return Err(Error::Protocol(format!(
                        "frame for session {s} on session {session}'s connection"
                    )));
                }
                incoming_seq.check(seq)?;
                let now_ms = shared.started.elapsed().as_secs_f64() * 1e3;
                {
                    let mut state = shared.state.lock().unwrap();
                    state
                        .queue
                        .admit(VerifyRequest { session, seq, tree }, now_ms)?;
                }
                shared.wakeup.notify_all();
                let resp = rx
                    .recv()
                    .map_err(|_| Error::Protocol("verification rejected".into()))?;
                stream.write_all(&wire::encode(&WireMessage::VerifyResp {
                    session,
                    seq: resp.seq,
                    accepted: resp.accepted,
                    bonus: resp.bonus,
                }))?;
            }
            WireMessage::Bye { .. } => return Ok(()),
            other => return Err(Error::Protocol(format!("unexpected message {other:?}"))),
        }
    }
}

fn verifier_loop(shared: Arc<Shared>) {
    let Ok(target) = shared.cfg.build_target() else {
        return;
    };
    let capacity = shared.cfg.effective_capacity();
    let mut state = shared.state.lock().unwrap();
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let Some(plan) = state.queue.plan_batch(capacity) else {
            let (guard, _) = shared.wakeup.wait_timeout(state, POLL_INTERVAL).unwrap();
            state = guard;
            continue;
        };
        let results = batch_verify(&plan, &target, &mut state.sessions, shared.cfg.seed);
        for (session, result) in results {
            state.queue.complete(session);
            match result {
                // Dropping the responder without a reply closes the session.
                Ok(resp) => {
                    if let Some(tx) = state.responders.get(&session) {
                        let _ = tx.send(resp);
                    }
                }
                Err(_) => {
                    state.responders.remove(&session);
                }
            }
        }
    }
}

/// Output of one edge session run over the wire.
#[derive(Debug, Clone)]
pub struct EdgeRun {
    pub generated: Vec<TokenId>,
    pub rounds: Vec<RoundRecord>,
}

/// Runs one session against a server: draft, send, expand proactively,
/// receive, update, until `max_new_tokens`.
pub fn edge_session(addr: &str, cfg: &ExperimentConfig, session_id: u64) -> Result<EdgeRun> {
    cfg.validate()?;
    let draft = cfg.build_draft()?;
    let latency = cfg.latency_model();
    let prompt = cfg.prompt_for_session(session_id);
    let mut state = SessionState::new(cfg.edge_session_config(session_id), &prompt);

    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let started = Instant::now();
    let mut resp_seq = SeqTracker::default();

    stream.write_all(&wire::encode(&WireMessage::Hello {
        session: session_id,
        seq: 0,
        prompt,
    }))?;

    let mut rounds = Vec::new();
    while !state.is_done() {
        let rs = state.begin_round(&draft)?;
        stream.write_all(&wire::encode(&WireMessage::VerifyReq {
            session: session_id,
            seq: rs.seq,
            tree: rs.tree,
        }))?;
        // Keep drafting while the server verifies.
        state.expand_proactive(&draft);

        let frame = wire::read_frame(&mut stream)?
            .ok_or_else(|| Error::Protocol("connection closed mid-session".into()))?;
        let resp = match wire::decode(&frame)? {
            WireMessage::VerifyResp {
                session,
                seq,
                accepted,
                bonus,
            } => {
                resp_seq.check(seq)?;
                VerifyResponse {
                    session,
                    seq,
                    accepted,
                    bonus,
                }
            }
            other => return Err(Error::Protocol(format!("unexpected message {other:?}"))),
        };

        // Depth calibration runs on the modeled network, exactly as in the
        // simulator, so both modes walk identical depth trajectories.
        let rtt_obs = one_way_delay(
            &latency,
            cfg.seed,
            session_id,
            rs.seq as u64,
            StreamPurpose::JitterRequest,
        ) + one_way_delay(
            &latency,
            cfg.seed,
            session_id,
            rs.seq as u64,
            StreamPurpose::JitterResponse,
        );
        let timings = RoundTimings {
            verify_ms: latency.verify_ms,
            draft_pass_ms: latency.draft_pass_effective(),
            rtt_ms: rtt_obs,
        };
        let now_ms = started.elapsed().as_secs_f64() * 1e3;
        rounds.push(state.complete_round(&resp, timings, now_ms)?);
    }
    let _ = stream.write_all(&wire::encode(&WireMessage::Bye {
        session: session_id,
        seq: state.committed().len() as u32 + 1,
    }));
    Ok(EdgeRun {
        generated: state.generated().to_vec(),
        rounds,
    })
}

/// Spins up a loopback server, runs every configured session concurrently,
/// and returns per-session generated tokens plus a wall-clock round trace.
pub fn run_wire_loopback(
    cfg: &ExperimentConfig,
) -> Result<(BTreeMap<u64, Vec<TokenId>>, RunTrace)> {
    let server = serve("127.0.0.1:0", cfg)?;
    let addr = server.addr().to_string();

    let mut joins = Vec::new();
    for s in 0..cfg.sessions as u64 {
        let cfg = cfg.clone();
        let addr = addr.clone();
        joins.push(std::thread::spawn(move || {
            (s, edge_session(&addr, &cfg, s))
        }));
    }
    let mut committed = BTreeMap::new();
    let mut trace = RunTrace::default();
    let mut first_err = None;
    for j in joins {
        let (s, result) = j
            .join()
            .map_err(|_| Error::Protocol("edge thread panicked".into()))?;
        match result {
            Ok(run) => {
                committed.insert(s, run.generated);
                let span = run
                    .rounds
                    .iter()
                    .map(|r| r.commit_time_ms)
                    .fold(trace.span_ms, f64::max);
                trace.span_ms = span;
                trace.rounds.extend(run.rounds);
            }
            Err(e) => first_err = Some(e),
        }
    }
    server.shutdown();
    match first_err {
        Some(e) => Err(e),
        None => Ok((committed, trace)),
    }
}
