//! Deterministic discrete-event simulator of edges, server, and network,
//! plus the baseline serving modes.
//!
//! A single logical event loop processes events in `(time, seq)` order; two
//! runs with the same config and seed produce identical traces. The RTT is
//! split symmetrically with uniform multiplicative jitter per one-way leg,
//! drawn from per-`(session, round, direction)` streams so the wire transport
//! can reproduce the exact same modeled delays.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::Deserialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lm::{sample, ModelOracle, RngStream, StreamPurpose, TokenId};
use crate::metrics::RunTrace;
use crate::proactive::RoundRecord;
use crate::scheduler::{BatchPlan, ServerSessions, VerifyQueue, VerifyRequest, VerifyResponse};
use crate::session::{RoundStart, RoundTimings, SessionState};

/// Serving mode under simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Mode {
    /// Full protocol: disaggregated drafting, proactive expansion,
    /// pipeline-aware scheduling.
    #[serde(rename = "specedge")]
    SpecEdge,
    /// Disaggregation alone: no proactive drafting, no batched interleaving.
    #[serde(rename = "disagg_naive")]
    DisaggNaive,
    /// Server does both drafting and verification, no network.
    #[serde(rename = "server_only_sd")]
    ServerOnlySd,
    /// Plain autoregressive decoding on the server.
    #[serde(rename = "server_only_ar")]
    ServerOnlyAr,
    /// Autoregressive decoding with part of the model on the edge: one
    /// round trip per token.
    #[serde(rename = "layer_split_ar")]
    LayerSplitAr,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SpecEdge => "specedge",
            Mode::DisaggNaive => "disagg_naive",
            Mode::ServerOnlySd => "server_only_sd",
            Mode::ServerOnlyAr => "server_only_ar",
            Mode::LayerSplitAr => "layer_split_ar",
        }
    }

    /// Modes that rent edge GPUs.
    pub fn uses_edges(&self) -> bool {
        matches!(
            self,
            Mode::SpecEdge | Mode::DisaggNaive | Mode::LayerSplitAr
        )
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specedge" => Ok(Mode::SpecEdge),
            "disagg_naive" => Ok(Mode::DisaggNaive),
            "server_only_sd" => Ok(Mode::ServerOnlySd),
            "server_only_ar" => Ok(Mode::ServerOnlyAr),
            "layer_split_ar" => Ok(Mode::LayerSplitAr),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Compute and network timing parameters.
#[derive(Debug, Clone)]
pub struct LatencyModel {
    pub rtt_ms: f64,
    /// Uniform multiplicative jitter (fraction) per one-way delay.
    pub rtt_jitter: f64,
    pub draft_pass_ms: f64,
    /// Concurrent requests drafted on one edge GPU.
    pub edge_batch: u32,
    /// Linear contention coefficient for edge batching.
    pub edge_batch_coef: f64,
    pub verify_ms: f64,
    /// Linear batch-scaling coefficient for verification.
    pub verify_batch_coef: f64,
    pub server_draft_pass_ms: f64,
    pub layer_split_edge_ms: f64,
    pub layer_split_server_ms: f64,
    pub autoregressive_step_ms: f64,
}

impl LatencyModel {
    /// Draft pass time including edge-batch contention.
    pub fn draft_pass_effective(&self) -> f64 {
        self.draft_pass_ms
            * (1.0 + self.edge_batch_coef * (self.edge_batch.saturating_sub(1)) as f64)
    }

    /// Service time of one verification batch. Length padding is covered by
    /// the batch coefficient; the padded length itself does not enter.
    pub fn verify_service(&self, batch: usize, _padded_len: u32) -> f64 {
        self.verify_ms * (1.0 + self.verify_batch_coef * (batch.saturating_sub(1)) as f64)
    }
}

/// One-way network delay for a specific leg, reproducible from the seed.
pub fn one_way_delay(
    latency: &LatencyModel,
    seed: u64,
    session: u64,
    round: u64,
    purpose: StreamPurpose,
) -> f64 {
    let mut stream = RngStream::derive(seed, session, round, purpose);
    let u = stream.next_f64();
    (latency.rtt_ms / 2.0) * (1.0 + latency.rtt_jitter * (2.0 * u - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    DraftPassDone,
    ReqArrive,
    BatchDone,
    RespArrive,
    TokenCommit,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::DraftPassDone => "DraftPassDone",
            EventKind::ReqArrive => "ReqArrive",
            EventKind::BatchDone => "BatchDone",
            EventKind::RespArrive => "RespArrive",
            EventKind::TokenCommit => "TokenCommit",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DraftPassDone" => Ok(EventKind::DraftPassDone),
            "ReqArrive" => Ok(EventKind::ReqArrive),
            "BatchDone" => Ok(EventKind::BatchDone),
            "RespArrive" => Ok(EventKind::RespArrive),
            "TokenCommit" => Ok(EventKind::TokenCommit),
            other => Err(Error::Decode(format!("unknown event kind {other:?}"))),
        }
    }
}

/// One row of the event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub session: u64,
    pub round: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedEvent {
    Admit,
    StartBatch,
    EndBatch,
}

impl SchedEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchedEvent::Admit => "admit",
            SchedEvent::StartBatch => "start_batch",
            SchedEvent::EndBatch => "end_batch",
        }
    }
}

impl std::str::FromStr for SchedEvent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "admit" => Ok(SchedEvent::Admit),
            "start_batch" => Ok(SchedEvent::StartBatch),
            "end_batch" => Ok(SchedEvent::EndBatch),
            other => Err(Error::Decode(format!("unknown sched event {other:?}"))),
        }
    }
}

/// One row of the scheduler trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedRecord {
    pub time_ms: f64,
    pub event: SchedEvent,
    pub sessions: Vec<u64>,
    pub batch_size: u32,
    pub padded_len: u32,
}

/// Everything a run yields.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: RunTrace,
    /// Tokens generated beyond the prompt, per session.
    pub committed: BTreeMap<u64, Vec<TokenId>>,
    /// Depth in force at the end of the run (the calibrated value once the
    /// estimates settle).
    pub depth_final: u32,
}

/// Closed-form expected inter-token latency of the baseline modes.
/// `draft_depth` only matters for `server_only_sd`.
pub fn baseline_itl(
    mode: Mode,
    latency: &LatencyModel,
    draft_depth: u32,
    tokens_per_verify: f64,
) -> Result<f64> {
    if tokens_per_verify < 1.0 {
        return Err(Error::InvalidParam(format!(
            "tokens_per_verify must be >= 1, got {tokens_per_verify}"
        )));
    }
    Ok(match mode {
        Mode::ServerOnlySd => {
            (draft_depth as f64 * latency.server_draft_pass_ms + latency.verify_ms)
                / tokens_per_verify
        }
        Mode::ServerOnlyAr => latency.autoregressive_step_ms,
        Mode::LayerSplitAr => {
            latency.layer_split_edge_ms + latency.layer_split_server_ms + latency.rtt_ms
        }
        Mode::SpecEdge | Mode::DisaggNaive => {
            (draft_depth as f64 * latency.draft_pass_effective()
                + latency.rtt_ms
                + latency.verify_ms)
                / tokens_per_verify
        }
    })
}

// ── Event loop plumbing ─────────────────────────────────────────────────────

#[derive(Debug)]
enum Action {
    // Disaggregated modes.
    EdgeDraftDone {
        session: u64,
    },
    ReqArrive {
        session: u64,
        req: VerifyRequest,
        sent_one_way: f64,
    },
    BatchDone,
    RespArrive {
        session: u64,
        resp: VerifyResponse,
        rtt_obs: f64,
    },
    // Server-only speculative decoding.
    SoCycleDone {
        session: u64,
    },
    // Per-token modes (autoregressive, layer-split).
    TokEdgeDone {
        session: u64,
    },
    TokReqArrive {
        session: u64,
    },
    TokServerDone {
        session: u64,
    },
    TokRespArrive {
        session: u64,
        token: TokenId,
    },
}

struct HeapEntry {
    time: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Reversed: the binary heap pops the smallest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Sim {
    cfg: ExperimentConfig,
    target: ModelOracle,
    draft: ModelOracle,
    latency: LatencyModel,
    heap: BinaryHeap<HeapEntry>,
    heap_seq: u64,
    now: f64,
    // Edge side.
    sessions: Vec<SessionState>,
    outbox: Vec<Option<RoundStart>>,
    // Server side.
    queue: VerifyQueue,
    server_sessions: ServerSessions,
    server_busy: bool,
    current_batch: Option<(BatchPlan, f64)>,
    pending_one_way: BTreeMap<u64, f64>,
    token_fifo: VecDeque<u64>,
    step: Vec<u64>,
    // Trace.
    rounds: Vec<RoundRecord>,
    events: Vec<SimEvent>,
    sched: Vec<SchedRecord>,
    event_seq: u64,
    busy_ms: f64,
}

impl Sim {
    fn push(&mut self, time: f64, action: Action) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.heap.push(HeapEntry {
            time,
            seq: self.heap_seq,
            action,
        });
        self.heap_seq += 1;
    }

    fn emit(&mut self, kind: EventKind, session: u64, round: u64, detail: String) {
        self.events.push(SimEvent {
            time_ms: self.now,
            seq: self.event_seq,
            kind,
            session,
            round,
            detail,
        });
        self.event_seq += 1;
    }

    fn sched(&mut self, event: SchedEvent, sessions: Vec<u64>, batch_size: u32, padded_len: u32) {
        self.sched.push(SchedRecord {
            time_ms: self.now,
            event,
            sessions,
            batch_size,
            padded_len,
        });
    }

    // ── Disaggregated modes ────────────────────────────────────────────

    fn edge_start_round(&mut self, session: u64) -> Result<()> {
        let rs = self.sessions[session as usize].begin_round(&self.draft)?;
        let draft_ms = rs.fresh_passes as f64 * self.latency.draft_pass_effective();
        self.outbox[session as usize] = Some(rs);
        self.push(self.now + draft_ms, Action::EdgeDraftDone { session });
        Ok(())
    }

    fn on_edge_draft_done(&mut self, session: u64) -> Result<()> {
        let rs = self.outbox[session as usize]
            .take()
            .expect("draft completion without a round start");
        self.emit(
            EventKind::DraftPassDone,
            session,
            rs.seq as u64,
            format!("passes={} nodes={}", rs.fresh_passes, rs.tree.len()),
        );
        let one_way = one_way_delay(
            &self.latency,
            self.cfg.seed,
            session,
            rs.seq as u64,
            StreamPurpose::JitterRequest,
        );
        let req = VerifyRequest {
            session,
            seq: rs.seq,
            tree: rs.tree,
        };
        self.push(
            self.now + one_way,
            Action::ReqArrive {
                session,
                req,
                sent_one_way: one_way,
            },
        );
        // The edge keeps drafting while the request is in flight.
        self.sessions[session as usize].expand_proactive(&self.draft);
        Ok(())
    }

    fn on_req_arrive(&mut self, session: u64, req: VerifyRequest, sent_one_way: f64) -> Result<()> {
        let round = req.seq as u64;
        let padded = req.total_len();
        self.emit(
            EventKind::ReqArrive,
            session,
            round,
            format!("one_way={sent_one_way:.3}"),
        );
        self.sched(SchedEvent::Admit, vec![session], 1, padded);
        self.pending_one_way.insert(session, sent_one_way);
        self.queue.admit(req, self.now)?;
        self.try_start_batch();
        Ok(())
    }

    fn try_start_batch(&mut self) {
        if self.server_busy {
            return;
        }
        let Some(plan) = self.queue.plan_batch(self.cfg.effective_capacity()) else {
            return;
        };
        let service = self.latency.verify_service(plan.size(), plan.padded_len);
        self.sched(
            SchedEvent::StartBatch,
            plan.sessions(),
            plan.size() as u32,
            plan.padded_len,
        );
        self.server_busy = true;
        self.push(self.now + service, Action::BatchDone);
        self.current_batch = Some((plan, service));
    }

    fn on_batch_done(&mut self) -> Result<()> {
        let (plan, service) = self
            .current_batch
            .take()
            .expect("batch done without a batch");
        self.busy_ms += service;
        self.sched(
            SchedEvent::EndBatch,
            plan.sessions(),
            plan.size() as u32,
            plan.padded_len,
        );
        let results = crate::scheduler::batch_verify(
            &plan,
            &self.target,
            &mut self.server_sessions,
            self.cfg.seed,
        );
        for (session, result) in results {
            self.queue.complete(session);
            let resp = result?;
            let round = resp.seq as u64;
            self.emit(
                EventKind::BatchDone,
                session,
                round,
                format!("service={service:.3}"),
            );
            let one_way = one_way_delay(
                &self.latency,
                self.cfg.seed,
                session,
                round,
                StreamPurpose::JitterResponse,
            );
            let sent = self
                .pending_one_way
                .remove(&session)
                .unwrap_or(self.latency.rtt_ms / 2.0);
            self.push(
                self.now + one_way,
                Action::RespArrive {
                    session,
                    resp,
                    rtt_obs: sent + one_way,
                },
            );
        }
        self.server_busy = false;
        self.try_start_batch();
        Ok(())
    }

    fn on_resp_arrive(&mut self, session: u64, resp: VerifyResponse, rtt_obs: f64) -> Result<()> {
        let round = resp.seq as u64;
        self.emit(EventKind::RespArrive, session, round, String::new());
        let timings = RoundTimings {
            // The edge's estimate of the server's single-stream verify time
            // is the nominal model value; queueing and batch scaling are
            // server-side effects it cannot separate from the reply timing.
            verify_ms: self.latency.verify_ms,
            draft_pass_ms: self.latency.draft_pass_effective(),
            rtt_ms: rtt_obs,
        };
        let record = self.sessions[session as usize].complete_round(&resp, timings, self.now)?;
        self.commit_tokens(session, round, &resp.accepted, resp.bonus);
        self.rounds.push(record);
        if !self.sessions[session as usize].is_done() {
            self.edge_start_round(session)?;
        }
        Ok(())
    }

    fn commit_tokens(&mut self, session: u64, round: u64, accepted: &[TokenId], bonus: TokenId) {
        for t in accepted.iter().chain(std::iter::once(&bonus)) {
            self.emit(EventKind::TokenCommit, session, round, format!("token={t}"));
        }
    }

    // ── Server-only speculative decoding ───────────────────────────────

    fn so_request(&mut self, session: u64) {
        self.sched(SchedEvent::Admit, vec![session], 1, 0);
        self.token_fifo.push_back(session);
        self.so_try_start();
    }

    fn so_try_start(&mut self) {
        if self.server_busy {
            return;
        }
        let Some(session) = self.token_fifo.pop_front() else {
            return;
        };
        // The server runs the draft passes itself, then verifies.
        let rs = self.sessions[session as usize]
            .begin_round(&self.draft)
            .expect("server-only round start");
        let draft_ms = rs.fresh_passes as f64 * self.latency.server_draft_pass_ms;
        let verify_ms = self
            .latency
            .verify_service(1, rs.tree.base_context_len + rs.tree.len() as u32);
        let service = draft_ms + verify_ms;
        self.sched(
            SchedEvent::StartBatch,
            vec![session],
            1,
            rs.tree.base_context_len + rs.tree.len() as u32,
        );
        self.server_busy = true;
        self.busy_ms += service;
        self.outbox[session as usize] = Some(rs);
        self.push(self.now + service, Action::SoCycleDone { session });
    }

    fn on_so_cycle_done(&mut self, session: u64) -> Result<()> {
        let rs = self.outbox[session as usize]
            .take()
            .expect("cycle without start");
        let round = rs.seq as u64;
        self.emit(
            EventKind::DraftPassDone,
            session,
            round,
            format!("passes={} nodes={}", rs.fresh_passes, rs.tree.len()),
        );
        let plan = BatchPlan {
            members: vec![crate::scheduler::QueuedRequest {
                req: VerifyRequest {
                    session,
                    seq: rs.seq,
                    tree: rs.tree,
                },
                arrival_ms: self.now,
            }],
            padded_len: 0,
        };
        let results = crate::scheduler::batch_verify(
            &plan,
            &self.target,
            &mut self.server_sessions,
            self.cfg.seed,
        );
        let (_, result) = results.into_iter().next().expect("one member");
        let resp = result?;
        self.emit(EventKind::BatchDone, session, round, String::new());
        self.sched(SchedEvent::EndBatch, vec![session], 1, 0);
        let timings = RoundTimings {
            verify_ms: self.latency.verify_ms,
            draft_pass_ms: self.latency.server_draft_pass_ms,
            rtt_ms: 0.0,
        };
        let record = self.sessions[session as usize].complete_round(&resp, timings, self.now)?;
        self.commit_tokens(session, round, &resp.accepted, resp.bonus);
        self.rounds.push(record);
        self.server_busy = false;
        if !self.sessions[session as usize].is_done() {
            self.so_request(session);
        }
        self.so_try_start();
        Ok(())
    }

    // ── Per-token modes ────────────────────────────────────────────────

    fn tok_start(&mut self, session: u64) {
        match self.cfg.mode {
            Mode::LayerSplitAr => {
                self.push(
                    self.now + self.latency.layer_split_edge_ms,
                    Action::TokEdgeDone { session },
                );
            }
            _ => {
                // Pure server-side autoregression: request immediately.
                self.push(self.now, Action::TokReqArrive { session });
            }
        }
    }

    fn on_tok_edge_done(&mut self, session: u64) {
        let step = self.step[session as usize];
        self.emit(
            EventKind::DraftPassDone,
            session,
            step,
            "edge_layers".into(),
        );
        let one_way = one_way_delay(
            &self.latency,
            self.cfg.seed,
            session,
            step,
            StreamPurpose::JitterRequest,
        );
        self.push(self.now + one_way, Action::TokReqArrive { session });
    }

    fn on_tok_req_arrive(&mut self, session: u64) {
        let step = self.step[session as usize];
        self.emit(EventKind::ReqArrive, session, step, String::new());
        self.sched(SchedEvent::Admit, vec![session], 1, 0);
        self.token_fifo.push_back(session);
        self.tok_try_start();
    }

    fn tok_try_start(&mut self) {
        if self.server_busy {
            return;
        }
        let Some(session) = self.token_fifo.pop_front() else {
            return;
        };
        let service = match self.cfg.mode {
            Mode::LayerSplitAr => self.latency.layer_split_server_ms,
            _ => self.latency.autoregressive_step_ms,
        };
        self.sched(SchedEvent::StartBatch, vec![session], 1, 0);
        self.server_busy = true;
        self.busy_ms += service;
        self.push(self.now + service, Action::TokServerDone { session });
    }

    fn on_tok_server_done(&mut self, session: u64) {
        let step = self.step[session as usize];
        let ctx = self.sessions[session as usize].committed().to_vec();
        let mut rng =
            RngStream::derive(self.cfg.seed, session, step, StreamPurpose::Autoregressive);
        let token = sample(&self.target.next_dist(&ctx), &mut rng);
        self.emit(EventKind::BatchDone, session, step, String::new());
        self.sched(SchedEvent::EndBatch, vec![session], 1, 0);
        self.server_busy = false;
        match self.cfg.mode {
            Mode::LayerSplitAr => {
                let one_way = one_way_delay(
                    &self.latency,
                    self.cfg.seed,
                    session,
                    step,
                    StreamPurpose::JitterResponse,
                );
                self.push(self.now + one_way, Action::TokRespArrive { session, token });
            }
            _ => {
                self.push(self.now, Action::TokRespArrive { session, token });
            }
        }
        self.tok_try_start();
    }

    fn on_tok_resp_arrive(&mut self, session: u64, token: TokenId) {
        let step = self.step[session as usize];
        if self.cfg.mode == Mode::LayerSplitAr {
            self.emit(EventKind::RespArrive, session, step, String::new());
        }
        self.tok_commit(session, step, token);
        self.step[session as usize] += 1;
        if self.step[session as usize] < self.cfg.max_new_tokens as u64 {
            self.tok_start(session);
        }
    }

    fn tok_commit(&mut self, session: u64, step: u64, token: TokenId) {
        // Per-token modes count each step as a one-token round.
        self.sessions[session as usize].force_commit(token);
        self.emit(
            EventKind::TokenCommit,
            session,
            step + 1,
            format!("token={token}"),
        );
        self.rounds.push(RoundRecord {
            session,
            round: step + 1,
            accepted_len: 0,
            bonus: token,
            aligned: false,
            preserved: 0,
            t_draft: 0,
            h_expan: 0,
            proactive_active: false,
            tokens_committed: 1,
            commit_time_ms: self.now,
            depth_used: 0,
        });
    }
}

/// Runs one experiment configuration to completion.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let target = cfg.build_target()?;
    let draft = cfg.build_draft()?;
    let latency = cfg.latency_model();

    let mut sessions = Vec::new();
    let mut server_sessions = ServerSessions::new();
    for s in 0..cfg.sessions as u64 {
        let prompt = cfg.prompt_for_session(s);
        server_sessions.register(s, prompt.clone());
        sessions.push(SessionState::new(cfg.edge_session_config(s), &prompt));
    }
    let n = sessions.len();

    let mut sim = Sim {
        cfg: cfg.clone(),
        target,
        draft,
        latency,
        heap: BinaryHeap::new(),
        heap_seq: 0,
        now: 0.0,
        sessions,
        outbox: vec![None; n],
        queue: VerifyQueue::new(),
        server_sessions,
        server_busy: false,
        current_batch: None,
        token_fifo: VecDeque::new(),
        step: vec![0; n],
        rounds: Vec::new(),
        events: Vec::new(),
        sched: Vec::new(),
        event_seq: 0,
        busy_ms: 0.0,
        pending_one_way: BTreeMap::new(),
    };

    match cfg.mode {
        Mode::SpecEdge | Mode::DisaggNaive => {
            for s in 0..n as u64 {
                sim.edge_start_round(s)?;
            }
        }
        Mode::ServerOnlySd => {
            for s in 0..n as u64 {
                sim.so_request(s);
            }
        }
        Mode::ServerOnlyAr | Mode::LayerSplitAr => {
            for s in 0..n as u64 {
                sim.tok_start(s);
            }
        }
    }

    while let Some(entry) = sim.heap.pop() {
        debug_assert!(entry.time >= sim.now, "time went backwards");
        sim.now = entry.time;
        match entry.action {
            Action::EdgeDraftDone { session } => sim.on_edge_draft_done(session)?,
            Action::ReqArrive {
                session,
                req,
                sent_one_way,
            } => sim.on_req_arrive(session, req, sent_one_way)?,
            Action::BatchDone => sim.on_batch_done()?,
            Action::RespArrive {
                session,
                resp,
                rtt_obs,
            } => sim.on_resp_arrive(session, resp, rtt_obs)?,
            Action::SoCycleDone { session } => sim.on_so_cycle_done(session)?,
            Action::TokEdgeDone { session } => sim.on_tok_edge_done(session),
            Action::TokReqArrive { session } => sim.on_tok_req_arrive(session),
            Action::TokServerDone { session } => sim.on_tok_server_done(session),
            Action::TokRespArrive { session, token } => sim.on_tok_resp_arrive(session, token),
        }
    }

    let span_ms = sim.now;
    let committed: BTreeMap<u64, Vec<TokenId>> = sim
        .sessions
        .iter()
        .map(|s| (s.session_id(), s.generated().to_vec()))
        .collect();
    let depth_final = match cfg.mode {
        Mode::ServerOnlyAr | Mode::LayerSplitAr => 0,
        _ => sim.sessions[0].current_depth(),
    };
    Ok(SimOutput {
        trace: RunTrace {
            rounds: sim.rounds,
            events: sim.events,
            sched: sim.sched,
            span_ms,
            busy_ms: sim.busy_ms,
            measure_start_ms: 0.0,
        },
        committed,
        depth_final,
    })
}

/// Replays a scheduler trace and checks the server was never idle while the
/// queue held work: any moment with pending requests and no running batch
/// must be resolved by a `start_batch` at that same timestamp.
pub fn assert_work_conserving(sched: &[SchedRecord]) -> Result<()> {
    let mut pending: i64 = 0;
    let mut busy = false;
    for (i, rec) in sched.iter().enumerate() {
        match rec.event {
            SchedEvent::Admit => pending += 1,
            SchedEvent::StartBatch => {
                pending -= rec.batch_size as i64;
                busy = true;
            }
            SchedEvent::EndBatch => busy = false,
        }
        if pending < 0 {
            return Err(Error::Protocol(format!(
                "scheduler trace row {i}: more work started than admitted"
            )));
        }
        if !busy && pending > 0 {
            // Must be resolved by a batch start at this same instant.
            let resolved = sched[i + 1..]
                .iter()
                .take_while(|r| r.time_ms == rec.time_ms)
                .any(|r| r.event == SchedEvent::StartBatch);
            if !resolved {
                return Err(Error::Protocol(format!(
                    "server idle at t={} with {pending} pending request(s)",
                    rec.time_ms
                )));
            }
        }
    }
    Ok(())
}
