//! Server-side pipeline-aware scheduling.
//!
//! The server interleaves verification across sessions: requests queue FIFO
//! (at most one outstanding per session), an idle server immediately drains
//! up to `capacity` of them into a batch, and heterogeneous members are
//! padded to the longest context+tree length in the batch. Verification of a
//! batch member is bitwise identical to running it solo because every member
//! draws from its own session stream — padding and masking are modeled as
//! logical independence.
//!
//! The edge's draft depth is calibrated so that drafting plus the network
//! round trip lands a new request just as the server finishes the previous
//! verification: `depth = max(1, round((verify_ms - rtt_ms) / draft_pass_ms))`.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::draft::DraftTree;
use crate::error::{Error, Result};
use crate::lm::{ModelOracle, RngStream, StreamPurpose, TokenId};
use crate::verify::verify_tree;

/// Draft depth that makes edge drafting + RTT match server verification
/// time. Rounds to nearest, half away from zero; never below 1 (an RTT at or
/// above the verification time still drafts one pass).
pub fn calibrate_draft_depth(verify_ms: f64, draft_pass_ms: f64, rtt_ms: f64) -> u32 {
    let raw = (verify_ms - rtt_ms) / draft_pass_ms;
    if raw < 1.0 {
        1
    } else {
        raw.round() as u32
    }
}

/// Exponentially-weighted running means of the three timing inputs.
/// Constructed from nominal values; the first observation replaces them,
/// later ones blend with the configured weight.
#[derive(Debug, Clone)]
pub struct TimingEstimates {
    weight: f64,
    verify_ms: f64,
    draft_pass_ms: f64,
    rtt_ms: f64,
    initialized: bool,
}

impl TimingEstimates {
    pub fn new(weight: f64, verify_ms: f64, draft_pass_ms: f64, rtt_ms: f64) -> Self {
        Self {
            weight,
            verify_ms,
            draft_pass_ms,
            rtt_ms,
            initialized: false,
        }
    }

    pub fn observe(&mut self, verify_ms: f64, draft_pass_ms: f64, rtt_ms: f64) {
        if self.initialized {
            let w = self.weight;
            self.verify_ms = (1.0 - w) * self.verify_ms + w * verify_ms;
            self.draft_pass_ms = (1.0 - w) * self.draft_pass_ms + w * draft_pass_ms;
            self.rtt_ms = (1.0 - w) * self.rtt_ms + w * rtt_ms;
        } else {
            self.verify_ms = verify_ms;
            self.draft_pass_ms = draft_pass_ms;
            self.rtt_ms = rtt_ms;
            self.initialized = true;
        }
    }

    pub fn verify_ms(&self) -> f64 {
        self.verify_ms
    }

    pub fn draft_pass_ms(&self) -> f64 {
        self.draft_pass_ms
    }

    pub fn rtt_ms(&self) -> f64 {
        self.rtt_ms
    }
}

/// How the per-round draft depth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthPolicy {
    /// Recalibrate each round from the timing estimates.
    Auto,
    Fixed(u32),
}

impl DepthPolicy {
    pub fn depth(&self, estimates: &TimingEstimates) -> u32 {
        match self {
            DepthPolicy::Fixed(d) => (*d).max(1),
            DepthPolicy::Auto => calibrate_draft_depth(
                estimates.verify_ms(),
                estimates.draft_pass_ms(),
                estimates.rtt_ms(),
            ),
        }
    }
}

/// Draft passes the edge can afford while a request is in flight: the
/// verification + round-trip window divided by the pass time, capped at the
/// current depth.
pub fn proactive_pass_budget(estimates: &TimingEstimates, depth: u32) -> u32 {
    let window = estimates.rtt_ms() + estimates.verify_ms();
    let passes = (window / estimates.draft_pass_ms()).ceil().max(0.0) as u32;
    passes.min(depth)
}

/// A draft tree in flight from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRequest {
    pub session: u64,
    pub seq: u32,
    pub tree: DraftTree,
}

impl VerifyRequest {
    /// Context + tree token count: the sequence length this member occupies
    /// in a batch.
    pub fn total_len(&self) -> u32 {
        self.tree.base_context_len + self.tree.len() as u32
    }
}

/// What travels back: the accepted root path plus the bonus token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResponse {
    pub session: u64,
    pub seq: u32,
    pub accepted: Vec<TokenId>,
    pub bonus: TokenId,
}

#[derive(Debug, Clone)]
pub struct QueuedRequest {
    pub req: VerifyRequest,
    pub arrival_ms: f64,
}

/// FIFO of pending verification requests, one outstanding per session.
#[derive(Debug, Default)]
pub struct VerifyQueue {
    pending: VecDeque<QueuedRequest>,
    outstanding: HashSet<u64>,
}

impl VerifyQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues with its arrival time. A session with a request already
    /// pending or in service is rejected.
    pub fn admit(&mut self, req: VerifyRequest, now_ms: f64) -> Result<()> {
        if !self.outstanding.insert(req.session) {
            return Err(Error::Protocol(format!(
                "session {} already has an outstanding request",
                req.session
            )));
        }
        self.pending.push_back(QueuedRequest {
            req,
            arrival_ms: now_ms,
        });
        Ok(())
    }

    /// Dequeues up to `capacity` oldest requests. Never waits for more
    /// arrivals: one ready request is a batch.
    pub fn plan_batch(&mut self, capacity: usize) -> Option<BatchPlan> {
        if self.pending.is_empty() || capacity == 0 {
            return None;
        }
        let take = capacity.min(self.pending.len());
        let members: Vec<QueuedRequest> = self.pending.drain(..take).collect();
        let padded_len = members.iter().map(|m| m.req.total_len()).max().unwrap();
        Some(BatchPlan {
            members,
            padded_len,
        })
    }

    /// Marks a session's request fully served (response handed back).
    pub fn complete(&mut self, session: u64) {
        self.outstanding.remove(&session);
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }
}

/// One batch the server runs: members plus the padded sequence length.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub members: Vec<QueuedRequest>,
    pub padded_len: u32,
}

impl BatchPlan {
    pub fn sessions(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.req.session).collect()
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Server-side mirror of each session's committed tokens.
#[derive(Debug, Default)]
pub struct ServerSessions {
    contexts: HashMap<u64, Vec<TokenId>>,
}

impl ServerSessions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, session: u64, prompt: Vec<TokenId>) {
        self.contexts.insert(session, prompt);
    }

    pub fn context(&self, session: u64) -> Option<&[TokenId]> {
        self.contexts.get(&session).map(|c| c.as_slice())
    }

    pub fn advance(&mut self, session: u64, tokens: &[TokenId]) {
        if let Some(ctx) = self.contexts.get_mut(&session) {
            ctx.extend_from_slice(tokens);
        }
    }

    pub fn remove(&mut self, session: u64) {
        self.contexts.remove(&session);
    }
}

/// Verifies every member of a batch. Each member uses its own session
/// stream, so its outcome is bitwise identical to a solo [`verify_tree`]
/// run; a context mismatch is reported for that member without failing the
/// batch. Successful members advance the server-side context.
pub fn batch_verify(
    plan: &BatchPlan,
    target: &ModelOracle,
    sessions: &mut ServerSessions,
    seed: u64,
) -> Vec<(u64, Result<VerifyResponse>)> {
    plan.members
        .iter()
        .map(|m| {
            let req = &m.req;
            let outcome = match sessions.context(req.session) {
                None => Err(Error::Protocol(format!("unknown session {}", req.session))),
                Some(ctx) => {
                    let mut rng =
                        RngStream::derive(seed, req.session, req.seq as u64, StreamPurpose::Verify);
                    verify_tree(target, ctx, &req.tree, &mut rng)
                }
            };
            let resp = outcome.map(|o| {
                sessions.advance(req.session, &o.committed());
                VerifyResponse {
                    session: req.session,
                    seq: req.seq,
                    accepted: o.accepted,
                    bonus: o.bonus,
                }
            });
            (req.session, resp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::{build_draft_tree, DraftParams};

    #[test]
    fn depth_calibration_published_points() {
        assert_eq!(calibrate_draft_depth(94.2, 11.0, 15.0), 7);
        assert_eq!(calibrate_draft_depth(94.2, 11.0, 40.0), 5);
        assert_eq!(calibrate_draft_depth(94.2, 11.0, 50.0), 4);
        // RTT at or beyond the verify time still drafts one pass.
        assert_eq!(calibrate_draft_depth(94.2, 11.0, 94.2), 1);
        assert_eq!(calibrate_draft_depth(94.2, 11.0, 200.0), 1);
    }

    #[test]
    fn estimates_initialize_then_blend() {
        let mut est = TimingEstimates::new(0.2, 50.0, 5.0, 10.0);
        assert_eq!(est.verify_ms(), 50.0);
        est.observe(94.2, 11.0, 15.0);
        assert_eq!(est.verify_ms(), 94.2);
        est.observe(100.0, 11.0, 15.0);
        assert!((est.verify_ms() - (0.8 * 94.2 + 0.2 * 100.0)).abs() < 1e-12);
    }

    #[test]
    fn auto_depth_converges_under_stationary_timings() {
        // Nominals are badly wrong; stationary observations fix the depth on
        // the next round.
        let mut est = TimingEstimates::new(0.2, 10.0, 1.0, 1.0);
        let policy = DepthPolicy::Auto;
        let mut depths = Vec::new();
        for _ in 0..5 {
            est.observe(94.2, 11.0, 15.0);
            depths.push(policy.depth(&est));
        }
        assert!(depths.iter().all(|d| *d == 7), "depths {depths:?}");
    }

    #[test]
    fn auto_depth_stable_under_moderate_jitter() {
        let mut est = TimingEstimates::new(0.2, 94.2, 11.0, 15.0);
        let policy = DepthPolicy::Auto;
        for i in 0..50 {
            let wiggle = if i % 2 == 0 { 1.2 } else { 0.8 };
            est.observe(94.2, 11.0, 15.0 * wiggle);
            assert_eq!(policy.depth(&est), 7);
        }
    }

    #[test]
    fn proactive_budget_is_window_over_pass_time_capped() {
        let est = TimingEstimates::new(0.2, 94.2, 11.0, 15.0);
        // ceil(109.2 / 11) = 10, capped at depth 7.
        assert_eq!(proactive_pass_budget(&est, 7), 7);
        assert_eq!(proactive_pass_budget(&est, 20), 10);
    }

    fn req(session: u64, seq: u32, ctx_len: u32, nodes: usize) -> VerifyRequest {
        let draft = ModelOracle::table(&[0.5, 0.3, 0.2], 1.0).unwrap();
        let params = DraftParams::new(nodes.max(1), 1, nodes.max(1)).unwrap();
        let context: Vec<TokenId> = (0..ctx_len).map(|i| i % 3).collect();
        let tree = build_draft_tree(&draft, &context, &params);
        VerifyRequest { session, seq, tree }
    }

    #[test]
    fn queue_is_fifo_and_rejects_duplicates() {
        let mut q = VerifyQueue::new();
        q.admit(req(1, 1, 4, 2), 0.0).unwrap();
        q.admit(req(2, 1, 4, 2), 1.0).unwrap();
        q.admit(req(3, 1, 4, 2), 2.0).unwrap();
        assert!(q.admit(req(2, 2, 4, 2), 3.0).is_err());

        let plan = q.plan_batch(2).unwrap();
        assert_eq!(plan.sessions(), vec![1, 2]);
        assert_eq!(q.len(), 1);

        // Still outstanding until completed.
        assert!(q.admit(req(1, 2, 4, 2), 4.0).is_err());
        q.complete(1);
        q.admit(req(1, 2, 4, 2), 5.0).unwrap();
    }

    #[test]
    fn empty_queue_has_no_plan_and_one_request_batches_immediately() {
        let mut q = VerifyQueue::new();
        assert!(q.plan_batch(8).is_none());
        q.admit(req(7, 1, 4, 2), 0.0).unwrap();
        let plan = q.plan_batch(8).unwrap();
        assert_eq!(plan.size(), 1);
    }

    #[test]
    fn padded_len_is_the_member_max() {
        let mut q = VerifyQueue::new();
        q.admit(req(1, 1, 8, 2), 0.0).unwrap(); // len 10
        q.admit(req(2, 1, 12, 5), 0.0).unwrap(); // len 17
        let plan = q.plan_batch(2).unwrap();
        assert_eq!(plan.padded_len, 17);
    }

    #[test]
    fn batch_members_match_solo_runs_bitwise() {
        let target = ModelOracle::table(&[0.4, 0.3, 0.2, 0.1], 1.0).unwrap();
        let draft = ModelOracle::table(&[0.25; 4], 1.0).unwrap();
        let seed = 99;

        for round in 0..50u32 {
            let mut q = VerifyQueue::new();
            let mut solo_sessions = ServerSessions::new();
            let mut batch_sessions = ServerSessions::new();
            let mut solo = Vec::new();
            for s in 0..3u64 {
                let ctx: Vec<TokenId> = (0..(1 + (s as u32 + round) % 5)).map(|i| i % 4).collect();
                let params = DraftParams::new(
                    1 + (s as usize + round as usize) % 6,
                    2,
                    1 + round as usize % 3,
                )
                .unwrap();
                let tree = build_draft_tree(&draft, &ctx, &params);
                solo_sessions.register(s, ctx.clone());
                batch_sessions.register(s, ctx.clone());
                let request = VerifyRequest {
                    session: s,
                    seq: round,
                    tree: tree.clone(),
                };
                let mut rng = RngStream::derive(seed, s, round as u64, StreamPurpose::Verify);
                solo.push(verify_tree(&target, &ctx, &tree, &mut rng).unwrap());
                q.admit(request, 0.0).unwrap();
            }
            let plan = q.plan_batch(3).unwrap();
            let results = batch_verify(&plan, &target, &mut batch_sessions, seed);
            for ((session, resp), want) in results.into_iter().zip(solo) {
                let resp = resp.unwrap();
                assert_eq!(resp.accepted, want.accepted, "session {session}");
                assert_eq!(resp.bonus, want.bonus, "session {session}");
            }
        }
    }

    #[test]
    fn stale_member_errors_without_failing_the_batch() {
        let target = ModelOracle::table(&[0.5, 0.5], 1.0).unwrap();
        let draft = ModelOracle::table(&[0.9, 0.1], 1.0).unwrap();
        let params = DraftParams::new(2, 1, 2).unwrap();

        let mut sessions = ServerSessions::new();
        sessions.register(1, vec![0, 1]);
        sessions.register(2, vec![0]);

        let good = VerifyRequest {
            session: 1,
            seq: 1,
            tree: build_draft_tree(&draft, &[0, 1], &params),
        };
        // Built against a context the server no longer has.
        let stale = VerifyRequest {
            session: 2,
            seq: 1,
            tree: build_draft_tree(&draft, &[0, 1, 1], &params),
        };
        let mut q = VerifyQueue::new();
        q.admit(good, 0.0).unwrap();
        q.admit(stale, 0.0).unwrap();
        let plan = q.plan_batch(2).unwrap();
        let results = batch_verify(&plan, &target, &mut sessions, 5);
        assert!(results[0].1.is_ok());
        assert!(matches!(results[1].1, Err(Error::Protocol(_))));
    }
}
