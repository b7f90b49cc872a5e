//! Per-session edge state machine: draft, submit, expand, update.
//!
//! Both the event simulator and the wire transport drive this exact state
//! machine, so the token sequence a session commits depends only on the
//! models, the seed, and the policy knobs — never on which driver ran it or
//! how requests interleaved on the server.

use crate::draft::{build_draft_tree, grow_draft_tree, DraftParams, DraftTree};
use crate::error::{Error, Result};
use crate::lm::{ModelOracle, TokenId};
use crate::proactive::{
    check_alignment, proactive_expand, select_expansion_heads, ExpansionPolicy, ProactiveTree,
    RoundRecord,
};
use crate::scheduler::{proactive_pass_budget, DepthPolicy, TimingEstimates, VerifyResponse};
use crate::verify::VerifyOutcome;

/// Session-level policy knobs, distilled from the experiment config.
#[derive(Debug, Clone)]
pub struct EdgeSessionConfig {
    pub session_id: u64,
    pub seed: u64,
    pub budget: usize,
    pub branching: usize,
    pub depth_policy: DepthPolicy,
    pub proactive_enabled: bool,
    pub expansion_policy: ExpansionPolicy,
    pub max_new_tokens: usize,
    pub ewma_weight: f64,
    pub nominal_verify_ms: f64,
    pub nominal_draft_pass_ms: f64,
    pub nominal_rtt_ms: f64,
}

/// The request this session currently has in flight.
#[derive(Debug, Clone)]
struct InFlight {
    seq: u32,
    tree: DraftTree,
    proactive: Option<ProactiveTree>,
    fresh_passes: u32,
}

/// Data the driver needs to submit one round.
#[derive(Debug, Clone)]
pub struct RoundStart {
    pub seq: u32,
    pub tree: DraftTree,
    /// Draft passes actually run this round; a preserved branch from the
    /// previous round deepens the tree beyond what these passes built.
    pub fresh_passes: u32,
}

/// Timings observed for one completed round, fed to the depth calibration.
#[derive(Debug, Clone, Copy)]
pub struct RoundTimings {
    pub verify_ms: f64,
    pub draft_pass_ms: f64,
    pub rtt_ms: f64,
}

/// Per-request edge state: committed tokens, the in-flight request with its
/// proactive expansion, the context-length counter standing in for the KV
/// cache, and the timing estimates driving depth calibration.
#[derive(Debug, Clone)]
pub struct SessionState {
    cfg: EdgeSessionConfig,
    committed: Vec<TokenId>,
    prompt_len: usize,
    context_len: usize,
    new_tokens: usize,
    round: u64,
    estimates: TimingEstimates,
    in_flight: Option<InFlight>,
    seed_tree: Option<DraftTree>,
}

impl SessionState {
    pub fn new(cfg: EdgeSessionConfig, prompt: &[TokenId]) -> Self {
        let estimates = TimingEstimates::new(
            cfg.ewma_weight,
            cfg.nominal_verify_ms,
            cfg.nominal_draft_pass_ms,
            cfg.nominal_rtt_ms,
        );
        Self {
            cfg,
            committed: prompt.to_vec(),
            prompt_len: prompt.len(),
            context_len: prompt.len(),
            new_tokens: 0,
            round: 1,
            estimates,
            in_flight: None,
            seed_tree: None,
        }
    }

    pub fn session_id(&self) -> u64 {
        self.cfg.session_id
    }

    /// Full committed sequence, prompt included.
    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    /// Tokens committed beyond the prompt.
    pub fn generated(&self) -> &[TokenId] {
        &self.committed[self.prompt_len..]
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn is_done(&self) -> bool {
        self.new_tokens >= self.cfg.max_new_tokens
    }

    pub fn current_depth(&self) -> u32 {
        self.cfg.depth_policy.depth(&self.estimates)
    }

    pub fn estimates(&self) -> &TimingEstimates {
        &self.estimates
    }

    /// Direct append for the per-token baseline modes, which bypass the
    /// draft/verify cycle entirely.
    pub fn force_commit(&mut self, token: TokenId) {
        self.committed.push(token);
        self.context_len = self.committed.len();
        self.new_tokens += 1;
    }

    /// Builds this round's tree — fresh, or on top of a preserved proactive
    /// branch — and marks the request in flight.
    pub fn begin_round(&mut self, draft: &ModelOracle) -> Result<RoundStart> {
        if self.in_flight.is_some() {
            return Err(Error::Protocol(format!(
                "session {} already has a verify in flight",
                self.cfg.session_id
            )));
        }
        let depth = self.current_depth();
        let params = DraftParams {
            budget: self.cfg.budget,
            branching: self.cfg.branching,
            depth: depth as usize,
        };
        let seed = self
            .seed_tree
            .take()
            .filter(|s| s.base_context_len as usize == self.committed.len());
        let tree = match seed {
            Some(seed) => grow_draft_tree(draft, &self.committed, seed, depth as usize, &params),
            None => build_draft_tree(draft, &self.committed, &params),
        };
        let seq = self.round as u32;
        self.in_flight = Some(InFlight {
            seq,
            tree: tree.clone(),
            proactive: None,
            fresh_passes: depth,
        });
        Ok(RoundStart {
            seq,
            tree,
            fresh_passes: depth,
        })
    }

    /// Proactive expansion for the in-flight request. Runs as many passes as
    /// the verification + round-trip window affords. No-op when disabled.
    pub fn expand_proactive(&mut self, draft: &ModelOracle) {
        if !self.cfg.proactive_enabled {
            return;
        }
        let depth = self.current_depth();
        let passes = proactive_pass_budget(&self.estimates, depth) as usize;
        let committed = self.committed.clone();
        let Some(fl) = self.in_flight.as_mut() else {
            return;
        };
        if fl.tree.is_empty() {
            return;
        }
        let Ok(heads) = select_expansion_heads(&fl.tree, self.cfg.expansion_policy) else {
            return;
        };
        fl.proactive = Some(proactive_expand(
            draft,
            &committed,
            &fl.tree,
            &heads,
            passes,
            self.cfg.branching,
            self.cfg.budget,
        ));
    }

    /// Post-verification update: append the accepted tokens and the bonus,
    /// advance the context counter, keep a matched proactive branch as the
    /// seed of the next tree, and fold the round's timings into the
    /// estimates. A response whose seq does not echo the in-flight request
    /// is stale.
    pub fn complete_round(
        &mut self,
        resp: &VerifyResponse,
        timings: RoundTimings,
        now_ms: f64,
    ) -> Result<RoundRecord> {
        let fl = self
            .in_flight
            .as_ref()
            .ok_or_else(|| Error::Protocol("no verify in flight".into()))?;
        if resp.session != self.cfg.session_id || resp.seq != fl.seq {
            return Err(Error::Protocol(format!(
                "stale outcome: got session {} seq {}, expected session {} seq {}",
                resp.session, resp.seq, self.cfg.session_id, fl.seq
            )));
        }
        let fl = self.in_flight.take().expect("checked above");

        let outcome = VerifyOutcome {
            accepted: resp.accepted.clone(),
            bonus: resp.bonus,
            rounds_used: 1,
        };
        let align = check_alignment(&outcome, fl.proactive.as_ref());

        let newly = outcome.committed();
        self.committed.extend_from_slice(&newly);
        self.context_len = self.committed.len();
        self.new_tokens += newly.len();

        self.seed_tree = match (align.matched_node, fl.proactive.as_ref()) {
            (Some(node), Some(pro)) => {
                let seed = pro.extract_seed(node, self.committed.len() as u32);
                (!seed.is_empty()).then_some(seed)
            }
            _ => None,
        };

        self.estimates
            .observe(timings.verify_ms, timings.draft_pass_ms, timings.rtt_ms);

        let record = RoundRecord {
            session: self.cfg.session_id,
            round: fl.seq as u64,
            accepted_len: outcome.accepted.len() as u32,
            bonus: outcome.bonus,
            aligned: align.path_aligned,
            preserved: align.preserved_tokens,
            t_draft: fl.proactive.as_ref().map_or(0, |p| p.token_count() as u32),
            h_expan: fl.proactive.as_ref().map_or(0, |p| p.heads.len() as u32),
            proactive_active: fl.proactive.is_some(),
            tokens_committed: newly.len() as u32,
            commit_time_ms: now_ms,
            depth_used: fl.fresh_passes,
        };
        self.round += 1;
        Ok(record)
    }
}
