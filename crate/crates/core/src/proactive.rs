//! Proactive drafting while a verification is in flight.
//!
//! After submitting a tree the edge keeps drafting from one or more
//! expansion heads instead of idling. When the server's reply comes back,
//! the verified tokens are compared against the proactive structure: if the
//! accepted tokens reach a head exactly and the bonus token matches one of
//! that head's direct proactive children, the branch below that child is
//! still valid draft work and seeds the next round's tree. Any partial match
//! discards the proactive work entirely.

use crate::draft::{
    best_leaf, DraftNode, DraftTree, GrowthNode, GrowthOrigin, GrowthParent, ROOT_PARENT,
};
use crate::error::{Error, Result};
use crate::lm::{ModelOracle, TokenId};
use crate::verify::VerifyOutcome;

/// Which leaves of the submitted tree keep drafting during the flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionPolicy {
    /// Only the leaf of the best path. One head concentrates the whole
    /// proactive budget on the branch most likely to be confirmed.
    SingleBest,
    /// Every leaf. Maximizes the chance of alignment but spreads the drafted
    /// tokens thin; kept for the gain trade-off comparison.
    AllLeaves,
}

/// One expansion head: a leaf of the submitted tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ProactiveHead {
    /// Root path of the head in the submitted tree.
    pub path: Vec<TokenId>,
    /// Cumulative log-probability of the head, inherited so pooled pruning
    /// can weigh subtrees of different heads against each other.
    pub cum_logprob: f64,
}

/// Draft structure grown below the expansion heads while a request is in
/// flight. Node depths count from the head (a head's direct child has
/// depth 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProactiveTree {
    pub heads: Vec<ProactiveHead>,
    pub(crate) nodes: Vec<GrowthNode>,
    pub passes_done: usize,
}

impl ProactiveTree {
    pub fn empty() -> Self {
        Self {
            heads: Vec::new(),
            nodes: Vec::new(),
            passes_done: 0,
        }
    }

    /// Total proactively drafted tokens (the gain formula's numerator).
    pub fn token_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn children_of_head(&self, head: u32) -> Vec<u32> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.parent == GrowthParent::Origin(head))
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Node count of the subtree rooted at `index`, counting `index` itself.
    pub fn subtree_size_inclusive(&self, index: u32) -> u32 {
        let mut in_subtree = vec![false; self.nodes.len()];
        in_subtree[index as usize] = true;
        let mut count = 1;
        // Nodes are stored parent-before-child.
        for i in (index as usize + 1)..self.nodes.len() {
            if let GrowthParent::Node(p) = self.nodes[i].parent {
                if in_subtree[p as usize] {
                    in_subtree[i] = true;
                    count += 1;
                }
            }
        }
        count
    }

    /// Extracts the strict descendants of `matched` as a fresh draft tree
    /// rebased on the new committed context (the matched node's own token is
    /// the bonus the server just committed). Cumulative log-probabilities are
    /// recomputed from the new root.
    pub fn extract_seed(&self, matched: u32, new_base_context_len: u32) -> DraftTree {
        let mut map: Vec<Option<u32>> = vec![None; self.nodes.len()];
        let mut nodes: Vec<DraftNode> = Vec::new();
        for i in (matched as usize + 1)..self.nodes.len() {
            let n = &self.nodes[i];
            let parent = match n.parent {
                GrowthParent::Node(p) if p == matched => Some(ROOT_PARENT),
                GrowthParent::Node(p) => map[p as usize],
                GrowthParent::Origin(_) => None,
            };
            let Some(parent) = parent else { continue };
            let (pcum, pdepth) = if parent == ROOT_PARENT {
                (0.0, 0)
            } else {
                let p = &nodes[parent as usize];
                (p.cum_logprob, p.depth)
            };
            map[i] = Some(nodes.len() as u32);
            nodes.push(DraftNode {
                token: n.token,
                parent,
                logprob: n.logprob,
                cum_logprob: pcum + n.logprob as f64,
                depth: pdepth + 1,
            });
        }
        DraftTree {
            base_context_len: new_base_context_len,
            nodes,
        }
    }
}

/// Leaves of the submitted tree that keep drafting, per policy.
pub fn select_expansion_heads(tree: &DraftTree, policy: ExpansionPolicy) -> Result<Vec<u32>> {
    if tree.is_empty() {
        return Err(Error::NoDraft);
    }
    match policy {
        ExpansionPolicy::SingleBest => Ok(vec![best_leaf(tree)?]),
        ExpansionPolicy::AllLeaves => Ok(tree.leaf_indices()),
    }
}

/// Runs up to `passes` draft passes rooted at the given heads, pooling the
/// proactive budget across them with the same pruning rule as tree building.
pub fn proactive_expand(
    draft: &ModelOracle,
    committed: &[TokenId],
    tree: &DraftTree,
    heads: &[u32],
    passes: usize,
    branching: usize,
    budget: usize,
) -> ProactiveTree {
    let origins: Vec<GrowthOrigin> = heads
        .iter()
        .map(|h| {
            let mut context = committed.to_vec();
            context.extend(tree.path_to(*h));
            GrowthOrigin {
                context,
                base_cum: tree.nodes[*h as usize].cum_logprob,
            }
        })
        .collect();
    let nodes = crate::draft::grow_forest(draft, &origins, Vec::new(), passes, branching, budget);
    ProactiveTree {
        heads: heads
            .iter()
            .map(|h| ProactiveHead {
                path: tree.path_to(*h),
                cum_logprob: tree.nodes[*h as usize].cum_logprob,
            })
            .collect(),
        nodes,
        passes_done: passes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentStatus {
    /// Accepted tokens reach a head exactly and the bonus matches one of its
    /// direct proactive children; the branch below is reusable.
    CompleteAlignment,
    /// Anything else, including the partial case where the accepted path
    /// stops short of the head or diverges: the proactive work is discarded.
    Miss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub status: AlignmentStatus,
    /// The accepted path reached some head exactly (the conditioning event
    /// of the gain formula, regardless of whether the bonus then matched).
    pub path_aligned: bool,
    /// Index of the matched depth-1 proactive node on complete alignment.
    pub matched_node: Option<u32>,
    /// Size of the matched node's subtree, itself included. Zero on a miss.
    pub preserved_tokens: u32,
}

impl AlignmentResult {
    pub fn miss(path_aligned: bool) -> Self {
        Self {
            status: AlignmentStatus::Miss,
            path_aligned,
            matched_node: None,
            preserved_tokens: 0,
        }
    }
}

/// Compares the server's outcome with the proactive structure grown under
/// the same request.
pub fn check_alignment(outcome: &VerifyOutcome, pro: Option<&ProactiveTree>) -> AlignmentResult {
    let Some(pro) = pro else {
        return AlignmentResult::miss(false);
    };
    let Some(head_idx) = pro.heads.iter().position(|h| h.path == outcome.accepted) else {
        return AlignmentResult::miss(false);
    };
    let matched = pro
        .children_of_head(head_idx as u32)
        .into_iter()
        .find(|i| pro.nodes[*i as usize].token == outcome.bonus);
    match matched {
        Some(node) => AlignmentResult {
            status: AlignmentStatus::CompleteAlignment,
            path_aligned: true,
            matched_node: Some(node),
            preserved_tokens: pro.subtree_size_inclusive(node),
        },
        None => AlignmentResult::miss(true),
    }
}

/// Expected benefit of proactive expansion:
/// `p_align * p_match_given_align * (t_draft / h_expan - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainEstimate {
    pub p_align: f64,
    pub p_match_given_align: f64,
    pub t_draft: f64,
    pub h_expan: f64,
    pub expected_gain: f64,
}

pub fn expected_gain(
    p_align: f64,
    p_match_given_align: f64,
    t_draft: f64,
    h_expan: f64,
) -> Result<GainEstimate> {
    if h_expan < 1.0 {
        return Err(Error::InvalidParam(format!(
            "expansion head count must be >= 1, got {h_expan}"
        )));
    }
    for (name, p) in [
        ("p_align", p_align),
        ("p_match_given_align", p_match_given_align),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParam(format!("{name} = {p} outside [0, 1]")));
        }
    }
    if t_draft < 0.0 {
        return Err(Error::InvalidParam(format!("t_draft = {t_draft} negative")));
    }
    Ok(GainEstimate {
        p_align,
        p_match_given_align,
        t_draft,
        h_expan,
        expected_gain: p_align * p_match_given_align * (t_draft / h_expan - 1.0),
    })
}

/// Per-round trace row. The CSV form carries the first seven fields; the
/// rest feed metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub session: u64,
    pub round: u64,
    pub accepted_len: u32,
    pub bonus: TokenId,
    pub aligned: bool,
    pub preserved: u32,
    pub t_draft: u32,
    /// Expansion heads used this round; 0 when proactive drafting was off or
    /// had no passes to run.
    pub h_expan: u32,
    /// Whether an expansion was attempted for this round at all.
    pub proactive_active: bool,
    pub tokens_committed: u32,
    pub commit_time_ms: f64,
    /// Fresh draft passes the edge ran before submitting.
    pub depth_used: u32,
}

/// Empirical gain components over every round that ran a proactive
/// expansion (cumulative estimator).
pub fn measure_gain_components(trace: &[RoundRecord]) -> Result<GainEstimate> {
    measure_gain_components_windowed(trace, usize::MAX)
}

/// Same, restricted to the last `window` proactive rounds. The measurement
/// window is deliberately a parameter: both cumulative and sliding views are
/// legitimate readings of the estimator.
pub fn measure_gain_components_windowed(
    trace: &[RoundRecord],
    window: usize,
) -> Result<GainEstimate> {
    let active: Vec<&RoundRecord> = trace.iter().filter(|r| r.proactive_active).collect();
    if active.is_empty() {
        return Err(Error::EmptyTrace(
            "no completed verify rounds with proactive expansion".into(),
        ));
    }
    let tail = if active.len() > window {
        &active[active.len() - window..]
    } else {
        &active[..]
    };
    let n = tail.len() as f64;
    let aligned = tail.iter().filter(|r| r.aligned).count() as f64;
    let matched = tail.iter().filter(|r| r.preserved > 0).count() as f64;
    let p_align = aligned / n;
    let p_match_given_align = if aligned > 0.0 {
        matched / aligned
    } else {
        0.0
    };
    let t_draft = tail.iter().map(|r| r.t_draft as f64).sum::<f64>() / n;
    let h_expan = (tail.iter().map(|r| r.h_expan as f64).sum::<f64>() / n).max(1.0);
    expected_gain(p_align, p_match_given_align, t_draft, h_expan)
}
