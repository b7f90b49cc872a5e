//! Lossless server-side verification of a draft tree in one logical pass.
//!
//! The verifier walks the tree from the root. At each node it holds the
//! target model's next-token distribution for the current position and tries
//! the node's children in descending draft log-probability order (ties by
//! smaller token id). A child is accepted with exactly the probability the
//! current residual distribution assigns to its token; a rejection removes
//! that token's mass and renormalizes before the next sibling is tried. When
//! no child is accepted (or the walk reaches a leaf) the bonus token is drawn
//! from the final residual, so every round commits at least one token.
//!
//! Under this cascade the token emitted at each position — whether an
//! accepted child or the bonus — is distributed exactly as a fresh sample
//! from the target model, for *any* candidate tree. That makes the emitted
//! stream indistinguishable from target-model autoregressive sampling, which
//! [`enumerate_emission_dist`] checks by exact summation. Since the drafter
//! proposes candidates by probability rank rather than by sampling, draft
//! probabilities shape the tree but play no role in acceptance; an
//! acceptance ratio against the draft distribution is only unbiased when
//! candidates are themselves draws from it.

use std::collections::HashMap;

use crate::draft::{DraftTree, ROOT_PARENT};
use crate::error::{Error, Result};
use crate::lm::{ModelOracle, RngStream, TokenId};

/// Result of verifying one draft tree: a root path of accepted tokens plus
/// the always-present bonus token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub accepted: Vec<TokenId>,
    pub bonus: TokenId,
    /// Always 1: the whole tree is resolved in a single logical forward pass.
    pub rounds_used: u32,
}

impl VerifyOutcome {
    /// Tokens committed by this round.
    pub fn committed(&self) -> Vec<TokenId> {
        let mut out = self.accepted.clone();
        out.push(self.bonus);
        out
    }
}

/// Children of `parent` in verification order: descending stored draft
/// log-probability, ties by smaller token id.
fn ordered_children(tree: &DraftTree, parent: u32) -> Vec<u32> {
    let mut kids = tree.children_of(parent);
    kids.sort_by(|a, b| {
        let na = &tree.nodes[*a as usize];
        let nb = &tree.nodes[*b as usize];
        nb.logprob
            .total_cmp(&na.logprob)
            .then(na.token.cmp(&nb.token))
    });
    kids
}

fn zero_and_renormalize(probs: &mut [f64], token: TokenId) {
    probs[token as usize] = 0.0;
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
}

fn sample_normalized(probs: &[f64], rng: &mut RngStream) -> TokenId {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_positive = 0usize;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        cum += p;
        last_positive = i;
        if u < cum {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}

/// Verifies `tree` against the target model, preserving the target's exact
/// output distribution. Deterministic given the rng stream.
pub fn verify_tree(
    target: &ModelOracle,
    context: &[TokenId],
    tree: &DraftTree,
    rng: &mut RngStream,
) -> Result<VerifyOutcome> {
    if tree.base_context_len as usize != context.len() {
        return Err(Error::Protocol(format!(
            "context length mismatch: tree built at {}, server has {}",
            tree.base_context_len,
            context.len()
        )));
    }
    // Trees can arrive over the wire; reject tokens outside the vocabulary.
    if let Some(n) = tree
        .nodes
        .iter()
        .find(|n| n.token as usize >= target.vocab_size())
    {
        return Err(Error::Protocol(format!(
            "draft token {} outside vocabulary {}",
            n.token,
            target.vocab_size()
        )));
    }

    let mut path: Vec<TokenId> = Vec::new();
    let mut at = ROOT_PARENT;
    let mut ctx = context.to_vec();
    loop {
        let mut residual = target.next_dist(&ctx).probs().to_vec();
        let mut accepted_child = None;
        for child in ordered_children(tree, at) {
            let token = tree.nodes[child as usize].token;
            let accept_prob = residual[token as usize];
            if rng.next_f64() < accept_prob {
                accepted_child = Some((child, token));
                break;
            }
            zero_and_renormalize(&mut residual, token);
        }
        match accepted_child {
            Some((child, token)) => {
                path.push(token);
                ctx.push(token);
                at = child;
            }
            None => {
                let bonus = sample_normalized(&residual, rng);
                return Ok(VerifyOutcome {
                    accepted: path,
                    bonus,
                    rounds_used: 1,
                });
            }
        }
    }
}

/// Guard for the exact enumerations: `V^horizon` must stay enumerable.
const ENUMERATION_GUARD: f64 = 1_000_000.0;

fn check_enumeration_guard(vocab: usize, horizon: usize) -> Result<()> {
    if (vocab as f64).powi(horizon as i32) > ENUMERATION_GUARD {
        return Err(Error::EnumerationTooLarge(format!(
            "V^horizon = {vocab}^{horizon} exceeds 1e6"
        )));
    }
    Ok(())
}

/// Exact distribution of the first `horizon` emitted tokens under
/// target-model autoregressive sampling. The reference law the verifier must
/// reproduce.
pub fn autoregressive_dist(
    target: &ModelOracle,
    context: &[TokenId],
    horizon: usize,
) -> Result<HashMap<Vec<TokenId>, f64>> {
    check_enumeration_guard(target.vocab_size(), horizon)?;
    let mut out = HashMap::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        if prefix.len() == horizon {
            *out.entry(prefix).or_insert(0.0) += mass;
            continue;
        }
        let mut ctx = context.to_vec();
        ctx.extend_from_slice(&prefix);
        let dist = target.next_dist(&ctx);
        for (t, p) in dist.probs().iter().enumerate() {
            if *p > 0.0 {
                let mut next = prefix.clone();
                next.push(t as TokenId);
                stack.push((next, mass * p));
            }
        }
    }
    Ok(out)
}

/// Exact distribution of the first `horizon` tokens emitted by repeated
/// draft-and-verify rounds, computed by summing over every
/// acceptance/rejection branch and bonus draw. Each round drafts a fresh tree
/// from the committed context with `params`. Used as the brute-force oracle
/// for the losslessness contract.
pub fn enumerate_emission_dist(
    target: &ModelOracle,
    draft: &ModelOracle,
    context: &[TokenId],
    params: &crate::draft::DraftParams,
    horizon: usize,
) -> Result<HashMap<Vec<TokenId>, f64>> {
    check_enumeration_guard(target.vocab_size(), horizon)?;
    let walker = Enumeration {
        target,
        draft,
        base_context: context,
        params,
        horizon,
    };
    let mut out = HashMap::new();
    walker.rounds(&mut Vec::new(), 1.0, &mut out);
    Ok(out)
}

struct Enumeration<'a> {
    target: &'a ModelOracle,
    draft: &'a ModelOracle,
    base_context: &'a [TokenId],
    params: &'a crate::draft::DraftParams,
    horizon: usize,
}

impl Enumeration<'_> {
    fn settle(&self, emitted: &[TokenId], mass: f64, out: &mut HashMap<Vec<TokenId>, f64>) -> bool {
        // Every continuation extends the same prefix; once the horizon is
        // reached the remaining branch mass lands on it wholesale.
        if emitted.len() >= self.horizon {
            *out.entry(emitted[..self.horizon].to_vec()).or_insert(0.0) += mass;
            return true;
        }
        false
    }

    fn rounds(&self, emitted: &mut Vec<TokenId>, mass: f64, out: &mut HashMap<Vec<TokenId>, f64>) {
        if self.settle(emitted, mass, out) {
            return;
        }
        let mut ctx = self.base_context.to_vec();
        ctx.extend_from_slice(emitted);
        let tree = crate::draft::build_draft_tree(self.draft, &ctx, self.params);
        self.walk(&tree, ROOT_PARENT, emitted, mass, out);
    }

    fn walk(
        &self,
        tree: &DraftTree,
        at: u32,
        emitted: &mut Vec<TokenId>,
        mass: f64,
        out: &mut HashMap<Vec<TokenId>, f64>,
    ) {
        if self.settle(emitted, mass, out) {
            return;
        }
        let mut ctx = self.base_context.to_vec();
        ctx.extend_from_slice(emitted);
        let mut residual = self.target.next_dist(&ctx).probs().to_vec();
        let mut remaining = mass;
        for child in ordered_children(tree, at) {
            let token = tree.nodes[child as usize].token;
            let accept_prob = residual[token as usize];
            if accept_prob > 0.0 {
                emitted.push(token);
                self.walk(tree, child, emitted, remaining * accept_prob, out);
                emitted.pop();
            }
            remaining *= 1.0 - accept_prob;
            if remaining <= 0.0 {
                return;
            }
            zero_and_renormalize(&mut residual, token);
        }
        // All children rejected (or leaf): the bonus closes the round and
        // the next round drafts from the extended context.
        for (t, p) in residual.iter().enumerate() {
            if *p > 0.0 {
                emitted.push(t as TokenId);
                self.rounds(emitted, remaining * p, out);
                emitted.pop();
            }
        }
    }
}

/// Total variation distance between two sequence distributions.
pub fn total_variation(a: &HashMap<Vec<TokenId>, f64>, b: &HashMap<Vec<TokenId>, f64>) -> f64 {
    let mut keys: Vec<&Vec<TokenId>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| {
            let pa = a.get(*k).copied().unwrap_or(0.0);
            let pb = b.get(*k).copied().unwrap_or(0.0);
            (pa - pb).abs()
        })
        .sum::<f64>()
}
