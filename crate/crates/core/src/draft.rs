//! Draft-tree construction on the edge.
//!
//! Each draft pass proposes the top-`branching` next tokens (by draft
//! probability rank, never by sampling) from every frontier leaf, pools the
//! proposals with the existing nodes, and keeps the global top-`budget` nodes
//! by cumulative log-probability. Because a child's cumulative log-probability
//! never exceeds its parent's, greedy prefix selection under the pruning order
//! is automatically ancestor-closed: no kept node can lose its parent.
//!
//! With `branching = 1` the tree degenerates to a chain and the whole scheme
//! reduces to plain greedy drafting.

use crate::error::{Error, Result};
use crate::lm::{ModelOracle, TokenId};

/// Parent sentinel for nodes hanging directly off the (implicit) root.
/// Matches the wire encoding's root marker.
pub const ROOT_PARENT: u32 = u32::MAX;

/// One candidate token in a draft tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: TokenId,
    /// Index of the parent node, or [`ROOT_PARENT`]. Always less than this
    /// node's own index.
    pub parent: u32,
    /// Draft-model log-probability of `token` given the path to the parent.
    /// Stored at wire precision so serialization round-trips exactly.
    pub logprob: f32,
    /// `parent.cum_logprob + logprob`; 0 at the root.
    pub cum_logprob: f64,
    /// Root children have depth 1.
    pub depth: u32,
}

/// Rooted tree of candidate tokens. The root itself is implicit and carries
/// the committed context; it does not count against the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    /// Number of committed tokens at draft time.
    pub base_context_len: u32,
    /// Nodes ordered parent-before-child.
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    pub fn empty(base_context_len: u32) -> Self {
        Self {
            base_context_len,
            nodes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Child indices of `parent` (use [`ROOT_PARENT`] for the root), in
    /// stored order.
    pub fn children_of(&self, parent: u32) -> Vec<u32> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.parent == parent)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Root-to-node token path, inclusive.
    pub fn path_to(&self, index: u32) -> Vec<TokenId> {
        let mut rev = Vec::new();
        let mut at = index;
        while at != ROOT_PARENT {
            let node = &self.nodes[at as usize];
            rev.push(node.token);
            at = node.parent;
        }
        rev.reverse();
        rev
    }

    /// Indices of nodes without children. Empty for a root-only tree.
    pub fn leaf_indices(&self) -> Vec<u32> {
        let mut has_child = vec![false; self.nodes.len()];
        for n in &self.nodes {
            if n.parent != ROOT_PARENT {
                has_child[n.parent as usize] = true;
            }
        }
        (0..self.nodes.len() as u32)
            .filter(|i| !has_child[*i as usize])
            .collect()
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Structural invariants: parent indices precede children, depth and
    /// cumulative log-probabilities are consistent, siblings are distinct.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.parent != ROOT_PARENT && n.parent as usize >= i {
                return Err(Error::InvalidParam(format!(
                    "node {i} has parent {} not before it",
                    n.parent
                )));
            }
            let (pcum, pdepth) = if n.parent == ROOT_PARENT {
                (0.0, 0)
            } else {
                let p = &self.nodes[n.parent as usize];
                (p.cum_logprob, p.depth)
            };
            if (n.cum_logprob - (pcum + n.logprob as f64)).abs() > 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "node {i} cum_logprob inconsistent"
                )));
            }
            if n.depth != pdepth + 1 {
                return Err(Error::InvalidParam(format!("node {i} depth inconsistent")));
            }
            for (j, other) in self.nodes.iter().enumerate().skip(i + 1) {
                if other.parent == n.parent && other.token == n.token {
                    return Err(Error::InvalidParam(format!(
                        "nodes {i} and {j} are duplicate siblings"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draft-tree construction knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DraftParams {
    /// Maximum node count (root excluded).
    pub budget: usize,
    /// Candidates proposed per frontier node per pass.
    pub branching: usize,
    /// Number of draft forward passes.
    pub depth: usize,
}

impl DraftParams {
    pub fn new(budget: usize, branching: usize, depth: usize) -> Result<Self> {
        if budget == 0 || branching == 0 || depth == 0 {
            return Err(Error::InvalidParam(format!(
                "draft params must be positive (budget {budget}, branching {branching}, depth {depth})"
            )));
        }
        Ok(Self {
            budget,
            branching,
            depth,
        })
    }
}

impl Default for DraftParams {
    fn default() -> Self {
        Self {
            budget: 32,
            branching: 2,
            depth: 4,
        }
    }
}

/// Origin a growth node hangs from: a logical root with a context prefix and
/// a base cumulative log-probability. Tree building uses one origin; proactive
/// expansion uses one per head.
#[derive(Debug, Clone)]
pub(crate) struct GrowthOrigin {
    pub context: Vec<TokenId>,
    pub base_cum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum GrowthParent {
    Origin(u32),
    Node(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GrowthNode {
    pub origin: u32,
    pub parent: GrowthParent,
    pub token: TokenId,
    pub logprob: f32,
    pub cum_logprob: f64,
    /// 1 for direct children of an origin.
    pub depth: u32,
}

fn growth_path(nodes: &[GrowthNode], index: u32) -> Vec<TokenId> {
    let mut rev = Vec::new();
    let mut at = index;
    loop {
        let n = &nodes[at as usize];
        rev.push(n.token);
        match n.parent {
            GrowthParent::Origin(_) => break,
            GrowthParent::Node(p) => at = p,
        }
    }
    rev.reverse();
    rev
}

/// Runs `passes` pooled draft passes over a forest of origins. Deterministic:
/// the pruning order is cumulative log-probability descending, ties broken by
/// smaller depth (keep the shallower, cheaper node), then smaller token id,
/// then origin and path.
pub(crate) fn grow_forest(
    draft: &ModelOracle,
    origins: &[GrowthOrigin],
    mut nodes: Vec<GrowthNode>,
    passes: usize,
    branching: usize,
    budget: usize,
) -> Vec<GrowthNode> {
    for _ in 0..passes {
        let mut has_child = vec![false; nodes.len()];
        for n in &nodes {
            if let GrowthParent::Node(p) = n.parent {
                has_child[p as usize] = true;
            }
        }
        let mut origin_occupied = vec![false; origins.len()];
        for n in &nodes {
            if let GrowthParent::Origin(o) = n.parent {
                origin_occupied[o as usize] = true;
            }
        }

        // Frontier: every childless node, plus origins that have no children
        // yet (only possible before the first surviving pass).
        let mut proposals: Vec<GrowthNode> = Vec::new();
        let mut propose_from =
            |origin: u32, parent: GrowthParent, context: &[TokenId], base_cum: f64, depth: u32| {
                let dist = draft.next_dist(context);
                for token in dist.by_rank().into_iter().take(branching) {
                    let lp = dist.prob(token).ln() as f32;
                    proposals.push(GrowthNode {
                        origin,
                        parent,
                        token,
                        logprob: lp,
                        cum_logprob: base_cum + lp as f64,
                        depth: depth + 1,
                    });
                }
            };

        for (o, origin) in origins.iter().enumerate() {
            if !origin_occupied[o] {
                propose_from(
                    o as u32,
                    GrowthParent::Origin(o as u32),
                    &origin.context,
                    origin.base_cum,
                    0,
                );
            }
        }
        for i in 0..nodes.len() {
            if has_child[i] {
                continue;
            }
            let n = &nodes[i];
            let mut context = origins[n.origin as usize].context.clone();
            context.extend(growth_path(&nodes, i as u32));
            propose_from(
                n.origin,
                GrowthParent::Node(i as u32),
                &context,
                n.cum_logprob,
                n.depth,
            );
        }

        if proposals.is_empty() {
            break;
        }
        nodes = prune_pool(origins.len(), nodes, proposals, budget);
    }
    nodes
}

/// Pools existing nodes with proposals and keeps the top-`budget` by the
/// pruning order. Because cum_logprob is nonincreasing along any path and the
/// depth tie-break favors parents, the greedy prefix is ancestor-closed.
fn prune_pool(
    origin_count: usize,
    existing: Vec<GrowthNode>,
    proposals: Vec<GrowthNode>,
    budget: usize,
) -> Vec<GrowthNode> {
    struct Entry {
        node: GrowthNode,
        path: Vec<TokenId>,
        old_index: Option<u32>,
    }

    let existing_len = existing.len();
    let mut entries: Vec<Entry> = Vec::with_capacity(existing_len + proposals.len());
    for (i, node) in existing.iter().enumerate() {
        entries.push(Entry {
            path: growth_path(&existing, i as u32),
            node: node.clone(),
            old_index: Some(i as u32),
        });
    }
    for node in proposals {
        let mut path = match node.parent {
            GrowthParent::Origin(_) => Vec::new(),
            GrowthParent::Node(p) => growth_path(&existing, p),
        };
        path.push(node.token);
        entries.push(Entry {
            node,
            path,
            old_index: None,
        });
    }

    entries.sort_by(|a, b| {
        b.node
            .cum_logprob
            .total_cmp(&a.node.cum_logprob)
            .then(a.node.depth.cmp(&b.node.depth))
            .then(a.node.token.cmp(&b.node.token))
            .then(a.node.origin.cmp(&b.node.origin))
            .then(a.path.cmp(&b.path))
    });
    entries.truncate(budget);

    // Canonical storage order: by origin, then depth, then path. Parents sort
    // before their children, so indices can be remapped in one sweep.
    entries.sort_by(|a, b| {
        a.node
            .origin
            .cmp(&b.node.origin)
            .then(a.node.depth.cmp(&b.node.depth))
            .then(a.path.cmp(&b.path))
    });

    let _ = origin_count;
    let mut old_to_new = vec![u32::MAX; existing_len];
    let mut key_to_new: std::collections::HashMap<(u32, Vec<TokenId>), u32> =
        std::collections::HashMap::new();
    for (new_idx, e) in entries.iter().enumerate() {
        if let Some(old) = e.old_index {
            old_to_new[old as usize] = new_idx as u32;
        }
        key_to_new.insert((e.node.origin, e.path.clone()), new_idx as u32);
    }

    entries
        .into_iter()
        .map(|e| {
            let mut node = e.node;
            if let GrowthParent::Node(p) = node.parent {
                // The parent survived: it sorts strictly before this node.
                let mapped = if (p as usize) < existing_len && old_to_new[p as usize] != u32::MAX {
                    old_to_new[p as usize]
                } else {
                    let mut parent_path = e.path.clone();
                    parent_path.pop();
                    key_to_new[&(node.origin, parent_path)]
                };
                node.parent = GrowthParent::Node(mapped);
            }
            node
        })
        .collect()
}

fn forest_to_tree(nodes: Vec<GrowthNode>, base_context_len: u32) -> DraftTree {
    let converted = nodes
        .into_iter()
        .map(|n| DraftNode {
            token: n.token,
            parent: match n.parent {
                GrowthParent::Origin(_) => ROOT_PARENT,
                GrowthParent::Node(p) => p,
            },
            logprob: n.logprob,
            cum_logprob: n.cum_logprob,
            depth: n.depth,
        })
        .collect();
    DraftTree {
        base_context_len,
        nodes: converted,
    }
}

fn tree_to_forest(tree: &DraftTree) -> Vec<GrowthNode> {
    tree.nodes
        .iter()
        .map(|n| GrowthNode {
            origin: 0,
            parent: if n.parent == ROOT_PARENT {
                GrowthParent::Origin(0)
            } else {
                GrowthParent::Node(n.parent)
            },
            token: n.token,
            logprob: n.logprob,
            cum_logprob: n.cum_logprob,
            depth: n.depth,
        })
        .collect()
}

/// Builds a draft tree from scratch: exactly `params.depth` passes over
/// `context`.
pub fn build_draft_tree(
    draft: &ModelOracle,
    context: &[TokenId],
    params: &DraftParams,
) -> DraftTree {
    grow_draft_tree(
        draft,
        context,
        DraftTree::empty(context.len() as u32),
        params.depth,
        params,
    )
}

/// Runs `passes` additional draft passes over an existing tree (used when a
/// preserved proactive branch seeds the round). The seed's nodes count against
/// the same budget.
pub fn grow_draft_tree(
    draft: &ModelOracle,
    context: &[TokenId],
    seed: DraftTree,
    passes: usize,
    params: &DraftParams,
) -> DraftTree {
    let origins = [GrowthOrigin {
        context: context.to_vec(),
        base_cum: 0.0,
    }];
    let forest = grow_forest(
        draft,
        &origins,
        tree_to_forest(&seed),
        passes,
        params.branching,
        params.budget,
    );
    forest_to_tree(forest, context.len() as u32)
}

/// Root-to-leaf path with the highest leaf cumulative log-probability.
/// Ties prefer the deeper leaf (longer speculative coverage), then the
/// lexicographically smaller token sequence.
pub fn best_path(tree: &DraftTree) -> Result<Vec<TokenId>> {
    if tree.is_empty() {
        return Err(Error::NoDraft);
    }
    let mut best: Option<(f64, u32, Vec<TokenId>)> = None;
    for leaf in tree.leaf_indices() {
        let node = &tree.nodes[leaf as usize];
        let path = tree.path_to(leaf);
        let better = match &best {
            None => true,
            Some((cum, depth, best_path)) => match node.cum_logprob.total_cmp(cum) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => match node.depth.cmp(depth) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => path < *best_path,
                },
            },
        };
        if better {
            best = Some((node.cum_logprob, node.depth, path));
        }
    }
    Ok(best.expect("nonempty tree has a leaf").2)
}

/// Leaf index of [`best_path`].
pub fn best_leaf(tree: &DraftTree) -> Result<u32> {
    let path = best_path(tree)?;
    for leaf in tree.leaf_indices() {
        if tree.path_to(leaf) == path {
            return Ok(leaf);
        }
    }
    unreachable!("best_path returned a path not in the tree")
}
