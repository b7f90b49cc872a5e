//! Categorical language-model oracles and sampling primitives.
//!
//! A [`ModelOracle`] stands in for a draft or target LLM: it maps a token
//! context to a next-token distribution over a dense vocabulary `[0, V)`.
//! Two kinds exist — a context-free table and an n-gram conditional map with
//! uniform fallback — which is enough to make every downstream property
//! exactly checkable. Temperature is baked in at construction time.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token id in `[0, V)`. The vocabulary is a dense integer range; there is no
/// string tokenizer.
pub type TokenId = u32;

/// Temperatures below this are treated as greedy argmax to avoid overflow in
/// the power transform.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

const DIST_SUM_TOLERANCE: f64 = 1e-12;

/// A validated categorical distribution over token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    probs: Vec<f64>,
}

impl Dist {
    /// Wraps a probability vector, checking nonnegativity and that the mass
    /// sums to 1 within 1e-12.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDist("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| **p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidDist(format!("bad entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(Error::InvalidDist(format!("sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes arbitrary nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDist("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidDist(format!("bad weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDist("all weights zero".into()));
        }
        let probs = weights.iter().map(|w| w / sum).collect();
        Ok(Self { probs })
    }

    /// Uniform distribution over `vocab` tokens.
    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    /// One-hot distribution on `token`.
    pub fn one_hot(vocab: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    /// Highest-probability token, ties broken by lowest token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Tokens sorted by descending probability, ties by ascending id.
    /// Zero-probability tokens are excluded.
    pub fn by_rank(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId)
            .filter(|t| self.probs[*t as usize] > 0.0)
            .collect();
        ids.sort_by(|a, b| {
            self.probs[*b as usize]
                .partial_cmp(&self.probs[*a as usize])
                .unwrap()
                .then(a.cmp(b))
        });
        ids
    }
}

/// Applies temperature `T`: `result_i ∝ base_i^(1/T)`, renormalized.
/// `T` below [`GREEDY_TEMPERATURE`] collapses to a one-hot argmax.
pub fn apply_temperature(base: &Dist, temperature: f64) -> Result<Dist> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidParam(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature < GREEDY_TEMPERATURE {
        return Ok(Dist::one_hot(base.len(), base.argmax()));
    }
    let inv = 1.0 / temperature;
    let weights: Vec<f64> = base.probs().iter().map(|p| p.powf(inv)).collect();
    Dist::from_weights(&weights)
}

#[derive(Debug, Clone)]
enum ModelKind {
    Table {
        dist: Dist,
    },
    Ngram {
        order: usize,
        rows: HashMap<Vec<TokenId>, Dist>,
        fallback: Dist,
    },
}

/// A categorical next-token distribution source playing the role of a draft
/// or target model. Immutable after construction and safe to share.
#[derive(Debug, Clone)]
pub struct ModelOracle {
    vocab: usize,
    temperature: f64,
    kind: ModelKind,
}

impl ModelOracle {
    /// Context-free model: every context yields the same distribution.
    pub fn table(probs: &[f64], temperature: f64) -> Result<Self> {
        let dist = apply_temperature(&Dist::from_weights(probs)?, temperature)?;
        Ok(Self {
            vocab: probs.len(),
            temperature,
            kind: ModelKind::Table { dist },
        })
    }

    /// N-gram model conditioning on the last `order` context tokens, with a
    /// uniform fallback for unseen (or too-short) contexts. Fallback rather
    /// than backoff keeps the oracle fully reproducible from its rows.
    pub fn ngram(
        vocab: usize,
        order: usize,
        rows: HashMap<Vec<TokenId>, Vec<f64>>,
        temperature: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParam("ngram order must be >= 1".into()));
        }
        let mut cooked = HashMap::with_capacity(rows.len());
        for (ctx, probs) in rows {
            if ctx.len() != order {
                return Err(Error::InvalidParam(format!(
                    "ngram row context has {} tokens, order is {order}",
                    ctx.len()
                )));
            }
            if ctx.iter().any(|t| *t as usize >= vocab) {
                return Err(Error::InvalidParam(
                    "ngram row context token out of vocab".into(),
                ));
            }
            if probs.len() != vocab {
                return Err(Error::InvalidDist(format!(
                    "ngram row has {} entries, vocab is {vocab}",
                    probs.len()
                )));
            }
            let dist = apply_temperature(&Dist::from_weights(&probs)?, temperature)?;
            cooked.insert(ctx, dist);
        }
        let fallback = apply_temperature(&Dist::uniform(vocab), temperature)?;
        Ok(Self {
            vocab,
            temperature,
            kind: ModelKind::Ngram {
                order,
                rows: cooked,
                fallback,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Next-token distribution for `context`. Temperature is already applied;
    /// the result is a pure function of `(model, context)`.
    pub fn next_dist(&self, context: &[TokenId]) -> Dist {
        debug_assert!(
            context.iter().all(|t| (*t as usize) < self.vocab),
            "context token out of vocab"
        );
        match &self.kind {
            ModelKind::Table { dist } => dist.clone(),
            ModelKind::Ngram {
                order,
                rows,
                fallback,
            } => {
                if context.len() < *order {
                    return fallback.clone();
                }
                let key = &context[context.len() - order..];
                rows.get(key).cloned().unwrap_or_else(|| fallback.clone())
            }
        }
    }
}

/// Purpose tag a stream is split on, so that independent decisions inside a
/// round never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    /// Acceptance and bonus draws for one verification round.
    Verify,
    /// Direct autoregressive sampling (server-only and layer-split modes).
    Autoregressive,
    /// One-way delay jitter, edge -> server.
    JitterRequest,
    /// One-way delay jitter, server -> edge.
    JitterResponse,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Verify => 1,
            StreamPurpose::Autoregressive => 2,
            StreamPurpose::JitterRequest => 3,
            StreamPurpose::JitterResponse => 4,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic random stream, splittable per `(session, round, purpose)`.
/// Identical seed and call sequence reproduce identical outputs, which is what
/// makes batched verification bitwise comparable to solo runs.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn derive(seed: u64, session: u64, round: u64, purpose: StreamPurpose) -> Self {
        let mut acc = splitmix64(seed ^ 0x5bd1_e995_c6a3_7d21);
        acc = splitmix64(acc ^ session);
        acc = splitmix64(acc ^ round);
        acc = splitmix64(acc ^ purpose.tag());
        Self {
            rng: ChaCha8Rng::seed_from_u64(acc),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Inverse-CDF sampling scanning tokens in ascending id order; this fixed
/// coupling is what makes replays and batch/solo comparisons deterministic.
pub fn sample(dist: &Dist, rng: &mut RngStream) -> TokenId {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, p) in dist.probs().iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        cum += p;
        last_positive = i;
        if u < cum {
            return i as TokenId;
        }
    }
    // Float roundoff can leave cum a hair under 1.0.
    last_positive as TokenId
}
