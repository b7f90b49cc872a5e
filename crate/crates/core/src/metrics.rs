//! Measured outputs: inter-token latency, server throughput, tokens per
//! verification round, alignment rates, busy fraction, and cost efficiency.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::proactive::RoundRecord;
use crate::simnet::{EventKind, SchedEvent, SchedRecord, SimEvent};

/// Hourly rates for the server GPU and each edge GPU, plus how many edges
/// are provisioned per concurrent request.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingConfig {
    #[serde(default = "default_server_rate")]
    pub server_rate: f64,
    #[serde(default = "default_edge_rate")]
    pub edge_rate: f64,
    #[serde(default = "default_edges_per_request")]
    pub edges_per_request: u32,
}

fn default_server_rate() -> f64 {
    4.05
}
fn default_edge_rate() -> f64 {
    0.35
}
fn default_edges_per_request() -> u32 {
    2
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            server_rate: default_server_rate(),
            edge_rate: default_edge_rate(),
            edges_per_request: default_edges_per_request(),
        }
    }
}

/// Generated tokens per dollar, in thousands. Edge-assisted deployments pay
/// `edges_per_request` edges per concurrent request on top of the server;
/// server-only modes pay the server alone (`uses_edges = false`).
pub fn cost_efficiency(
    throughput_tok_s: f64,
    pricing: &PricingConfig,
    concurrent_requests: u32,
    uses_edges: bool,
) -> Result<f64> {
    if throughput_tok_s < 0.0 {
        return Err(Error::InvalidParam("negative throughput".into()));
    }
    let edge_rate = if uses_edges {
        pricing.edges_per_request as f64 * concurrent_requests as f64 * pricing.edge_rate
    } else {
        0.0
    };
    let total_rate = pricing.server_rate + edge_rate;
    if total_rate <= 0.0 {
        return Err(Error::InvalidParam("zero total $/hour rate".into()));
    }
    Ok(throughput_tok_s * 3600.0 / total_rate / 1000.0)
}

/// Everything one run produces: per-round records, the event trace, the
/// scheduler trace, and the span/busy accounting.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rounds: Vec<RoundRecord>,
    pub events: Vec<SimEvent>,
    pub sched: Vec<SchedRecord>,
    pub span_ms: f64,
    pub busy_ms: f64,
    /// Measurement window start; warmup stripping moves it past the first
    /// round of every session.
    pub measure_start_ms: f64,
}

/// Measured outputs of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub itl_mean_ms: f64,
    pub itl_p50_ms: f64,
    pub itl_p95_ms: f64,
    pub server_throughput_tok_s: f64,
    pub tokens_per_verify_mean: f64,
    pub tokens_per_verify_std: f64,
    pub cost_k_tokens_per_dollar: f64,
    pub p_align: f64,
    pub p_match_given_align: f64,
    pub server_busy_fraction: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Pure function of the trace: ITL from consecutive per-session commit
/// timestamps, throughput over the measurement window, tokens-per-verify
/// over the round records, busy fraction from the scheduler trace.
/// Cost is attached separately ([`cost_efficiency`]) since it needs pricing.
pub fn compute_metrics(trace: &RunTrace) -> Result<Metrics> {
    let mut commits: Vec<(u64, f64)> = trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::TokenCommit)
        .map(|e| (e.session, e.time_ms))
        .collect();
    if commits.is_empty() {
        return Err(Error::EmptyTrace("no committed tokens".into()));
    }
    commits.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut gaps: Vec<f64> = Vec::new();
    for win in commits.windows(2) {
        if win[0].0 == win[1].0 {
            gaps.push(win[1].1 - win[0].1);
        }
    }
    let itl_mean_ms = if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    let mut sorted = gaps.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let itl_p50_ms = percentile(&sorted, 0.50);
    let itl_p95_ms = percentile(&sorted, 0.95);

    let window_ms = trace.span_ms - trace.measure_start_ms;
    let server_throughput_tok_s = if window_ms > 0.0 {
        commits.len() as f64 / window_ms * 1000.0
    } else {
        0.0
    };

    let (tokens_per_verify_mean, tokens_per_verify_std) = if trace.rounds.is_empty() {
        (0.0, 0.0)
    } else {
        let n = trace.rounds.len() as f64;
        let mean = trace
            .rounds
            .iter()
            .map(|r| r.tokens_committed as f64)
            .sum::<f64>()
            / n;
        let var = trace
            .rounds
            .iter()
            .map(|r| {
                let d = r.tokens_committed as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    };

    let active: Vec<&RoundRecord> = trace.rounds.iter().filter(|r| r.proactive_active).collect();
    let aligned = active.iter().filter(|r| r.aligned).count();
    let matched = active.iter().filter(|r| r.preserved > 0).count();
    let p_align = if active.is_empty() {
        0.0
    } else {
        aligned as f64 / active.len() as f64
    };
    let p_match_given_align = if aligned == 0 {
        0.0
    } else {
        matched as f64 / aligned as f64
    };

    let server_busy_fraction = if trace.span_ms > 0.0 {
        (trace.busy_ms / trace.span_ms).min(1.0)
    } else {
        0.0
    };

    Ok(Metrics {
        itl_mean_ms,
        itl_p50_ms,
        itl_p95_ms,
        server_throughput_tok_s,
        tokens_per_verify_mean,
        tokens_per_verify_std,
        cost_k_tokens_per_dollar: 0.0,
        p_align,
        p_match_given_align,
        server_busy_fraction,
    })
}

/// Drops each session's first verification round (and its token commits) and
/// moves the measurement window start past the slowest session's warmup.
/// Reported summaries exclude the warmup round; sessions with a single round
/// are left untouched.
pub fn strip_warmup(trace: &RunTrace) -> RunTrace {
    use std::collections::HashMap;

    let mut first_round: HashMap<u64, u64> = HashMap::new();
    let mut round_count: HashMap<u64, usize> = HashMap::new();
    for r in &trace.rounds {
        let e = first_round.entry(r.session).or_insert(r.round);
        *e = (*e).min(r.round);
        *round_count.entry(r.session).or_insert(0) += 1;
    }
    let strippable = |session: u64, round: u64| {
        round_count.get(&session).copied().unwrap_or(0) >= 2
            && first_round.get(&session) == Some(&round)
    };

    let mut out = trace.clone();
    let mut measure_start = trace.measure_start_ms;
    for r in &trace.rounds {
        if strippable(r.session, r.round) {
            measure_start = measure_start.max(r.commit_time_ms);
        }
    }
    out.rounds.retain(|r| !strippable(r.session, r.round));
    out.events
        .retain(|e| !(e.kind == EventKind::TokenCommit && strippable(e.session, e.round)));
    out.measure_start_ms = measure_start;
    out
}

/// Server busy intervals re-derived from the scheduler trace; used by the
/// trace-level assertions and by `busy_ms` recomputation in reports.
pub fn busy_ms_from_sched(sched: &[SchedRecord]) -> f64 {
    let mut busy = 0.0;
    let mut start: Option<f64> = None;
    for rec in sched {
        match rec.event {
            SchedEvent::StartBatch => start = Some(rec.time_ms),
            SchedEvent::EndBatch => {
                if let Some(s) = start.take() {
                    busy += rec.time_ms - s;
                }
            }
            SchedEvent::Admit => {}
        }
    }
    busy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::SimEvent;

    fn commit(session: u64, round: u64, time_ms: f64) -> SimEvent {
        SimEvent {
            time_ms,
            seq: 0,
            kind: EventKind::TokenCommit,
            session,
            round,
            detail: String::new(),
        }
    }

    fn round_rec(session: u64, round: u64, tokens: u32, time: f64) -> RoundRecord {
        RoundRecord {
            session,
            round,
            accepted_len: tokens - 1,
            bonus: 0,
            aligned: false,
            preserved: 0,
            t_draft: 0,
            h_expan: 0,
            proactive_active: false,
            tokens_committed: tokens,
            commit_time_ms: time,
            depth_used: 1,
        }
    }

    #[test]
    fn cost_efficiency_published_rows() {
        let pricing = PricingConfig::default();
        // Server-only: 31.78 tok/s at $4.05/h.
        let server_only = cost_efficiency(31.78, &pricing, 1, false).unwrap();
        assert!((server_only - 28.25).abs() / 28.25 < 0.015, "{server_only}");
        // Edge-assisted: 66.54 tok/s at $4.05 + 2 * $0.35.
        let edge = cost_efficiency(66.54, &pricing, 1, true).unwrap();
        assert!((edge - 50.60).abs() / 50.60 < 0.015, "{edge}");
        // Exact formula value.
        assert!((edge - 66.54 * 3600.0 / 4.75 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn cost_efficiency_edges_and_errors() {
        let pricing = PricingConfig::default();
        assert_eq!(cost_efficiency(0.0, &pricing, 4, true).unwrap(), 0.0);
        let zero = PricingConfig {
            server_rate: 0.0,
            edge_rate: 0.0,
            edges_per_request: 2,
        };
        assert!(cost_efficiency(10.0, &zero, 1, true).is_err());

        // Linear in throughput, inversely linear in the total rate.
        let a = cost_efficiency(10.0, &pricing, 1, true).unwrap();
        let b = cost_efficiency(20.0, &pricing, 1, true).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        let doubled = PricingConfig {
            server_rate: 2.0 * 4.05,
            edge_rate: 2.0 * 0.35,
            edges_per_request: 2,
        };
        let c = cost_efficiency(10.0, &doubled, 1, true).unwrap();
        assert!((a - 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn itl_from_consecutive_commits() {
        let trace = RunTrace {
            events: vec![commit(0, 1, 0.0), commit(0, 2, 30.0), commit(0, 3, 60.0)],
            span_ms: 60.0,
            ..Default::default()
        };
        let m = compute_metrics(&trace).unwrap();
        assert!((m.itl_mean_ms - 30.0).abs() < 1e-12);
        assert!((m.itl_p50_ms - 30.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_per_verify_hand_arithmetic() {
        // Rounds accepting {3, 3, 5} plus one bonus each: 4, 4, 6.
        let trace = RunTrace {
            rounds: vec![
                round_rec(0, 1, 4, 10.0),
                round_rec(0, 2, 4, 20.0),
                round_rec(0, 3, 6, 30.0),
            ],
            events: (0..14).map(|i| commit(0, 1 + i / 5, i as f64)).collect(),
            span_ms: 30.0,
            ..Default::default()
        };
        let m = compute_metrics(&trace).unwrap();
        assert!((m.tokens_per_verify_mean - 14.0 / 3.0).abs() < 1e-9);
        assert!((m.server_throughput_tok_s - 14.0 / 30.0 * 1000.0).abs() < 1e-9);

        // Single round has zero spread.
        let single = RunTrace {
            rounds: vec![round_rec(0, 1, 4, 10.0)],
            events: vec![commit(0, 1, 10.0)],
            span_ms: 10.0,
            ..Default::default()
        };
        assert_eq!(compute_metrics(&single).unwrap().tokens_per_verify_std, 0.0);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            compute_metrics(&RunTrace::default()),
            Err(Error::EmptyTrace(_))
        ));
    }

    #[test]
    fn warmup_strip_drops_first_round_per_session() {
        let trace = RunTrace {
            rounds: vec![
                round_rec(0, 1, 2, 10.0),
                round_rec(0, 2, 2, 20.0),
                round_rec(1, 1, 2, 12.0),
                round_rec(1, 2, 2, 22.0),
            ],
            events: vec![
                commit(0, 1, 10.0),
                commit(0, 2, 20.0),
                commit(1, 1, 12.0),
                commit(1, 2, 22.0),
            ],
            span_ms: 22.0,
            ..Default::default()
        };
        let stripped = strip_warmup(&trace);
        assert_eq!(stripped.rounds.len(), 2);
        assert!(stripped.rounds.iter().all(|r| r.round == 2));
        assert_eq!(stripped.events.len(), 2);
        assert_eq!(stripped.measure_start_ms, 12.0);

        // A one-round session is left alone.
        let tiny = RunTrace {
            rounds: vec![round_rec(0, 1, 2, 10.0)],
            events: vec![commit(0, 1, 10.0)],
            span_ms: 10.0,
            ..Default::default()
        };
        assert_eq!(strip_warmup(&tiny).rounds.len(), 1);
    }
}
