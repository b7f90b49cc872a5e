//! Experiment orchestration: sweep expansion, CSV emission, and report
//! recomputation.
//!
//! Every run writes three trace CSVs (`rounds.csv`, `sched.csv`,
//! `events.csv`) plus its own `summary_row.csv`; a sweep collects all rows
//! into one `summary.csv`. Numbers are written in shortest round-trip form,
//! so recomputing a summary from the emitted CSVs reproduces it exactly.
//! Summaries exclude each session's first round as warmup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::metrics::{
    busy_ms_from_sched, compute_metrics, cost_efficiency, strip_warmup, Metrics, RunTrace,
};
use crate::proactive::RoundRecord;
use crate::simnet::{
    run_simulation, EventKind, Mode, SchedEvent, SchedRecord, SimEvent, SimOutput,
};

/// One line of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub rtt_ms: f64,
    pub depth: u32,
    pub sessions: u32,
    pub itl_mean_ms: f64,
    pub itl_p50_ms: f64,
    pub throughput_tok_s: f64,
    pub tpv_mean: f64,
    pub tpv_std: f64,
    pub p_align: f64,
    pub busy_frac: f64,
    pub cost_k_tok_per_usd: f64,
}

pub const SUMMARY_HEADER: &str = "mode,rtt_ms,depth,sessions,itl_mean_ms,itl_p50_ms,throughput_tok_s,tpv_mean,tpv_std,p_align,busy_frac,cost_k_tok_per_usd";

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.rtt_ms,
            self.depth,
            self.sessions,
            self.itl_mean_ms,
            self.itl_p50_ms,
            self.throughput_tok_s,
            self.tpv_mean,
            self.tpv_std,
            self.p_align,
            self.busy_frac,
            self.cost_k_tok_per_usd
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Decode(format!(
                "summary row has {} fields, expected 12",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Decode(format!("summary field {i}: bad number {:?}", f[i])))
        };
        Ok(SummaryRow {
            mode: f[0].parse()?,
            rtt_ms: num(1)?,
            depth: num(2)? as u32,
            sessions: num(3)? as u32,
            itl_mean_ms: num(4)?,
            itl_p50_ms: num(5)?,
            throughput_tok_s: num(6)?,
            tpv_mean: num(7)?,
            tpv_std: num(8)?,
            p_align: num(9)?,
            busy_frac: num(10)?,
            cost_k_tok_per_usd: num(11)?,
        })
    }
}

/// Warmup-stripped metrics plus the cost column for one finished run.
pub fn summarize(cfg: &ExperimentConfig, out: &SimOutput) -> Result<SummaryRow> {
    let stripped = strip_warmup(&out.trace);
    let metrics = compute_metrics(&stripped)?;
    row_from_metrics(cfg, out.depth_final, &metrics)
}

fn row_from_metrics(cfg: &ExperimentConfig, depth: u32, m: &Metrics) -> Result<SummaryRow> {
    let cost = cost_efficiency(
        m.server_throughput_tok_s,
        &cfg.pricing,
        cfg.sessions,
        cfg.mode.uses_edges(),
    )?;
    Ok(SummaryRow {
        mode: cfg.mode,
        rtt_ms: cfg.rtt_ms,
        depth,
        sessions: cfg.sessions,
        itl_mean_ms: m.itl_mean_ms,
        itl_p50_ms: m.itl_p50_ms,
        throughput_tok_s: m.server_throughput_tok_s,
        tpv_mean: m.tokens_per_verify_mean,
        tpv_std: m.tokens_per_verify_std,
        p_align: m.p_align,
        busy_frac: m.server_busy_fraction,
        cost_k_tok_per_usd: cost,
    })
}

/// Runs the config (sweep-expanded), writing per-run trace CSVs and the
/// collected `summary.csv` under `out_dir` when given. All seeds come from
/// the config; outputs are written atomically.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let runs = cfg.expand_sweep();
    let mut rows = Vec::with_capacity(runs.len());
    for (i, run_cfg) in runs.iter().enumerate() {
        let out = run_simulation(run_cfg)?;
        let row = summarize(run_cfg, &out)?;
        if let Some(dir) = out_dir {
            let run_dir = dir.join(format!("run_{i:03}_{}_rtt{}", run_cfg.mode, run_cfg.rtt_ms));
            std::fs::create_dir_all(&run_dir)?;
            write_rounds_csv(&run_dir.join("rounds.csv"), &out.trace.rounds)?;
            write_sched_csv(&run_dir.join("sched.csv"), &out.trace.sched)?;
            write_events_csv(&run_dir.join("events.csv"), &out.trace.events)?;
            write_atomic(
                &run_dir.join("summary_row.csv"),
                &format!("{SUMMARY_HEADER}\n{}\n", row.to_csv_line()),
            )?;
            write_tokens_csv(&run_dir.join("tokens.csv"), &out.committed)?;
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut text = String::from(SUMMARY_HEADER);
        text.push('\n');
        for row in &rows {
            text.push_str(&row.to_csv_line());
            text.push('\n');
        }
        write_atomic(&dir.join("summary.csv"), &text)?;
    }
    Ok(rows)
}

/// Rebuilds the trace from one run directory's CSVs, recomputes the metrics
/// with the same warmup policy, and re-derives the summary row. Identity
/// columns (mode, rtt, depth, sessions) come from the stored row; pricing
/// comes from the config.
pub fn report(run_dir: &Path, cfg: &ExperimentConfig) -> Result<SummaryRow> {
    let rounds = read_rounds_csv(&run_dir.join("rounds.csv"))?;
    let sched = read_sched_csv(&run_dir.join("sched.csv"))?;
    let events = read_events_csv(&run_dir.join("events.csv"))?;
    let stored = read_summary_row(&run_dir.join("summary_row.csv"))?;

    let span_ms = events.iter().map(|e| e.time_ms).fold(0.0, f64::max);
    let trace = RunTrace {
        rounds,
        events,
        busy_ms: busy_ms_from_sched(&sched),
        sched,
        span_ms,
        measure_start_ms: 0.0,
    };
    let stripped = strip_warmup(&trace);
    let metrics = compute_metrics(&stripped)?;
    let cost = cost_efficiency(
        metrics.server_throughput_tok_s,
        &cfg.pricing,
        stored.sessions,
        stored.mode.uses_edges(),
    )?;
    Ok(SummaryRow {
        mode: stored.mode,
        rtt_ms: stored.rtt_ms,
        depth: stored.depth,
        sessions: stored.sessions,
        itl_mean_ms: metrics.itl_mean_ms,
        itl_p50_ms: metrics.itl_p50_ms,
        throughput_tok_s: metrics.server_throughput_tok_s,
        tpv_mean: metrics.tokens_per_verify_mean,
        tpv_std: metrics.tokens_per_verify_std,
        p_align: metrics.p_align,
        busy_frac: metrics.server_busy_fraction,
        cost_k_tok_per_usd: cost,
    })
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

const ROUNDS_HEADER: &str =
    "session,round,accepted_len,bonus,aligned,preserved,t_draft,h_expan,proactive,tokens_committed,commit_time_ms,depth_used";

pub fn write_rounds_csv(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    let mut text = String::from(ROUNDS_HEADER);
    text.push('\n');
    for r in rounds {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.session,
            r.round,
            r.accepted_len,
            r.bonus,
            r.aligned as u8,
            r.preserved,
            r.t_draft,
            r.h_expan,
            r.proactive_active as u8,
            r.tokens_committed,
            r.commit_time_ms,
            r.depth_used
        )
        .expect("write to string");
    }
    write_atomic(path, &text)
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Decode(format!(
                "rounds.csv line {lineno}: {} fields",
                f.len()
            )));
        }
        let p = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Decode(format!("rounds.csv line {lineno} field {i}")))
        };
        out.push(RoundRecord {
            session: p(0)? as u64,
            round: p(1)? as u64,
            accepted_len: p(2)? as u32,
            bonus: p(3)? as TokenId,
            aligned: p(4)? != 0.0,
            preserved: p(5)? as u32,
            t_draft: p(6)? as u32,
            h_expan: p(7)? as u32,
            proactive_active: p(8)? != 0.0,
            tokens_committed: p(9)? as u32,
            commit_time_ms: p(10)?,
            depth_used: p(11)? as u32,
        });
    }
    Ok(out)
}

const SCHED_HEADER: &str = "time_ms,event,sessions,batch_size,padded_len";

pub fn write_sched_csv(path: &Path, sched: &[SchedRecord]) -> Result<()> {
    let mut text = String::from(SCHED_HEADER);
    text.push('\n');
    for r in sched {
        let sessions = r
            .sessions
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            text,
            "{},{},{},{},{}",
            r.time_ms,
            r.event.as_str(),
            sessions,
            r.batch_size,
            r.padded_len
        )
        .expect("write to string");
    }
    write_atomic(path, &text)
}

pub fn read_sched_csv(path: &Path) -> Result<Vec<SchedRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Decode(format!(
                "sched.csv line {lineno}: {} fields",
                f.len()
            )));
        }
        let sessions = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split(';')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Decode(format!("sched.csv line {lineno}: sessions")))
                })
                .collect::<Result<Vec<u64>>>()?
        };
        out.push(SchedRecord {
            time_ms: f[0]
                .parse()
                .map_err(|_| Error::Decode(format!("sched.csv line {lineno}: time_ms")))?,
            event: f[1].parse::<SchedEvent>()?,
            sessions,
            batch_size: f[3]
                .parse()
                .map_err(|_| Error::Decode(format!("sched.csv line {lineno}: batch_size")))?,
            padded_len: f[4]
                .parse()
                .map_err(|_| Error::Decode(format!("sched.csv line {lineno}: padded_len")))?,
        });
    }
    Ok(out)
}

const EVENTS_HEADER: &str = "time_ms,seq,kind,session,detail";

pub fn write_events_csv(path: &Path, events: &[SimEvent]) -> Result<()> {
    let mut text = String::from(EVENTS_HEADER);
    text.push('\n');
    for e in events {
        let detail = if e.detail.is_empty() {
            format!("round={}", e.round)
        } else {
            format!("round={} {}", e.round, e.detail)
        };
        writeln!(
            text,
            "{},{},{},{},{}",
            e.time_ms,
            e.seq,
            e.kind.as_str(),
            e.session,
            detail
        )
        .expect("write to string");
    }
    write_atomic(path, &text)
}

pub fn read_events_csv(path: &Path) -> Result<Vec<SimEvent>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(Error::Decode(format!(
                "events.csv line {lineno}: {} fields",
                f.len()
            )));
        }
        let detail_full = f[4];
        let (round, detail) = match detail_full.strip_prefix("round=") {
            Some(rest) => {
                let (r, d) = rest.split_once(' ').unwrap_or((rest, ""));
                (
                    r.parse::<u64>()
                        .map_err(|_| Error::Decode(format!("events.csv line {lineno}: round")))?,
                    d.to_string(),
                )
            }
            None => (0, detail_full.to_string()),
        };
        out.push(SimEvent {
            time_ms: f[0]
                .parse()
                .map_err(|_| Error::Decode(format!("events.csv line {lineno}: time_ms")))?,
            seq: f[1]
                .parse()
                .map_err(|_| Error::Decode(format!("events.csv line {lineno}: seq")))?,
            kind: f[2].parse::<EventKind>()?,
            session: f[3]
                .parse()
                .map_err(|_| Error::Decode(format!("events.csv line {lineno}: session")))?,
            round,
            detail,
        });
    }
    Ok(out)
}

fn write_tokens_csv(path: &Path, committed: &BTreeMap<u64, Vec<TokenId>>) -> Result<()> {
    let mut text = String::from("session,tokens\n");
    for (session, tokens) in committed {
        let joined = tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(text, "{session},{joined}").expect("write to string");
    }
    write_atomic(path, &text)
}

fn read_summary_row(path: &Path) -> Result<SummaryRow> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Decode("summary_row.csv: missing data row".into()))?;
    SummaryRow::from_csv_line(line)
}
