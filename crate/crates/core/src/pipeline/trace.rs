//! Per-group decode records, the run-trace CSV and timing summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OpId;
use crate::sparsity::ActiveSet;

/// Where the channels of one `(layer, op)` came from during one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub op: OpId,
    /// Channels used in computation, ascending.
    pub active: Vec<u32>,
    pub from_cache: Vec<u32>,
    pub from_preload: Vec<u32>,
    /// The on-demand load set.
    pub from_flash: Vec<u32>,
    /// Channels the preload delivered for this `(layer, op)`, used or not.
    pub preloaded: Vec<u32>,
}

/// One layer group of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlanStep {
    pub token: usize,
    pub group: usize,
    /// Trigger masks sent to the loader for the next group (empty for the last group).
    pub preload_masks: Vec<ActiveSet>,
    pub ops: Vec<OpRecord>,
    /// Seconds spent reading the next group's preload.
    pub t_preload: f64,
    /// Seconds spent on on-demand reads (for group 0, the whole first-group load).
    pub t_onload: f64,
    pub t_topk: f64,
    pub t_comp: f64,
    /// Elapsed time of the group.
    pub t_group: f64,
    pub bytes_preload: u64,
    pub bytes_onload: u64,
    pub n_hit: u64,
    pub n_miss: u64,
    /// Channels preloaded into this group, and how many of them were used.
    pub preloaded: usize,
    pub preload_used: usize,
    /// Highest accounted DRAM during the group.
    pub peak_resident: u64,
}

impl GroupPlanStep {
    pub fn preload_precision(&self) -> Option<f64> {
        (self.preloaded > 0).then(|| self.preload_used as f64 / self.preloaded as f64)
    }
}

/// Everything the pipeline recorded for the generated tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub groups: Vec<GroupPlanStep>,
    /// Per generated token, the time of the step that produced it.
    pub token_times: Vec<f64>,
}

impl DecodeTrace {
    pub fn rows(&self) -> Vec<TraceRow> {
        self.groups.iter().map(TraceRow::from).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trace_csv(out, &self.rows())
    }

    pub fn peak_resident(&self) -> u64 {
        self.groups.iter().map(|g| g.peak_resident).max().unwrap_or(0)
    }
}

/// One line of the run-trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub token: usize,
    pub group: usize,
    pub t_preload_us: f64,
    pub t_onload_us: f64,
    pub t_topk_us: f64,
    pub t_comp_us: f64,
    pub bytes_preload: u64,
    pub bytes_onload: u64,
    pub n_hit: u64,
    pub n_miss: u64,
    pub preload_precision: Option<f64>,
    pub t_group_us: f64,
}

impl From<&GroupPlanStep> for TraceRow {
    fn from(g: &GroupPlanStep) -> Self {
        Self {
            token: g.token,
            group: g.group,
            t_preload_us: g.t_preload * 1e6,
            t_onload_us: g.t_onload * 1e6,
            t_topk_us: g.t_topk * 1e6,
            t_comp_us: g.t_comp * 1e6,
            bytes_preload: g.bytes_preload,
            bytes_onload: g.bytes_onload,
            n_hit: g.n_hit,
            n_miss: g.n_miss,
            preload_precision: g.preload_precision(),
            t_group_us: g.t_group * 1e6,
        }
    }
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let rows = csv::Reader::from_reader(input).deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
    if rows.windows(2).any(|w| (w[1].token, w[1].group) <= (w[0].token, w[0].group)) {
        return Err(Error::format("trace rows must be ordered by (token, group)"));
    }
    Ok(rows)
}

/// Per-token decomposition into first-group load, overlapped middle and
/// last-group compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenTiming {
    pub token: usize,
    pub t_total_us: f64,
    pub t_load_us: f64,
    pub t_overlap_us: f64,
    pub t_comp_us: f64,
    /// Time the compute side spent waiting: on-demand loads plus preloads
    /// that outlasted their group's computation.
    pub t_bubble_us: f64,
    pub bytes_preload: u64,
    pub bytes_onload: u64,
    pub n_hit: u64,
    pub n_miss: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub tokens: usize,
    pub total_time_s: f64,
    pub tokens_per_s: f64,
    pub mean_token_ms: f64,
    pub hit_rate: f64,
    pub bytes_preload: u64,
    pub bytes_onload: u64,
    pub overlap_efficiency: f64,
    /// Mean over groups that received a preload; empty when none did.
    pub mean_preload_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub per_token: Vec<TokenTiming>,
    pub summary: TimingSummary,
}

impl TimingReport {
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(&self.summary)?;
        w.flush()?;
        Ok(())
    }

    /// Long format: `token,metric,value`.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["token", "metric", "value"])?;
        for t in &self.per_token {
            let hit_rate = ratio(t.n_hit, t.n_hit + t.n_miss);
            let metrics = [
                ("t_total_us", t.t_total_us),
                ("t_load_us", t.t_load_us),
                ("t_overlap_us", t.t_overlap_us),
                ("t_comp_us", t.t_comp_us),
                ("t_bubble_us", t.t_bubble_us),
                ("bytes_preload", t.bytes_preload as f64),
                ("bytes_onload", t.bytes_onload as f64),
                ("hit_rate", hit_rate),
            ];
            for (name, v) in metrics {
                w.write_record([t.token.to_string(), name.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Aggregates trace rows. `None` when there are no rows.
pub fn timing_report(rows: &[TraceRow]) -> Option<TimingReport> {
    let mut per_token: Vec<TokenTiming> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let last_of_token = rows.get(i + 1).is_none_or(|n| n.token != r.token);
        if per_token.last().is_none_or(|t| t.token != r.token) {
            per_token.push(TokenTiming {
                token: r.token,
                t_total_us: 0.0,
                t_load_us: r.t_onload_us,
                t_overlap_us: 0.0,
                t_comp_us: 0.0,
                t_bubble_us: 0.0,
                bytes_preload: 0,
                bytes_onload: 0,
                n_hit: 0,
                n_miss: 0,
            });
        }
        let t = per_token.last_mut().expect("pushed above");
        t.t_total_us += r.t_group_us;
        t.t_bubble_us += r.t_onload_us + (r.t_preload_us - r.t_topk_us - r.t_comp_us).max(0.0);
        t.bytes_preload += r.bytes_preload;
        t.bytes_onload += r.bytes_onload;
        t.n_hit += r.n_hit;
        t.n_miss += r.n_miss;
        if last_of_token {
            t.t_comp_us = r.t_topk_us + r.t_comp_us;
            t.t_overlap_us = (t.t_total_us - t.t_load_us - t.t_comp_us).max(0.0);
        }
    }
    if per_token.is_empty() {
        return None;
    }
    let total_us: f64 = per_token.iter().map(|t| t.t_total_us).sum();
    let bubble_us: f64 = per_token.iter().map(|t| t.t_bubble_us).sum();
    let n_hit: u64 = per_token.iter().map(|t| t.n_hit).sum();
    let n_miss: u64 = per_token.iter().map(|t| t.n_miss).sum();
    let precisions: Vec<f64> = rows.iter().filter_map(|r| r.preload_precision).collect();
    let tokens = per_token.len();
    let total_time_s = total_us * 1e-6;
    let summary = TimingSummary {
        tokens,
        total_time_s,
        tokens_per_s: if total_time_s > 0.0 { tokens as f64 / total_time_s } else { 0.0 },
        mean_token_ms: total_us * 1e-3 / tokens as f64,
        hit_rate: ratio(n_hit, n_hit + n_miss),
        bytes_preload: per_token.iter().map(|t| t.bytes_preload).sum(),
        bytes_onload: per_token.iter().map(|t| t.bytes_onload).sum(),
        overlap_efficiency: if total_us > 0.0 { 1.0 - bubble_us / total_us } else { 1.0 },
        mean_preload_precision: (!precisions.is_empty())
            .then(|| precisions.iter().sum::<f64>() / precisions.len() as f64),
    };
    Some(TimingReport { per_token, summary })
}
