//! Row types shared by the table, CSV and JSON-lines writers.

use anyhow::Context;
use serde::{Deserialize, Serialize};

use hetpd_core::planner::{ExplainReport, ExplainRow};
use hetpd_core::sim::{ComparisonRow, SimMetrics, SweepPoint};

use crate::Format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub mode: String,
    pub p_count: u64,
    pub d_count: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub qps: f64,
    pub seed: u64,
    pub arrived: u64,
    pub completed: u64,
    pub unfinished: u64,
    pub window: f64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub tpot_mean: f64,
    pub tpot_p99: f64,
    pub throughput: f64,
    pub completed_rate: f64,
    pub goodput: f64,
    pub slo_attainment: f64,
    pub kv_transfer_time_mean: f64,
    pub tokens_emitted: u64,
    /// Per-instance busy fractions, `;`-separated.
    pub busy_fraction: String,
}

impl MetricsRow {
    pub fn new(scenario: &str, point: &SweepPoint, seed: u64, m: &SimMetrics) -> Self {
        MetricsRow {
            scenario: scenario.to_string(),
            mode: point.mode.to_string(),
            p_count: point.p_count,
            d_count: point.d_count,
            input_len: point.input_len,
            output_len: point.output_len,
            qps: point.qps,
            seed,
            arrived: m.arrived,
            completed: m.completed,
            unfinished: m.unfinished,
            window: m.window,
            ttft_mean: m.ttft_mean,
            ttft_p50: m.ttft_p50,
            ttft_p99: m.ttft_p99,
            tpot_mean: m.tpot_mean,
            tpot_p99: m.tpot_p99,
            throughput: m.throughput,
            completed_rate: m.completed_rate,
            goodput: m.goodput,
            slo_attainment: m.slo_attainment,
            kv_transfer_time_mean: m.kv_transfer_time_mean,
            tokens_emitted: m.tokens_emitted,
            busy_fraction: m.busy_fraction.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub mode: String,
    pub p_count: u64,
    pub d_count: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub qps: f64,
    pub throughput: f64,
    pub goodput: f64,
    pub ttft_mean: f64,
    pub tpot_mean: f64,
    pub completed: u64,
    pub throughput_delta: f64,
    pub goodput_delta: f64,
    pub ttft_mean_delta: f64,
    pub tpot_mean_delta: f64,
}

impl CompareRow {
    pub fn new(point: &SweepPoint, r: &ComparisonRow) -> Self {
        CompareRow {
            label: r.label.clone(),
            mode: point.mode.to_string(),
            p_count: point.p_count,
            d_count: point.d_count,
            input_len: point.input_len,
            output_len: point.output_len,
            qps: point.qps,
            throughput: r.metrics.throughput,
            goodput: r.metrics.goodput,
            ttft_mean: r.metrics.ttft_mean,
            tpot_mean: r.metrics.tpot_mean,
            completed: r.metrics.completed,
            throughput_delta: r.throughput_delta,
            goodput_delta: r.goodput_delta,
            ttft_mean_delta: r.ttft_mean_delta,
            tpot_mean_delta: r.tpot_mean_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainCsvRow {
    pub stage: String,
    pub strategy: String,
    pub gpus_per_instance: u32,
    pub objective: Option<f64>,
    pub latency: Option<f64>,
    pub vram_bytes: u64,
    pub vram_capacity: u64,
    pub batch: Option<u64>,
    /// `c1`/`c2` joined by `;`, empty when feasible.
    pub violations: String,
    pub selected: bool,
}

impl From<&ExplainRow> for ExplainCsvRow {
    fn from(r: &ExplainRow) -> Self {
        ExplainCsvRow {
            stage: r.stage.to_string(),
            strategy: r.strategy.to_string(),
            gpus_per_instance: r.gpus_per_instance,
            objective: r.objective,
            latency: r.latency,
            vram_bytes: r.vram_bytes,
            vram_capacity: r.vram_capacity,
            batch: r.batch,
            violations: r.violations.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            selected: r.selected,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().context("flushing CSV")?)?)
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Renders rows in `format`; `table` is the aligned-text renderer.
pub fn render<T: Serialize>(rows: &[T], format: Format, table: impl FnOnce(&[T]) -> String) -> anyhow::Result<String> {
    match format {
        Format::Table => Ok(table(rows)),
        Format::Csv => to_csv(rows),
        Format::JsonLines => to_jsonl(rows),
    }
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = format!(
        "{:<14} {:>5} {:>5} {:>6} {:>6} {:>7} {:>9} {:>10} {:>10} {:>10} {:>12} {:>9} {:>6}\n",
        "mode", "P", "D", "in", "out", "qps", "completed", "ttft_mean", "ttft_p99", "tpot_mean", "tok/s", "goodput", "slo%"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>5} {:>5} {:>6} {:>6} {:>7.2} {:>9} {:>10.4} {:>10.4} {:>10.5} {:>12.2} {:>9.3} {:>6.1}\n",
            r.mode,
            r.p_count,
            r.d_count,
            r.input_len,
            r.output_len,
            r.qps,
            r.completed,
            r.ttft_mean,
            r.ttft_p99,
            r.tpot_mean,
            r.throughput,
            r.goodput,
            r.slo_attainment * 100.0
        ));
    }
    out
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:<36} {:>12} {:>9} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9}\n",
        "config", "tok/s", "goodput", "ttft_mean", "tpot_mean", "d_tput", "d_good", "d_ttft", "d_tpot"
    );
    let pct = |d: f64| format!("{:+.1}%", d * 100.0);
    for r in rows {
        out.push_str(&format!(
            "{:<36} {:>12.2} {:>9.3} {:>10.4} {:>10.5} {:>9} {:>9} {:>9} {:>9}\n",
            r.label,
            r.throughput,
            r.goodput,
            r.ttft_mean,
            r.tpot_mean,
            pct(r.throughput_delta),
            pct(r.goodput_delta),
            pct(r.ttft_mean_delta),
            pct(r.tpot_mean_delta)
        ));
    }
    out
}

pub fn explain_rows(report: &ExplainReport) -> Vec<ExplainCsvRow> {
    report.rows.iter().map(ExplainCsvRow::from).collect()
}
