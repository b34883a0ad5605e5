//! Two-stage joint search over parallel strategies and P:D instance counts.
//!
//! Stage 1 picks the prefill strategy maximizing per-GPU request throughput
//! `dp·rps / (dp·tp·pp)` subject to `l_p <= L_ttft` (c1) and `m_p <= M_p`
//! (c2). The prefill instance count is `X = ceil(qps / rps)`.
//!
//! Stage 2 picks the decode strategy maximizing per-instance token throughput
//! `T^d` subject to `l_d <= L_tpot` (c1) and `m_d <= M_d` (c2), then sizes
//! `Y = ceil(demand / T^d)` where `demand = X·rps·output_len` is the token
//! rate the prefill pool can hand over. All decode instances share one GPU
//! type and strategy, so the mean over instances `Σ T_y / Y` equals `T^d`.
//!
//! Units: `T^p` is requests/s (per GPU in the objective), `T^d` is tokens/s
//! per instance.
//!
//! `dp` is treated as replication of whole instances. It multiplies both the
//! numerator and the denominator of the stage-1 objective, so the objective is
//! evaluated as `rps / (tp·pp)` and a `dp > 1` candidate ties exactly with its
//! `dp = 1` sibling and loses the tie-break.
//!
//! Search is exhaustive. Ties on the objective go to fewer GPUs per instance,
//! then to the lexicographically smaller `(dp, tp, pp, ep)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{GpuSpec, ModelSpec, WorkloadSpec};
use crate::cost_model::{
    BatchLimit, CostError, CostModel, DecodeThroughput, ParallelStrategy, PrefillThroughput, VramBudget,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("no compatible strategy for model `{0}` in the search space")]
    NoCompatibleStrategy(String),
    #[error("no feasible {stage} strategy among {} candidates", report.len())]
    Infeasible { stage: Stage, report: Vec<StrategyEval> },
    #[error("decode demand must be > 0 tokens/s (got {0})")]
    InvalidDemand(f64),
    #[error("QPS unreachable: {required} GPUs required, budget is {budget}")]
    QpsUnreachable { required: u64, budget: u64, trace: Box<PlanTrace> },
    #[error("plan fails re-validation: {0}")]
    Unsound(String),
    #[error("need at least one GPU type")]
    NoGpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        })
    }
}

/// `c1` is the latency objective (TTFT or TPOT), `c2` the VRAM capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    C1,
    C2,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::C1 => "c1",
            Constraint::C2 => "c2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub tp_choices: Vec<u32>,
    pub pp_choices: Vec<u32>,
    pub dp_choices: Vec<u32>,
    pub ep_choices: Vec<u32>,
    /// Upper bound on `tp × pp`.
    pub max_gpus_per_instance: u32,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            tp_choices: vec![1, 2, 4, 8],
            pp_choices: vec![1, 2, 4],
            dp_choices: vec![1],
            ep_choices: vec![1],
            max_gpus_per_instance: 8,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), PlanError> {
        for (name, choices) in [
            ("tp_choices", &self.tp_choices),
            ("pp_choices", &self.pp_choices),
            ("dp_choices", &self.dp_choices),
            ("ep_choices", &self.ep_choices),
        ] {
            if choices.is_empty() {
                return Err(PlanError::InvalidSpace(format!("{name} is empty")));
            }
            if choices.contains(&0) {
                return Err(PlanError::InvalidSpace(format!("{name} contains 0")));
            }
        }
        if self.max_gpus_per_instance == 0 {
            return Err(PlanError::InvalidSpace("max_gpus_per_instance is 0".into()));
        }
        Ok(())
    }
}

/// Cartesian product of the choices, filtered by model compatibility and the
/// per-instance GPU bound, in ascending `(dp, tp, pp, ep)` order.
pub fn enumerate_strategies(space: &SearchSpace, model: &ModelSpec) -> Result<Vec<ParallelStrategy>, PlanError> {
    space.validate()?;
    let mut out = Vec::new();
    for &dp in &space.dp_choices {
        for &tp in &space.tp_choices {
            for &pp in &space.pp_choices {
                for &ep in &space.ep_choices {
                    let s = ParallelStrategy::new(dp, tp, pp, ep);
                    if s.gpus_per_instance() <= space.max_gpus_per_instance && s.check(model).is_ok() {
                        out.push(s);
                    }
                }
            }
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(PlanError::NoCompatibleStrategy(model.name.clone()));
    }
    Ok(out)
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEval {
    pub stage: Stage,
    pub strategy: ParallelStrategy,
    pub gpus_per_instance: u32,
    /// `l_p`, or `l_d` at the chosen batch (batch 1 when infeasible).
    pub latency: Option<f64>,
    /// `m_p` or `m_d` per GPU at the same point.
    pub vram_bytes: u64,
    pub vram_capacity: u64,
    /// Stage objective; present even when infeasible.
    pub objective: Option<f64>,
    /// Decode batch at which the candidate was scored.
    pub batch: Option<u64>,
    pub violations: Vec<Constraint>,
}

impl StrategyEval {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty() && self.objective.is_some()
    }
}

/// Orders candidates best-first: higher objective, fewer GPUs, smaller tuple.
fn rank(a: &StrategyEval, b: &StrategyEval) -> Ordering {
    let (oa, ob) = (a.objective.unwrap_or(f64::NEG_INFINITY), b.objective.unwrap_or(f64::NEG_INFINITY));
    ob.total_cmp(&oa)
        .then(a.gpus_per_instance.cmp(&b.gpus_per_instance))
        .then(a.strategy.cmp(&b.strategy))
}

fn select_best(evals: &[StrategyEval]) -> Option<usize> {
    evals
        .iter()
        .enumerate()
        .filter(|(_, e)| e.feasible())
        .min_by(|(_, a), (_, b)| rank(a, b))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillSolution {
    pub strategy: ParallelStrategy,
    pub objective: f64,
    pub predicted_ttft: f64,
    pub throughput: PrefillThroughput,
    pub vram: VramBudget,
    pub evaluations: Vec<StrategyEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSolution {
    pub strategy: ParallelStrategy,
    /// `Y`.
    pub instances: u64,
    pub objective: f64,
    pub predicted_tpot: f64,
    pub throughput: DecodeThroughput,
    pub vram: VramBudget,
    pub evaluations: Vec<StrategyEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub model: String,
    pub workload: String,
    pub p_gpu: GpuSpec,
    pub d_gpu: GpuSpec,
    pub p_strategy: ParallelStrategy,
    pub d_strategy: ParallelStrategy,
    /// `X`.
    pub p_count: u64,
    /// `Y`.
    pub d_count: u64,
    pub predicted_ttft: f64,
    pub predicted_tpot: f64,
    /// Requests/s of one prefill instance.
    pub predicted_p_throughput: f64,
    /// Tokens/s of one decode instance (`T^d`).
    pub predicted_d_throughput: f64,
    /// Decode batch behind `predicted_d_throughput`.
    pub d_batch: u64,
    /// Requests/s per prefill GPU.
    pub objective_p: f64,
    /// Tokens/s per decode instance.
    pub objective_d: f64,
    /// `X·rps·output_len`, tokens/s.
    pub decode_demand: f64,
}

impl DeploymentPlan {
    pub fn total_gpus(&self) -> u64 {
        let per = |s: &ParallelStrategy| (s.dp * s.gpus_per_instance()) as u64;
        self.p_count * per(&self.p_strategy) + self.d_count * per(&self.d_strategy)
    }

    /// Recomputes every constraint from the cost model instead of trusting
    /// the stored predictions.
    pub fn validate(&self, cost: &CostModel, model: &ModelSpec, workload: &WorkloadSpec) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Unsound(m));
        let cost_err = |e: CostError| PlanError::Unsound(e.to_string());
        let p = cost.instance_throughput_p(&self.p_gpu, model, &self.p_strategy, workload).map_err(cost_err)?;
        if p.latency > workload.ttft_slo {
            return bad(format!("l_p {} exceeds L_ttft {}", p.latency, workload.ttft_slo));
        }
        let m_p = cost.prefill_vram(model, &self.p_strategy, p.batch, workload.input_len).total_bytes;
        if m_p > self.p_gpu.vram_capacity {
            return bad(format!("m_p {m_p} exceeds M_p {}", self.p_gpu.vram_capacity));
        }
        let l_d = cost
            .decode_cost(&self.d_gpu, model, &self.d_strategy, self.d_batch, workload.mean_decode_context())
            .map_err(cost_err)?
            .latency;
        if l_d > workload.tpot_slo {
            return bad(format!("l_d {l_d} exceeds L_tpot {}", workload.tpot_slo));
        }
        let m_d = cost
            .decode_vram(model, &self.d_strategy, self.d_batch, workload.max_context(), self.d_gpu.kv_block_size as u64)
            .total_bytes;
        if m_d > self.d_gpu.vram_capacity {
            return bad(format!("m_d {m_d} exceeds M_d {}", self.d_gpu.vram_capacity));
        }
        if (self.p_count as f64) * p.requests_per_s < workload.qps {
            return bad(format!("{} prefill instances cannot carry {} QPS", self.p_count, workload.qps));
        }
        let demand = self.p_count as f64 * p.requests_per_s * workload.output_len as f64;
        let supply = self.d_count as f64 * self.d_batch as f64 / l_d;
        if supply < demand {
            return bad(format!("decode supply {supply} below prefill-side demand {demand}"));
        }
        Ok(())
    }
}

/// Every candidate evaluated while planning, for [`explain`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub prefill: Vec<StrategyEval>,
    pub decode: Vec<StrategyEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planned {
    pub plan: DeploymentPlan,
    pub trace: PlanTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Planner {
    pub cost: CostModel,
    pub space: SearchSpace,
    /// Cap on `X·dp·tp·pp` for the prefill pool.
    pub gpu_budget: Option<u64>,
}

impl Planner {
    pub fn new(cost: CostModel, space: SearchSpace) -> Self {
        Planner { cost, space, gpu_budget: None }
    }

    pub fn evaluate_prefill(&self, gpu: &GpuSpec, model: &ModelSpec, workload: &WorkloadSpec, s: &ParallelStrategy) -> StrategyEval {
        let vram = self.cost.prefill_vram(model, s, self.cost.options.prefill_batch.max(1), workload.input_len);
        let tput = self.cost.instance_throughput_p(gpu, model, s, workload).ok();
        let mut violations = Vec::new();
        if tput.is_none_or(|t| t.latency > workload.ttft_slo) {
            violations.push(Constraint::C1);
        }
        if vram.total_bytes > gpu.vram_capacity {
            violations.push(Constraint::C2);
        }
        StrategyEval {
            stage: Stage::Prefill,
            strategy: *s,
            gpus_per_instance: s.gpus_per_instance(),
            latency: tput.map(|t| t.latency),
            vram_bytes: vram.total_bytes,
            vram_capacity: gpu.vram_capacity,
            objective: tput.map(|t| t.requests_per_s_per_gpu),
            batch: tput.map(|t| t.batch),
            violations,
        }
    }

    pub fn evaluate_decode(&self, gpu: &GpuSpec, model: &ModelSpec, workload: &WorkloadSpec, s: &ParallelStrategy) -> StrategyEval {
        let block = gpu.kv_block_size as u64;
        let vram_at = |b: u64| self.cost.decode_vram(model, s, b, workload.max_context(), block).total_bytes;
        let latency_at = |b: u64| self.cost.decode_cost(gpu, model, s, b, workload.mean_decode_context()).ok().map(|c| c.latency);
        let base = StrategyEval {
            stage: Stage::Decode,
            strategy: *s,
            gpus_per_instance: s.gpus_per_instance(),
            latency: None,
            vram_bytes: 0,
            vram_capacity: gpu.vram_capacity,
            objective: None,
            batch: None,
            violations: Vec::new(),
        };
        match self.cost.instance_throughput_d(gpu, model, s, workload) {
            Ok(t) => StrategyEval {
                latency: Some(t.latency),
                vram_bytes: vram_at(t.batch),
                objective: Some(t.tokens_per_s),
                batch: Some(t.batch),
                ..base
            },
            Err(e) => {
                let latency = latency_at(1);
                let mut violations = Vec::new();
                if latency.is_none_or(|l| l > workload.tpot_slo) || matches!(e, CostError::NoFeasibleBatch(BatchLimit::Tpot)) {
                    violations.push(Constraint::C1);
                }
                if vram_at(1) > gpu.vram_capacity {
                    violations.push(Constraint::C2);
                }
                StrategyEval { latency, vram_bytes: vram_at(1), objective: latency.map(|l| 1.0 / l), batch: Some(1), violations, ..base }
            }
        }
    }

    pub fn solve_p_stage(&self, gpu: &GpuSpec, model: &ModelSpec, workload: &WorkloadSpec) -> Result<PrefillSolution, PlanError> {
        let evaluations: Vec<_> = enumerate_strategies(&self.space, model)?
            .iter()
            .map(|s| self.evaluate_prefill(gpu, model, workload, s))
            .collect();
        let Some(best) = select_best(&evaluations) else {
            return Err(PlanError::Infeasible { stage: Stage::Prefill, report: evaluations });
        };
        let e = &evaluations[best];
        let throughput = self
            .cost
            .instance_throughput_p(gpu, model, &e.strategy, workload)
            .expect("feasible candidate was costed");
        Ok(PrefillSolution {
            strategy: e.strategy,
            objective: e.objective.expect("feasible"),
            predicted_ttft: throughput.latency,
            vram: self.cost.prefill_vram(model, &e.strategy, throughput.batch, workload.input_len),
            throughput,
            evaluations,
        })
    }

    pub fn solve_d_stage(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        workload: &WorkloadSpec,
        p_demand: f64,
    ) -> Result<DecodeSolution, PlanError> {
        if !(p_demand.is_finite() && p_demand > 0.0) {
            return Err(PlanError::InvalidDemand(p_demand));
        }
        let evaluations: Vec<_> = enumerate_strategies(&self.space, model)?
            .iter()
            .map(|s| self.evaluate_decode(gpu, model, workload, s))
            .collect();
        let Some(best) = select_best(&evaluations) else {
            return Err(PlanError::Infeasible { stage: Stage::Decode, report: evaluations });
        };
        let e = &evaluations[best];
        let throughput = self
            .cost
            .instance_throughput_d(gpu, model, &e.strategy, workload)
            .expect("feasible candidate was costed");
        let instances = ((p_demand / throughput.tokens_per_s).ceil() as u64).max(1);
        Ok(DecodeSolution {
            strategy: e.strategy,
            instances,
            objective: throughput.tokens_per_s,
            predicted_tpot: throughput.latency,
            vram: self.cost.decode_vram(model, &e.strategy, throughput.batch, workload.max_context(), gpu.kv_block_size as u64),
            throughput,
            evaluations,
        })
    }

    pub fn plan(&self, p_gpu: &GpuSpec, d_gpu: &GpuSpec, model: &ModelSpec, workload: &WorkloadSpec) -> Result<Planned, PlanError> {
        let p = self.solve_p_stage(p_gpu, model, workload)?;
        let rps = p.throughput.requests_per_s;
        let p_count = ((workload.qps / rps).ceil() as u64).max(1);
        let mut trace = PlanTrace { prefill: p.evaluations.clone(), decode: Vec::new() };
        if let Some(budget) = self.gpu_budget {
            let required = p_count * (p.strategy.dp * p.strategy.gpus_per_instance()) as u64;
            if required > budget {
                return Err(PlanError::QpsUnreachable { required, budget, trace: Box::new(trace) });
            }
        }
        let decode_demand = p_count as f64 * rps * workload.output_len as f64;
        let d = self.solve_d_stage(d_gpu, model, workload, decode_demand).map_err(|e| match e {
            PlanError::Infeasible { stage, report } => PlanError::Infeasible { stage, report },
            other => other,
        })?;
        trace.decode = d.evaluations.clone();
        let plan = DeploymentPlan {
            model: model.name.clone(),
            workload: workload.name.clone(),
            p_gpu: p_gpu.clone(),
            d_gpu: d_gpu.clone(),
            p_strategy: p.strategy,
            d_strategy: d.strategy,
            p_count,
            d_count: d.instances,
            predicted_ttft: p.predicted_ttft,
            predicted_tpot: d.predicted_tpot,
            predicted_p_throughput: rps,
            predicted_d_throughput: d.throughput.tokens_per_s,
            d_batch: d.throughput.batch,
            objective_p: p.objective,
            objective_d: d.objective,
            decode_demand,
        };
        plan.validate(&self.cost, model, workload)?;
        Ok(Planned { plan, trace })
    }

    /// Tries every ordered pair of distinct GPU types as (prefill, decode)
    /// and keeps the plan needing the fewest GPUs; ties go to the higher
    /// prefill objective, then catalog order. With a single GPU type the
    /// deployment is homogeneous.
    pub fn assign_roles(&self, gpus: &[GpuSpec], model: &ModelSpec, workload: &WorkloadSpec) -> Result<Planned, PlanError> {
        let pairs: Vec<(usize, usize)> = match gpus.len() {
            0 => return Err(PlanError::NoGpus),
            1 => vec![(0, 0)],
            n => (0..n).flat_map(|p| (0..n).filter(move |&d| d != p).map(move |d| (p, d))).collect(),
        };
        let mut best: Option<Planned> = None;
        let mut last_err = None;
        for (p, d) in pairs {
            match self.plan(&gpus[p], &gpus[d], model, workload) {
                Ok(c) => {
                    let better = best.as_ref().is_none_or(|b| {
                        (c.plan.total_gpus(), -c.plan.objective_p) < (b.plan.total_gpus(), -b.plan.objective_p)
                    });
                    if better {
                        best = Some(c);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        best.ok_or_else(|| last_err.expect("at least one pair was tried"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRow {
    pub stage: Stage,
    pub strategy: ParallelStrategy,
    pub gpus_per_instance: u32,
    pub objective: Option<f64>,
    pub latency: Option<f64>,
    pub vram_bytes: u64,
    pub vram_capacity: u64,
    pub batch: Option<u64>,
    pub violations: Vec<Constraint>,
    pub selected: bool,
}

/// Machine-readable record of a planning run; [`ExplainReport::render_table`]
/// gives the aligned text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub feasible: bool,
    pub error: Option<String>,
    pub plan: Option<DeploymentPlan>,
    pub rows: Vec<ExplainRow>,
}

fn rows_from(evals: &[StrategyEval], selected: Option<ParallelStrategy>) -> impl Iterator<Item = ExplainRow> + '_ {
    evals.iter().map(move |e| ExplainRow {
        stage: e.stage,
        strategy: e.strategy,
        gpus_per_instance: e.gpus_per_instance,
        objective: e.objective,
        latency: e.latency,
        vram_bytes: e.vram_bytes,
        vram_capacity: e.vram_capacity,
        batch: e.batch,
        violations: e.violations.clone(),
        selected: Some(e.strategy) == selected,
    })
}

pub fn explain(outcome: &Result<Planned, PlanError>) -> ExplainReport {
    match outcome {
        Ok(planned) => {
            let mut rows: Vec<_> = rows_from(&planned.trace.prefill, Some(planned.plan.p_strategy)).collect();
            rows.extend(rows_from(&planned.trace.decode, Some(planned.plan.d_strategy)));
            ExplainReport { feasible: true, error: None, plan: Some(planned.plan.clone()), rows }
        }
        Err(err) => {
            let rows = match err {
                PlanError::Infeasible { report, .. } => rows_from(report, None).collect(),
                PlanError::QpsUnreachable { trace, .. } => {
                    let mut r: Vec<_> = rows_from(&trace.prefill, None).collect();
                    r.extend(rows_from(&trace.decode, None));
                    r
                }
                _ => Vec::new(),
            };
            ExplainReport { feasible: false, error: Some(err.to_string()), plan: None, rows }
        }
    }
}

impl ExplainReport {
    pub fn render_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let mut out = String::new();
        match (&self.plan, &self.error) {
            (Some(p), _) => out.push_str(&format!(
                "plan: {}P ({} on {}) + {}D ({} on {}), ttft {:.4} s, tpot {:.4} s\n",
                p.p_count, p.p_strategy, p.p_gpu.name, p.d_count, p.d_strategy, p.d_gpu.name, p.predicted_ttft, p.predicted_tpot
            )),
            (None, Some(e)) => out.push_str(&format!("infeasible: {e}\n")),
            (None, None) => {}
        }
        out.push_str(&format!(
            "{:<8} {:<18} {:>4} {:>13} {:>13} {:>15} {:>15} {:>7} {:<6} {}\n",
            "stage", "strategy", "gpus", "objective", "latency_s", "vram_bytes", "capacity", "batch", "viol", "sel"
        ));
        for r in &self.rows {
            let viol = if r.violations.is_empty() {
                "ok".to_string()
            } else {
                r.violations.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!(
                "{:<8} {:<18} {:>4} {:>13} {:>13} {:>15} {:>15} {:>7} {:<6} {}\n",
                r.stage.to_string(),
                r.strategy.to_string(),
                r.gpus_per_instance,
                fmt_opt(r.objective),
                fmt_opt(r.latency),
                r.vram_bytes,
                r.vram_capacity,
                r.batch.map_or("-".to_string(), |b| b.to_string()),
                viol,
                if r.selected { "*" } else { "" }
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixtures::*;
    use crate::catalog::WorkloadSpec;

    fn tiny_space(tp: Vec<u32>) -> SearchSpace {
        SearchSpace { tp_choices: tp, pp_choices: vec![1], dp_choices: vec![1], ep_choices: vec![1], max_gpus_per_instance: 8 }
    }

    #[test]
    fn enumerate_tiny_product() {
        let got = enumerate_strategies(&tiny_space(vec![1, 2]), &llama2_7b()).unwrap();
        assert_eq!(got, vec![ParallelStrategy::SINGLE, ParallelStrategy::tp(2)]);
    }

    #[test]
    fn enumerate_filters_divisibility_and_budget() {
        let got = enumerate_strategies(&tiny_space(vec![3, 4, 16]), &llama2_7b()).unwrap();
        assert_eq!(got, vec![ParallelStrategy::tp(4)]);
        let err = enumerate_strategies(&tiny_space(vec![3]), &llama2_7b()).unwrap_err();
        assert_eq!(err, PlanError::NoCompatibleStrategy("llama2-7b".into()));
        assert!(enumerate_strategies(&tiny_space(vec![]), &llama2_7b()).is_err());
    }

    #[test]
    fn enumerate_is_sorted_and_deduped() {
        let space = SearchSpace {
            tp_choices: vec![4, 1, 2, 1],
            pp_choices: vec![2, 1],
            dp_choices: vec![2, 1],
            ep_choices: vec![1],
            max_gpus_per_instance: 8,
        };
        let got = enumerate_strategies(&space, &llama2_7b()).unwrap();
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(got, sorted);
        assert_eq!(got.len(), 2 * 3 * 2);
    }

    #[test]
    fn single_feasible_candidate() {
        let planner = Planner::new(CostModel::default(), tiny_space(vec![1]));
        let w = workload(256, 256, 2.0);
        let sol = planner.solve_p_stage(&gpu_b(), &llama2_7b(), &w).unwrap();
        assert_eq!(sol.strategy, ParallelStrategy::SINGLE);
        assert_eq!(sol.evaluations.len(), 1);
    }

    #[test]
    fn d_stage_instance_count() {
        let planner = Planner::new(CostModel::default(), tiny_space(vec![1]));
        let w = workload(256, 256, 2.0);
        let (g, m) = (gpu_a(), llama2_7b());
        let t = planner.cost.instance_throughput_d(&g, &m, &ParallelStrategy::SINGLE, &w).unwrap().tokens_per_s;
        assert_eq!(planner.solve_d_stage(&g, &m, &w, 0.5 * t).unwrap().instances, 1);
        assert_eq!(planner.solve_d_stage(&g, &m, &w, t).unwrap().instances, 1);
        assert_eq!(planner.solve_d_stage(&g, &m, &w, 2.5 * t).unwrap().instances, 3);
        assert_eq!(planner.solve_d_stage(&g, &m, &w, 0.0).unwrap_err(), PlanError::InvalidDemand(0.0));
    }

    #[test]
    fn low_qps_needs_one_prefill_instance() {
        let planner = Planner::new(CostModel::default(), SearchSpace::default());
        let planned = planner.plan(&gpu_b(), &gpu_a(), &llama2_7b(), &workload(256, 256, 2.0)).unwrap();
        assert_eq!(planned.plan.p_count, 1);
        assert!(planned.plan.predicted_ttft <= 1.0);
    }

    #[test]
    fn reference_setup_puts_higher_flops_on_prefill() {
        let planner = Planner::new(CostModel::default(), SearchSpace::default());
        for (i, o, qps) in [(256, 256, 2.0), (1024, 1024, 3.0), (512, 1024, 3.0)] {
            let planned = planner.assign_roles(&[gpu_a(), gpu_b()], &llama2_7b(), &workload(i, o, qps)).unwrap();
            assert_eq!(planned.plan.p_gpu.name, "B", "{i}+{o}");
            assert_eq!(planned.plan.d_gpu.name, "A", "{i}+{o}");
        }
    }

    #[test]
    fn zero_ttft_tags_every_row_c1() {
        let planner = Planner::new(CostModel::default(), SearchSpace::default());
        let w = WorkloadSpec { ttft_slo: 0.0, ..workload(256, 256, 2.0) };
        let out = planner.plan(&gpu_b(), &gpu_a(), &llama2_7b(), &w);
        assert!(matches!(out, Err(PlanError::Infeasible { stage: Stage::Prefill, .. })));
        let report = explain(&out);
        assert!(!report.feasible);
        assert_eq!(report.rows.len(), enumerate_strategies(&SearchSpace::default(), &llama2_7b()).unwrap().len());
        assert!(report.rows.iter().all(|r| r.violations.contains(&Constraint::C1)));
    }

    #[test]
    fn explain_rows_match_enumeration_and_recompute() {
        let planner = Planner::new(CostModel::default(), SearchSpace::default());
        let (m, w) = (llama2_7b(), workload(512, 512, 4.0));
        let out = planner.plan(&gpu_b(), &gpu_a(), &m, &w);
        let report = explain(&out);
        let n = enumerate_strategies(&planner.space, &m).unwrap().len();
        assert_eq!(report.rows.iter().filter(|r| r.stage == Stage::Prefill).count(), n);
        assert_eq!(report.rows.iter().filter(|r| r.stage == Stage::Decode).count(), n);
        assert_eq!(report.rows.iter().filter(|r| r.selected).count(), 2);
        for r in report.rows.iter().filter(|r| r.stage == Stage::Prefill) {
            let lp = planner.cost.prefill_cost(&gpu_b(), &m, &r.strategy, 1, 512).unwrap().latency;
            assert_eq!(r.latency, Some(lp));
            assert_eq!(r.vram_bytes, planner.cost.prefill_vram(&m, &r.strategy, 1, 512).total_bytes);
        }
        let table = report.render_table();
        assert_eq!(table.lines().count(), report.rows.len() + 2);
    }

    #[test]
    fn gpu_budget_enforced() {
        let mut planner = Planner::new(CostModel::default(), tiny_space(vec![1]));
        planner.gpu_budget = Some(1);
        let w = workload(1024, 128, 500.0);
        let err = planner.plan(&gpu_b(), &gpu_a(), &llama2_7b(), &w).unwrap_err();
        assert!(matches!(err, PlanError::QpsUnreachable { budget: 1, .. }), "{err}");
    }

    #[test]
    fn planned_values_revalidate() {
        let planner = Planner::new(CostModel::default(), SearchSpace::default());
        let (m, w) = (llama2_7b(), workload(1024, 1024, 3.0));
        let mut planned = planner.plan(&gpu_b(), &gpu_a(), &m, &w).unwrap();
        planned.plan.validate(&planner.cost, &m, &w).unwrap();
        planned.plan.d_count = 0;
        assert!(matches!(planned.plan.validate(&planner.cost, &m, &w), Err(PlanError::Unsound(_))));
    }
}
