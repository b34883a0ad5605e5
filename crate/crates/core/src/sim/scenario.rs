//! Scenario files: one TOML document naming a catalog, the model and
//! workload to use from it, the cluster, link and simulator settings, a seed
//! and a duration, plus optional sweep axes.
//!
//! ```toml
//! name = "short-low"
//! catalog = "catalog.toml"     # relative to the scenario file
//! model = "llama2-7b"
//! workload = "short-low"
//! mode = "disaggregated"       # or "colocated"
//! seed = 7
//! duration = 60.0
//!
//! [cluster]
//! prefill = { gpu = "B", count = 1, strategy = { tp = 1 } }
//! decode = { gpu = "A", count = 1 }
//!
//! [link]
//! bandwidth = 25e9
//! discount = 0.8
//! staging_bandwidth = 25e9
//!
//! [sweep]
//! pd_ratio = [[1, 1], [2, 1]]
//! qps = [2.0, 8.0]
//! ```
//!
//! In colocated mode both pools become colocated instances, so the GPU
//! count is the same as in the disaggregated run.
//!
//! Sweep points are the Cartesian product of the declared axes, nested in
//! the fixed order `mode`, `pd_ratio`, `input_len`, `output_len`, `qps`
//! (outermost first). Missing axes take the scenario's own value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate_arrivals, run, ClusterState, InstanceSpec, Role, SimConfig, SimError, SimMode, SimReport, Slo, TransferLink};
use crate::catalog::{parse_toml, Catalog, CatalogError, WorkloadSpec};
use crate::cost_model::{CostModel, CostOptions, ParallelStrategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("scenario {0}")]
    Parse(#[from] CatalogError),
    #[error("scenario references unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("scenario `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySpec {
    pub dp: u32,
    pub tp: u32,
    pub pp: u32,
    pub ep: u32,
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec { dp: 1, tp: 1, pp: 1, ep: 1 }
    }
}

impl From<StrategySpec> for ParallelStrategy {
    fn from(s: StrategySpec) -> Self {
        ParallelStrategy::new(s.dp, s.tp, s.pp, s.ep)
    }
}

impl From<ParallelStrategy> for StrategySpec {
    fn from(s: ParallelStrategy) -> Self {
        StrategySpec { dp: s.dp, tp: s.tp, pp: s.pp, ep: s.ep }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    /// GPU name in the catalog.
    pub gpu: String,
    pub count: u64,
    #[serde(default)]
    pub strategy: StrategySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub prefill: PoolSection,
    pub decode: PoolSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub mode: Vec<SimMode>,
    /// `[prefill_count, decode_count]` pairs.
    pub pd_ratio: Vec<[u64; 2]>,
    pub input_len: Vec<u64>,
    pub output_len: Vec<u64>,
    pub qps: Vec<f64>,
}

fn or_default<T>(values: Vec<T>, fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values
    }
}

/// Fully resolved coordinates of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mode: SimMode,
    pub p_count: u64,
    pub d_count: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub qps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Catalog path, relative to the scenario file.
    #[serde(default)]
    pub catalog: Option<String>,
    pub model: String,
    pub workload: String,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
    /// Arrival window, seconds.
    pub duration: f64,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub link: TransferLink,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub cost: CostOptions,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
}

impl Scenario {
    pub fn parse(document: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = parse_toml(document)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is always representable as TOML")
    }

    fn invalid(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid { name: self.name.clone(), message: message.into() }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(self.invalid(format!("duration must be > 0 (got {})", self.duration)));
        }
        self.link.validate()?;
        if let Some(sw) = &self.sweep {
            if sw.qps.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
                return Err(self.invalid("sweep.qps values must be > 0"));
            }
            if sw.input_len.contains(&0) || sw.output_len.contains(&0) {
                return Err(self.invalid("sweep lengths must be >= 1"));
            }
        }
        Ok(())
    }

    /// The scenario's own coordinates.
    pub fn base_point(&self, catalog: &Catalog) -> Result<SweepPoint, ScenarioError> {
        let w = self.lookup_workload(catalog)?;
        Ok(SweepPoint {
            mode: self.mode,
            p_count: self.cluster.prefill.count,
            d_count: self.cluster.decode.count,
            input_len: w.input_len,
            output_len: w.output_len,
            qps: w.qps,
        })
    }

    /// Sweep points in declared-axis order; just the base point without a
    /// `[sweep]` table.
    pub fn points(&self, catalog: &Catalog) -> Result<Vec<SweepPoint>, ScenarioError> {
        let base = self.base_point(catalog)?;
        let sw = self.sweep.clone().unwrap_or_default();
        let modes = or_default(sw.mode, base.mode);
        let ratios = or_default(sw.pd_ratio, [base.p_count, base.d_count]);
        let inputs = or_default(sw.input_len, base.input_len);
        let outputs = or_default(sw.output_len, base.output_len);
        let qpss = or_default(sw.qps, base.qps);
        let mut out = Vec::new();
        for &mode in &modes {
            for &[p_count, d_count] in &ratios {
                for &input_len in &inputs {
                    for &output_len in &outputs {
                        for &qps in &qpss {
                            out.push(SweepPoint { mode, p_count, d_count, input_len, output_len, qps });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn lookup_workload(&self, catalog: &Catalog) -> Result<WorkloadSpec, ScenarioError> {
        catalog
            .workload(&self.workload)
            .cloned()
            .ok_or_else(|| ScenarioError::Unknown { kind: "workload", name: self.workload.clone() })
    }

    pub fn workload_at(&self, catalog: &Catalog, point: &SweepPoint) -> Result<WorkloadSpec, ScenarioError> {
        Ok(WorkloadSpec {
            input_len: point.input_len,
            output_len: point.output_len,
            qps: point.qps,
            ..self.lookup_workload(catalog)?
        })
    }

    pub fn cluster_at(&self, catalog: &Catalog, point: &SweepPoint) -> Result<ClusterState, ScenarioError> {
        let model = catalog
            .model(&self.model)
            .cloned()
            .ok_or_else(|| ScenarioError::Unknown { kind: "model", name: self.model.clone() })?;
        let workload = self.workload_at(catalog, point)?;
        let (p_role, d_role) = match point.mode {
            SimMode::Disaggregated => (Role::Prefill, Role::Decode),
            SimMode::Colocated => (Role::Colocated, Role::Colocated),
        };
        let mut instances = Vec::new();
        for (pool, role, count) in
            [(&self.cluster.prefill, p_role, point.p_count), (&self.cluster.decode, d_role, point.d_count)]
        {
            let gpu = catalog
                .gpu(&pool.gpu)
                .cloned()
                .ok_or_else(|| ScenarioError::Unknown { kind: "gpu", name: pool.gpu.clone() })?;
            let strategy = ParallelStrategy::from(pool.strategy);
            let replica = ParallelStrategy { dp: 1, ..strategy };
            for _ in 0..count * strategy.dp as u64 {
                instances.push(InstanceSpec { role, gpu: gpu.clone(), strategy: replica });
            }
        }
        Ok(ClusterState::new(
            point.mode,
            model,
            CostModel::new(self.cost),
            self.link,
            self.sim.clone(),
            Slo { ttft: workload.ttft_slo, tpot: workload.tpot_slo },
            instances,
        )?)
    }

    /// Builds and simulates one point with the scenario's seed and duration.
    pub fn run_point(&self, catalog: &Catalog, point: &SweepPoint) -> Result<SimReport, ScenarioError> {
        let cluster = self.cluster_at(catalog, point)?;
        let arrivals = generate_arrivals(&self.workload_at(catalog, point)?, self.duration, self.seed)?;
        Ok(run(&cluster, arrivals)?)
    }
}
