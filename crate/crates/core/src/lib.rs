//! Capacity planning and discrete-event simulation for prefill/decode
//! disaggregated LLM serving on heterogeneous GPUs.
//!
//! - [`catalog`]: GPU, model and workload specs and derived model statistics.
//! - [`cost_model`]: analytical per-stage latency and VRAM model.
//! - [`kv_align`]: KV-cache layout, block-size, dtype and tensor-parallel realignment.
//! - [`planner`]: two-stage search over parallel strategies and P:D instance counts.
//! - [`sim`]: discrete-event simulator of disaggregated and colocated clusters.

pub mod catalog;
pub mod cost_model;
pub mod kv_align;
pub mod planner;
pub mod sim;

pub use catalog::{load_catalog, ArrivalProcess, Catalog, CatalogError, GpuSpec, ModelSpec, ModelStats, WorkloadSpec};
pub use cost_model::{CostError, CostModel, CostOptions, ParallelStrategy, StageCost, VramBudget};
pub use planner::{DeploymentPlan, PlanError, Planner, SearchSpace};
pub use sim::{ClusterState, Scenario, SimConfig, SimError, SimMetrics, SimMode, SimReport, TransferLink};
