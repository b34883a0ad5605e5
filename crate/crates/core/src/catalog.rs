//! Hardware, model, and workload catalog.
//!
//! A catalog is a single TOML document with three arrays of tables:
//! `[[gpus]]`, `[[models]]` and `[[workloads]]`. All quantities use base
//! units: bytes, FLOP/s, bytes/s, seconds and tokens. There are no implicit
//! SI prefixes, so an 80 GB card is written `vram_capacity = 80_000_000_000`
//! (an integral float such as `80e9` is accepted as well).
//!
//! Parameter counting for [`derive_stats`] assumes a decoder-only transformer
//! with pre-norm blocks and a gated (three-matrix) FFN:
//!
//! | group            | parameters                                   |
//! |------------------|----------------------------------------------|
//! | token embedding  | `vocab * hidden` (counted once)              |
//! | q / o projection | `hidden * heads * head_dim` each, per layer  |
//! | k / v projection | `hidden * kv_heads * head_dim` each, per layer |
//! | FFN              | `3 * hidden * ffn * num_experts`, per layer  |
//! | router           | `hidden * num_experts` per layer if MoE      |
//! | norms            | `2 * hidden` per layer, plus `hidden` final  |
//! | LM head          | `vocab * hidden` (untied, counted separately) |

use std::collections::HashSet;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::kv_align::KvAxis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("{spec}: {invariant}")]
    Invariant { spec: String, invariant: String },
}

impl CatalogError {
    fn invariant(spec: impl Into<String>, invariant: impl Into<String>) -> Self {
        CatalogError::Invariant {
            spec: spec.into(),
            invariant: invariant.into(),
        }
    }
}

/// Capability envelope of one GPU SKU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub name: String,
    pub vendor: String,
    /// Peak dense compute, FLOP/s.
    pub compute_rate: f64,
    #[serde(deserialize_with = "de_byte_count")]
    pub vram_capacity: u64,
    /// Bytes/s.
    pub vram_bandwidth: f64,
    /// Bytes/s between GPUs of one instance.
    pub interconnect_bandwidth: f64,
    /// Achievable fraction of `compute_rate`.
    pub compute_discount: f64,
    /// Achievable fraction of `vram_bandwidth`.
    pub vram_bw_discount: f64,
    /// Achievable fraction of `interconnect_bandwidth`.
    pub comm_discount: f64,
    /// Tokens per page-attention block.
    pub kv_block_size: u32,
    /// Physical KV axis order, outermost first.
    #[serde(default = "KvAxis::canonical_order")]
    pub layout_order: Vec<KvAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_attention_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    pub vocab_size: u64,
    /// 1 for dense models.
    #[serde(default = "one")]
    pub num_experts: u64,
    #[serde(default = "one")]
    pub experts_per_token: u64,
    pub dtype_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Deterministic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub input_len: u64,
    pub output_len: u64,
    /// Offered load, requests/s.
    pub qps: f64,
    /// TTFT service-level objective, seconds.
    pub ttft_slo: f64,
    /// TPOT service-level objective, seconds.
    pub tpot_slo: f64,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
}

/// Quantities derived from a [`ModelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    /// Stored parameters, all experts included.
    pub param_count: u64,
    /// Parameters touched per token (only `experts_per_token` experts).
    pub active_param_count: u64,
    /// Parameters that live inside expert FFNs.
    pub expert_param_count: u64,
    /// Token embedding table, which is a gather rather than a GEMM.
    pub embedding_param_count: u64,
    pub weight_bytes_total: u64,
    pub kv_bytes_per_token: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    #[serde(default)]
    pub gpus: Vec<GpuSpec>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
}

fn one() -> u64 {
    1
}

/// Accepts an integer or an integral, non-negative float such as `80e9`.
fn de_byte_count<'de, D: Deserializer<'de>>(de: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Float(f64),
    }
    match Raw::deserialize(de)? {
        Raw::Int(v) => Ok(v),
        Raw::Float(f) if f >= 0.0 && f.fract() == 0.0 && f < u64::MAX as f64 => Ok(f as u64),
        Raw::Float(f) => Err(serde::de::Error::custom(format!(
            "expected a non-negative whole number of bytes, got {f}"
        ))),
    }
}

fn check_positive(spec: &str, field: &str, v: f64) -> Result<(), CatalogError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CatalogError::invariant(
            spec,
            format!("{field} must be finite and > 0 (got {v})"),
        ))
    }
}

fn check_discount(spec: &str, field: &str, v: f64) -> Result<(), CatalogError> {
    if v.is_finite() && v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(CatalogError::invariant(
            spec,
            format!("{field}: discount out of range (0, 1] (got {v})"),
        ))
    }
}

impl GpuSpec {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let spec = format!("gpu `{}`", self.name);
        check_positive(&spec, "compute_rate", self.compute_rate)?;
        if self.vram_capacity == 0 {
            return Err(CatalogError::invariant(&spec, "vram_capacity must be > 0"));
        }
        check_positive(&spec, "vram_bandwidth", self.vram_bandwidth)?;
        check_positive(&spec, "interconnect_bandwidth", self.interconnect_bandwidth)?;
        check_discount(&spec, "compute_discount", self.compute_discount)?;
        check_discount(&spec, "vram_bw_discount", self.vram_bw_discount)?;
        check_discount(&spec, "comm_discount", self.comm_discount)?;
        if self.kv_block_size == 0 {
            return Err(CatalogError::invariant(&spec, "kv_block_size must be >= 1"));
        }
        if KvAxis::order_from_slice(&self.layout_order).is_none() {
            return Err(CatalogError::invariant(
                &spec,
                "layout_order must be a permutation of [layer, kv_head, token, head_dim]",
            ));
        }
        Ok(())
    }

    /// Effective compute rate `λ·R`.
    pub fn effective_compute(&self) -> f64 {
        self.compute_discount * self.compute_rate
    }

    /// Effective VRAM bandwidth `α·B_vram`.
    pub fn effective_vram_bandwidth(&self) -> f64 {
        self.vram_bw_discount * self.vram_bandwidth
    }

    /// Effective interconnect bandwidth `β·B`.
    pub fn effective_interconnect(&self) -> f64 {
        self.comm_discount * self.interconnect_bandwidth
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let spec = format!("model `{}`", self.name);
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_attention_heads", self.num_attention_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_experts", self.num_experts),
            ("experts_per_token", self.experts_per_token),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (field, v) in fields {
            if v == 0 {
                return Err(CatalogError::invariant(&spec, format!("{field} must be >= 1")));
            }
        }
        if !self.num_attention_heads.is_multiple_of(self.num_kv_heads) {
            return Err(CatalogError::invariant(
                &spec,
                format!(
                    "num_attention_heads ({}) not divisible by num_kv_heads ({})",
                    self.num_attention_heads, self.num_kv_heads
                ),
            ));
        }
        if self.hidden_dim != self.num_attention_heads * self.head_dim {
            return Err(CatalogError::invariant(
                &spec,
                format!(
                    "hidden_dim ({}) != num_attention_heads ({}) * head_dim ({})",
                    self.hidden_dim, self.num_attention_heads, self.head_dim
                ),
            ));
        }
        if self.experts_per_token > self.num_experts {
            return Err(CatalogError::invariant(
                &spec,
                format!(
                    "experts_per_token ({}) > num_experts ({})",
                    self.experts_per_token, self.num_experts
                ),
            ));
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.num_experts > 1
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), CatalogError> {
        let spec = format!("workload `{}`", self.name);
        if self.input_len == 0 {
            return Err(CatalogError::invariant(&spec, "input_len must be >= 1"));
        }
        if self.output_len == 0 {
            return Err(CatalogError::invariant(&spec, "output_len must be >= 1"));
        }
        check_positive(&spec, "qps", self.qps)?;
        // A zero SLO is a legal (if unsatisfiable) planning input.
        for (field, v) in [("ttft_slo", self.ttft_slo), ("tpot_slo", self.tpot_slo)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CatalogError::invariant(
                    &spec,
                    format!("{field} must be finite and >= 0 (got {v})"),
                ));
            }
        }
        Ok(())
    }

    /// Representative decode context used for planning: the mean context
    /// over the generation, `input_len + output_len / 2`.
    pub fn mean_decode_context(&self) -> u64 {
        self.input_len + self.output_len / 2
    }

    /// Largest context a request reaches.
    pub fn max_context(&self) -> u64 {
        self.input_len + self.output_len
    }
}

/// Derives parameter and byte counts using the table in the module docs.
pub fn derive_stats(model: &ModelSpec) -> ModelStats {
    let h = model.hidden_dim;
    let q_width = model.num_attention_heads * model.head_dim;
    let kv_width = model.num_kv_heads * model.head_dim;

    let attn = 2 * h * q_width + 2 * h * kv_width;
    let expert_ffn = 3 * h * model.ffn_dim;
    let router = if model.is_moe() { h * model.num_experts } else { 0 };
    let norms = 2 * h;

    let embedding = model.vocab_size * h;
    let lm_head = model.vocab_size * h;
    let final_norm = h;

    let per_layer_shared = attn + router + norms;
    let expert_param_count = model.num_layers * expert_ffn * model.num_experts;
    let shared = embedding + lm_head + final_norm + model.num_layers * per_layer_shared;

    let param_count = shared + expert_param_count;
    let active_param_count = shared + model.num_layers * expert_ffn * model.experts_per_token;

    ModelStats {
        param_count,
        active_param_count,
        expert_param_count,
        embedding_param_count: embedding,
        weight_bytes_total: param_count * model.dtype_bytes,
        kv_bytes_per_token: 2 * model.num_layers * kv_width * model.dtype_bytes,
    }
}

fn check_unique<'a>(
    kind: &str,
    names: impl Iterator<Item = &'a str>,
) -> Result<(), CatalogError> {
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(CatalogError::invariant(
                format!("{kind} `{name}`"),
                "duplicate name",
            ));
        }
    }
    Ok(())
}

impl Catalog {
    pub fn validate(&self) -> Result<(), CatalogError> {
        self.gpus.iter().try_for_each(GpuSpec::validate)?;
        self.models.iter().try_for_each(ModelSpec::validate)?;
        self.workloads.iter().try_for_each(WorkloadSpec::validate)?;
        check_unique("gpu", self.gpus.iter().map(|g| g.name.as_str()))?;
        check_unique("model", self.models.iter().map(|m| m.name.as_str()))?;
        check_unique("workload", self.workloads.iter().map(|w| w.name.as_str()))?;
        Ok(())
    }

    pub fn gpu(&self, name: &str) -> Option<&GpuSpec> {
        self.gpus.iter().find(|g| g.name == name)
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn workload(&self, name: &str) -> Option<&WorkloadSpec> {
        self.workloads.iter().find(|w| w.name == name)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("catalog values are always representable in TOML")
    }
}

/// Parses a TOML document into `T`, reporting the failing field path.
pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(document: &str) -> Result<T, CatalogError> {
    let de = toml::Deserializer::new(document);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CatalogError::Schema {
            path,
            message: inner.message().trim().to_string(),
        }
    })
}

/// Parses and validates a catalog document.
pub fn load_catalog(document: &str) -> Result<Catalog, CatalogError> {
    let catalog: Catalog = parse_toml(document)?;
    catalog.validate()?;
    Ok(catalog)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// 80 GB, 312 TFLOPS part (used for decode in the reference setup).
    pub fn gpu_a() -> GpuSpec {
        GpuSpec {
            name: "A".into(),
            vendor: "vendor-a".into(),
            compute_rate: 312e12,
            vram_capacity: 80_000_000_000,
            vram_bandwidth: 2.0e12,
            interconnect_bandwidth: 300e9,
            compute_discount: 0.5,
            vram_bw_discount: 0.8,
            comm_discount: 0.8,
            kv_block_size: 16,
            layout_order: KvAxis::canonical_order(),
        }
    }

    /// 32 GB, 512 TFLOPS part (used for prefill in the reference setup).
    pub fn gpu_b() -> GpuSpec {
        GpuSpec {
            name: "B".into(),
            vendor: "vendor-b".into(),
            compute_rate: 512e12,
            vram_capacity: 32_000_000_000,
            vram_bandwidth: 1.2e12,
            interconnect_bandwidth: 200e9,
            compute_discount: 0.5,
            vram_bw_discount: 0.8,
            comm_discount: 0.8,
            kv_block_size: 64,
            layout_order: vec![KvAxis::Layer, KvAxis::Token, KvAxis::KvHead, KvAxis::HeadDim],
        }
    }

    pub fn llama2_7b() -> ModelSpec {
        ModelSpec {
            name: "llama2-7b".into(),
            num_layers: 32,
            hidden_dim: 4096,
            num_attention_heads: 32,
            num_kv_heads: 32,
            head_dim: 128,
            ffn_dim: 11008,
            vocab_size: 32000,
            num_experts: 1,
            experts_per_token: 1,
            dtype_bytes: 2,
        }
    }

    pub fn unit_model() -> ModelSpec {
        ModelSpec {
            name: "unit".into(),
            num_layers: 1,
            hidden_dim: 1,
            num_attention_heads: 1,
            num_kv_heads: 1,
            head_dim: 1,
            ffn_dim: 1,
            vocab_size: 1,
            num_experts: 1,
            experts_per_token: 1,
            dtype_bytes: 1,
        }
    }

    pub fn workload(input_len: u64, output_len: u64, qps: f64) -> WorkloadSpec {
        WorkloadSpec {
            name: format!("{input_len}+{output_len}"),
            input_len,
            output_len,
            qps,
            ttft_slo: 1.0,
            tpot_slo: 0.1,
            arrival_process: ArrivalProcess::Deterministic,
        }
    }
}
