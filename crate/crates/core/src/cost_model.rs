//! Layered analytical cost model for prefill and decode.
//!
//! The model is built in four layers:
//!
//! 1. **Transformer layer**: per-operator FLOPs, weight/KV bytes and
//!    collective volumes ([`operator_table`]).
//! 2. **Hardware layer**: weights and activations are rounded up to
//!    [`CostOptions::alignment_bytes`], KV capacity to whole page-attention
//!    blocks of the GPU's `kv_block_size`.
//! 3. **Framework layer**: prefix caching and quantization are not modeled;
//!    this layer is the identity.
//! 4. **Operator library**: the compute rows are costed against `λ·R` (or
//!    `α·B_vram` for decode) and the collective rows against `β·B`.
//!
//! Prefill latency is `compute_flops / (λ·R) + comm_bytes / (β·B)`. Decode
//! latency is `vram_access_bytes / (α·B_vram) + comm_bytes / (β·B)`; decode
//! compute is assumed hidden behind memory traffic at every batch size.
//! Compute and communication are additive, never overlapped.
//!
//! All per-instance quantities are divided evenly across the `tp × pp` GPUs
//! of the instance and reported per GPU.
//!
//! ## Operator table
//!
//! With `T` tokens in the step, `h` hidden, `H`/`Hkv` attention/KV heads,
//! `d` head_dim, `f` ffn_dim, `V` vocab, `E` experts of which `k` are active,
//! `L` layers and `b` bytes per element:
//!
//! | operator      | FLOPs                          | bytes moved                 |
//! |---------------|--------------------------------|-----------------------------|
//! | embedding     | 0 (gather)                     | `V·h·b`                     |
//! | qkv_proj      | `2·T·h·(H+2Hkv)·d·L`           | `h·(H+2Hkv)·d·b·L`          |
//! | attn_score    | `2·H·d·L·S`                    | K half of the KV cache      |
//! | attn_context  | `2·H·d·L·S`                    | V half of the KV cache      |
//! | o_proj        | `2·T·H·d·h·L`                  | `H·d·h·b·L`                 |
//! | ffn           | `6·T·h·f·k·L`                  | `3·h·f·E·b·L`               |
//! | router (MoE)  | `2·T·h·E·L`                    | `h·E·b·L`                   |
//! | norm          | `2·T·(2h·L + h)`               | `(2h·L + h)·b`              |
//! | lm_head       | `2·T·h·V`                      | `V·h·b`                     |
//! | tp_allreduce  | -                              | comm `2·(L/pp)·2(tp−1)/tp·T·h·b` |
//! | pp_send       | -                              | comm `T·h·b` when `pp > 1`  |
//!
//! `S` is `batch·seq_len²` for prefill (no causal discount) and the summed
//! context length of the batch for decode. Outside attention this is the
//! usual two FLOPs per active non-embedding parameter per token. Prefill
//! runs the LM head over every prompt token. KV bytes are `T·kv_per_token`
//! written during prefill and `context·kv_per_token` read per decode step.
//!
//! Expert parallelism only shards expert weights (by a further `ep`);
//! routing traffic is not modeled.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{derive_stats, GpuSpec, ModelSpec, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("strategy {strategy} incompatible with model `{model}`: {reason}")]
    Incompatible { strategy: ParallelStrategy, model: String, reason: String },
    #[error("batch and sequence length must be >= 1")]
    EmptyShape,
    #[error("weights ({weight_bytes} B per GPU) do not fit in {capacity} B of VRAM")]
    WeightsDoNotFit { weight_bytes: u64, capacity: u64 },
    #[error("no decode batch satisfies {0}")]
    NoFeasibleBatch(BatchLimit),
}

/// Which constraint ruled out every decode batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchLimit {
    Vram,
    Tpot,
}

impl fmt::Display for BatchLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchLimit::Vram => "the VRAM capacity",
            BatchLimit::Tpot => "the TPOT objective",
        })
    }
}

/// Data, tensor, pipeline and expert parallel degrees of one instance.
///
/// `dp` replicates whole instances and does not count toward
/// [`gpus_per_instance`](Self::gpus_per_instance). `ep` partitions experts
/// inside the `tp × pp` group, so it must not exceed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParallelStrategy {
    pub dp: u32,
    pub tp: u32,
    pub pp: u32,
    pub ep: u32,
}

impl ParallelStrategy {
    pub const SINGLE: ParallelStrategy = ParallelStrategy { dp: 1, tp: 1, pp: 1, ep: 1 };

    pub fn new(dp: u32, tp: u32, pp: u32, ep: u32) -> Self {
        ParallelStrategy { dp, tp, pp, ep }
    }

    pub fn tp(tp: u32) -> Self {
        ParallelStrategy { tp, ..Self::SINGLE }
    }

    pub fn gpus_per_instance(&self) -> u32 {
        self.tp * self.pp
    }

    /// Checks divisibility against the model.
    pub fn check(&self, model: &ModelSpec) -> Result<(), CostError> {
        let fail = |reason: String| {
            Err(CostError::Incompatible { strategy: *self, model: model.name.clone(), reason })
        };
        if self.dp == 0 || self.tp == 0 || self.pp == 0 || self.ep == 0 {
            return fail("all degrees must be >= 1".into());
        }
        let tp = self.tp as u64;
        if !model.num_attention_heads.is_multiple_of(tp) {
            return fail(format!("tp {} does not divide num_attention_heads {}", self.tp, model.num_attention_heads));
        }
        if !model.num_kv_heads.is_multiple_of(tp) {
            return fail(format!("tp {} does not divide num_kv_heads {}", self.tp, model.num_kv_heads));
        }
        if !model.num_layers.is_multiple_of(self.pp as u64) {
            return fail(format!("pp {} does not divide num_layers {}", self.pp, model.num_layers));
        }
        if !model.num_experts.is_multiple_of(self.ep as u64) {
            return fail(format!("ep {} does not divide num_experts {}", self.ep, model.num_experts));
        }
        if self.ep > self.gpus_per_instance() {
            return fail(format!("ep {} exceeds tp*pp {}", self.ep, self.gpus_per_instance()));
        }
        Ok(())
    }
}

impl fmt::Display for ParallelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dp{}-tp{}-pp{}-ep{}", self.dp, self.tp, self.pp, self.ep)
    }
}

/// Per-GPU cost of one prefill pass or one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub compute_flops: f64,
    pub comm_bytes: f64,
    pub vram_access_bytes: f64,
    /// Seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VramBudget {
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub kv_bytes: u64,
    pub total_bytes: u64,
}

impl VramBudget {
    pub fn new(weight_bytes: u64, activation_bytes: u64, kv_bytes: u64) -> Self {
        let total_bytes = weight_bytes + activation_bytes + kv_bytes;
        let b = VramBudget { weight_bytes, activation_bytes, kv_bytes, total_bytes };
        assert_eq!(b.total_bytes, b.weight_bytes + b.activation_bytes + b.kv_bytes);
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostOptions {
    /// Allocation granularity for weights and activations, bytes.
    pub alignment_bytes: u64,
    /// Live activation tensors of width `hidden` per in-flight token.
    pub live_activation_tensors: u64,
    /// Requests batched into one prefill pass.
    pub prefill_batch: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions { alignment_bytes: 1, live_activation_tensors: 4, prefill_batch: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase")]
pub enum Phase {
    Prefill { batch: u64, seq_len: u64 },
    /// `context_tokens` is the context length summed over the batch.
    Decode { batch: u64, context_tokens: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRow {
    pub operator: &'static str,
    /// Per GPU.
    pub flops: f64,
    /// Weight and KV traffic per GPU.
    pub bytes_moved: f64,
    /// Collective traffic per GPU.
    pub comm_bytes: f64,
}

/// Per-operator breakdown for one step, per GPU. See the module docs.
pub fn operator_table(model: &ModelSpec, strategy: &ParallelStrategy, phase: Phase) -> Vec<OperatorRow> {
    let stats = derive_stats(model);
    let f = |v: u64| v as f64;
    let (h, heads, kv_heads, d) = (f(model.hidden_dim), f(model.num_attention_heads), f(model.num_kv_heads), f(model.head_dim));
    let (ffn, vocab, layers, b) = (f(model.ffn_dim), f(model.vocab_size), f(model.num_layers), f(model.dtype_bytes));
    let (experts, active) = (f(model.num_experts), f(model.experts_per_token));
    let kv_tok = f(stats.kv_bytes_per_token);
    let (tp, pp) = (f(strategy.tp as u64), f(strategy.pp as u64));
    let gpus = tp * pp;

    // tokens in the step, attention span, KV bytes touched
    let (t, span, kv_bytes) = match phase {
        Phase::Prefill { batch, seq_len } => (f(batch * seq_len), f(batch) * f(seq_len) * f(seq_len), f(batch * seq_len) * kv_tok),
        Phase::Decode { batch, context_tokens } => (f(batch), f(context_tokens), f(context_tokens) * kv_tok),
    };
    let norm_params = 2.0 * h * layers + h;
    let row = |operator, flops: f64, bytes: f64| OperatorRow { operator, flops: flops / gpus, bytes_moved: bytes / gpus, comm_bytes: 0.0 };

    let mut rows = vec![
        row("embedding", 0.0, vocab * h * b),
        row("qkv_proj", 2.0 * t * h * (heads + 2.0 * kv_heads) * d * layers, h * (heads + 2.0 * kv_heads) * d * b * layers),
        row("attn_score", 2.0 * heads * d * layers * span, kv_bytes / 2.0),
        row("attn_context", 2.0 * heads * d * layers * span, kv_bytes / 2.0),
        row("o_proj", 2.0 * t * heads * d * h * layers, heads * d * h * b * layers),
        row("ffn", 6.0 * t * h * ffn * active * layers, 3.0 * h * ffn * experts * b * layers),
    ];
    if model.is_moe() {
        rows.push(row("router", 2.0 * t * h * experts * layers, h * experts * b * layers));
    }
    rows.push(row("norm", 2.0 * t * norm_params, norm_params * b));
    rows.push(row("lm_head", 2.0 * t * h * vocab, vocab * h * b));

    let activation = t * h * b;
    rows.push(OperatorRow {
        operator: "tp_allreduce",
        flops: 0.0,
        bytes_moved: 0.0,
        comm_bytes: 2.0 * (layers / pp) * 2.0 * (tp - 1.0) / tp * activation,
    });
    rows.push(OperatorRow {
        operator: "pp_send",
        flops: 0.0,
        bytes_moved: 0.0,
        comm_bytes: if strategy.pp > 1 { activation } else { 0.0 },
    });
    rows
}

/// Renders an operator table as aligned text.
pub fn render_operator_table(rows: &[OperatorRow]) -> String {
    let mut out = format!("{:<14} {:>14} {:>14} {:>14}\n", "operator", "flops", "bytes_moved", "comm_bytes");
    for r in rows {
        out.push_str(&format!("{:<14} {:>14.6e} {:>14.6e} {:>14.6e}\n", r.operator, r.flops, r.bytes_moved, r.comm_bytes));
    }
    out
}

/// Renders an operator table as CSV.
pub fn operator_table_csv(rows: &[OperatorRow]) -> String {
    let mut out = String::from("operator,flops,bytes_moved,comm_bytes\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.operator, r.flops, r.bytes_moved, r.comm_bytes));
    }
    out
}

fn sum_rows(rows: &[OperatorRow]) -> (f64, f64, f64) {
    rows.iter().fold((0.0, 0.0, 0.0), |(f, m, c), r| (f + r.flops, m + r.bytes_moved, c + r.comm_bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillThroughput {
    pub batch: u64,
    /// `l_p`, seconds.
    pub latency: f64,
    pub requests_per_s: f64,
    pub tokens_per_s: f64,
    /// `requests_per_s / (tp·pp)`.
    pub requests_per_s_per_gpu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeThroughput {
    pub batch: u64,
    /// `l_d` at `batch`, seconds.
    pub latency: f64,
    pub tokens_per_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub options: CostOptions,
}

impl CostModel {
    pub fn new(options: CostOptions) -> Self {
        CostModel { options }
    }

    fn align(&self, bytes: u64) -> u64 {
        let a = self.options.alignment_bytes.max(1);
        bytes.div_ceil(a) * a
    }

    pub fn prefill_cost(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        batch: u64,
        seq_len: u64,
    ) -> Result<StageCost, CostError> {
        strategy.check(model)?;
        if batch == 0 || seq_len == 0 {
            return Err(CostError::EmptyShape);
        }
        let (flops, bytes, comm) = sum_rows(&operator_table(model, strategy, Phase::Prefill { batch, seq_len }));
        Ok(StageCost {
            compute_flops: flops,
            comm_bytes: comm,
            vram_access_bytes: bytes,
            latency: flops / gpu.effective_compute() + comm / gpu.effective_interconnect(),
        })
    }

    pub fn decode_cost(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        batch: u64,
        context_len: u64,
    ) -> Result<StageCost, CostError> {
        self.decode_step_cost(gpu, model, strategy, batch, batch * context_len)
    }

    /// Decode step for a batch whose context lengths sum to `context_tokens`.
    pub fn decode_step_cost(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        batch: u64,
        context_tokens: u64,
    ) -> Result<StageCost, CostError> {
        strategy.check(model)?;
        if batch == 0 || context_tokens == 0 {
            return Err(CostError::EmptyShape);
        }
        let (flops, bytes, comm) = sum_rows(&operator_table(model, strategy, Phase::Decode { batch, context_tokens }));
        Ok(StageCost {
            compute_flops: flops,
            comm_bytes: comm,
            vram_access_bytes: bytes,
            latency: bytes / gpu.effective_vram_bandwidth() + comm / gpu.effective_interconnect(),
        })
    }

    /// Weight bytes resident on each GPU of the instance.
    pub fn weight_bytes_per_gpu(&self, model: &ModelSpec, strategy: &ParallelStrategy) -> u64 {
        let stats = derive_stats(model);
        let gpus = strategy.gpus_per_instance() as u64;
        let expert_bytes = stats.expert_param_count * model.dtype_bytes;
        let dense_bytes = stats.weight_bytes_total - expert_bytes;
        self.align(dense_bytes.div_ceil(gpus) + expert_bytes.div_ceil(gpus * strategy.ep as u64))
    }

    /// Per-GPU occupancy during prefill. KV produced by the pass is counted
    /// inside the activation term; the KV term is always zero.
    pub fn prefill_vram(&self, model: &ModelSpec, strategy: &ParallelStrategy, batch: u64, seq_len: u64) -> VramBudget {
        let stats = derive_stats(model);
        let gpus = strategy.gpus_per_instance() as u64;
        let tokens = batch * seq_len;
        let live = tokens * model.hidden_dim * model.dtype_bytes * self.options.live_activation_tensors;
        let kv = (tokens * stats.kv_bytes_per_token).div_ceil(gpus);
        VramBudget::new(self.weight_bytes_per_gpu(model, strategy), self.align(live + kv), 0)
    }

    /// Per-GPU occupancy of a decode instance holding `batch` sequences of up
    /// to `max_context` tokens, KV rounded up to `block_size`-token blocks.
    pub fn decode_vram(
        &self,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        batch: u64,
        max_context: u64,
        block_size: u64,
    ) -> VramBudget {
        let stats = derive_stats(model);
        let gpus = strategy.gpus_per_instance() as u64;
        let block = block_size.max(1);
        let padded = max_context.div_ceil(block) * block;
        let activation = batch * model.hidden_dim * model.dtype_bytes * self.options.live_activation_tensors;
        let kv = (batch * padded * stats.kv_bytes_per_token).div_ceil(gpus);
        VramBudget::new(self.weight_bytes_per_gpu(model, strategy), self.align(activation), self.align(kv))
    }

    /// KV bytes one sequence of `context` tokens reserves on each decode GPU.
    pub fn kv_reservation(&self, gpu: &GpuSpec, model: &ModelSpec, strategy: &ParallelStrategy, context: u64) -> u64 {
        self.decode_vram(model, strategy, 1, context, gpu.kv_block_size as u64).kv_bytes
    }

    /// Largest batch whose decode footprint fits in the GPU, 0 if none.
    pub fn max_decode_batch(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        max_context: u64,
    ) -> Result<u64, CostError> {
        let block = gpu.kv_block_size as u64;
        let cap = gpu.vram_capacity;
        let fits = |b: u64| self.decode_vram(model, strategy, b, max_context, block).total_bytes <= cap;
        if !fits(0) {
            return Err(CostError::WeightsDoNotFit { weight_bytes: self.weight_bytes_per_gpu(model, strategy), capacity: cap });
        }
        if !fits(1) {
            return Ok(0);
        }
        let mut lo = 1u64;
        let mut hi = 2u64;
        while fits(hi) {
            lo = hi;
            hi = hi.saturating_mul(2);
            if hi == u64::MAX {
                return Ok(lo);
            }
        }
        // fits(lo) && !fits(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    pub fn instance_throughput_p(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        workload: &WorkloadSpec,
    ) -> Result<PrefillThroughput, CostError> {
        let batch = self.options.prefill_batch.max(1);
        let latency = self.prefill_cost(gpu, model, strategy, batch, workload.input_len)?.latency;
        let requests_per_s = batch as f64 / latency;
        Ok(PrefillThroughput {
            batch,
            latency,
            requests_per_s,
            tokens_per_s: requests_per_s * workload.input_len as f64,
            requests_per_s_per_gpu: requests_per_s / strategy.gpus_per_instance() as f64,
        })
    }

    /// Token rate at the largest batch that fits in VRAM (at the full context
    /// `input_len + output_len`) and meets TPOT (at the mean context).
    pub fn instance_throughput_d(
        &self,
        gpu: &GpuSpec,
        model: &ModelSpec,
        strategy: &ParallelStrategy,
        workload: &WorkloadSpec,
    ) -> Result<DecodeThroughput, CostError> {
        let max_batch = self.max_decode_batch(gpu, model, strategy, workload.max_context())?;
        if max_batch == 0 {
            return Err(CostError::NoFeasibleBatch(BatchLimit::Vram));
        }
        let ctx = workload.mean_decode_context();
        let latency = |b: u64| self.decode_cost(gpu, model, strategy, b, ctx).map(|c| c.latency);
        if latency(1)? > workload.tpot_slo {
            return Err(CostError::NoFeasibleBatch(BatchLimit::Tpot));
        }
        // latency is non-decreasing in batch
        let (mut lo, mut hi) = (1u64, max_batch);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if latency(mid)? <= workload.tpot_slo {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let l = latency(lo)?;
        Ok(DecodeThroughput { batch: lo, latency: l, tokens_per_s: lo as f64 / l })
    }
}
