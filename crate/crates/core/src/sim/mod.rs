//! Deterministic discrete-event simulator of a P/D-disaggregated cluster and
//! of the colocated prefill-priority baseline.
//!
//! Request lifecycle in disaggregated mode:
//!
//! 1. The global scheduler receives the request and sends it to the prefill
//!    instance with the least outstanding tokens. It lands in that queue
//!    after [`SimConfig::dispatch_overhead`].
//! 2. The prefill instance runs up to [`SimConfig::prefill_batch`] queued
//!    requests per step, timed by the prefill cost model. The first token
//!    is emitted at the end of the step.
//! 3. At prefill completion the scheduler picks the least-loaded decode
//!    instance. The KV cache is staged P GPU → P host buffer, then sent over
//!    the link to the D host buffer.
//! 4. Once the decode instance has VRAM for the full context it reserves it
//!    and copies host buffer → GPU. Requests waiting for VRAM stay queued in
//!    the host buffer.
//! 5. Loaded requests join the running batch at the next step boundary
//!    (continuous batching). Each step emits one token per running request
//!    and is timed from the current batch size and summed context.
//!
//! In colocated mode every instance serves both stages. Whenever an
//! instance reaches a step boundary with an admissible request queued, it
//! runs a prefill step before resuming decode, and no KV transfer happens.
//!
//! Events are processed in `(time, kind, id)` order with completions before
//! new work at equal times, so runs are bitwise reproducible.
//!
//! Load is outstanding tokens: queued and running prompt tokens on a
//! prefill instance, remaining output tokens on a decode instance, and both
//! on a colocated one.

mod scenario;

pub use scenario::{
    ClusterSection, PoolSection, Scenario, ScenarioError, SweepAxes, SweepPoint, StrategySpec,
};

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{derive_stats, ArrivalProcess, GpuSpec, ModelSpec, WorkloadSpec};
use crate::cost_model::{CostError, CostModel, ParallelStrategy};
use crate::planner::DeploymentPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid cluster: {0}")]
    Config(String),
    #[error("invalid transfer link: {0}")]
    Link(String),
    #[error("duration must be > 0 (got {0})")]
    InvalidDuration(f64),
    #[error("simulation time overflow at t = {time} (limit {limit})")]
    TimeOverflow { time: f64, limit: f64 },
    #[error("instance {instance} uses {used} VRAM bytes, capacity {capacity}, at t = {time}")]
    VramBreach { instance: usize, used: u64, capacity: u64, time: f64 },
    #[error("{0} needs a {1} cluster")]
    WrongMode(&'static str, SimMode),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prefill,
    Decode,
    Colocated,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Prefill => "prefill",
            Role::Decode => "decode",
            Role::Colocated => "colocated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Disaggregated,
    Colocated,
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMode::Disaggregated => "disaggregated",
            SimMode::Colocated => "colocated",
        })
    }
}

/// KV path between a prefill and a decode instance. The two host copies run
/// at `staging_bandwidth`, the host-to-host hop at `discount · bandwidth`,
/// and every hop pays `per_request_overhead`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferLink {
    /// Bytes/s.
    pub bandwidth: f64,
    pub discount: f64,
    /// Seconds per hop.
    #[serde(default)]
    pub per_request_overhead: f64,
    /// GPU↔host copy rate, bytes/s.
    pub staging_bandwidth: f64,
}

impl Default for TransferLink {
    fn default() -> Self {
        TransferLink { bandwidth: 25e9, discount: 0.8, per_request_overhead: 50e-6, staging_bandwidth: 25e9 }
    }
}

impl TransferLink {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.bandwidth) || !positive(self.staging_bandwidth) {
            return Err(SimError::Link("bandwidths must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(SimError::Link(format!("discount {} out of range (0, 1]", self.discount)));
        }
        if !(self.per_request_overhead.is_finite() && self.per_request_overhead >= 0.0) {
            return Err(SimError::Link("per_request_overhead must be >= 0".into()));
        }
        Ok(())
    }

    /// Durations of the GPU→host, host→host and host→GPU copies.
    pub fn hop_times(&self, bytes: u64) -> [f64; 3] {
        let b = bytes as f64;
        let o = self.per_request_overhead;
        [
            b / self.staging_bandwidth + o,
            b / (self.discount * self.bandwidth) + o,
            b / self.staging_bandwidth + o,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    pub ttft: f64,
    pub tpot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Requests per prefill step.
    pub prefill_batch: u64,
    /// Scheduler-to-instance delay, seconds.
    pub dispatch_overhead: f64,
    /// Stop processing events after this time; `None` drains the system.
    pub horizon: Option<f64>,
    /// Error out if simulated time passes this bound.
    pub max_sim_time: f64,
    /// Keep the per-request lifecycle trace.
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { prefill_batch: 1, dispatch_overhead: 0.0, horizon: None, max_sim_time: 1e7, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub role: Role,
    pub gpu: GpuSpec,
    pub strategy: ParallelStrategy,
}

/// Static description of a cluster ready to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub mode: SimMode,
    pub model: ModelSpec,
    pub cost: CostModel,
    pub link: TransferLink,
    pub config: SimConfig,
    pub slo: Slo,
    pub instances: Vec<InstanceSpec>,
}

impl ClusterState {
    pub fn new(
        mode: SimMode,
        model: ModelSpec,
        cost: CostModel,
        link: TransferLink,
        config: SimConfig,
        slo: Slo,
        instances: Vec<InstanceSpec>,
    ) -> Result<Self, SimError> {
        let cluster = ClusterState { mode, model, cost, link, config, slo, instances };
        cluster.validate()?;
        Ok(cluster)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.link.validate()?;
        if self.config.prefill_batch == 0 {
            return Err(SimError::Config("prefill_batch must be >= 1".into()));
        }
        if !(self.config.dispatch_overhead.is_finite() && self.config.dispatch_overhead >= 0.0) {
            return Err(SimError::Config("dispatch_overhead must be >= 0".into()));
        }
        let has = |r: Role| self.instances.iter().any(|i| i.role == r);
        match self.mode {
            SimMode::Disaggregated if !(has(Role::Prefill) && has(Role::Decode)) || has(Role::Colocated) => {
                return Err(SimError::Config("disaggregated mode needs prefill and decode instances only".into()))
            }
            SimMode::Colocated if self.instances.is_empty() || self.instances.iter().any(|i| i.role != Role::Colocated) => {
                return Err(SimError::Config("colocated mode needs colocated instances only".into()))
            }
            _ => {}
        }
        for (id, inst) in self.instances.iter().enumerate() {
            inst.strategy.check(&self.model)?;
            let w = self.cost.weight_bytes_per_gpu(&self.model, &inst.strategy);
            if w > inst.gpu.vram_capacity {
                return Err(SimError::Config(format!(
                    "instance {id}: weights {w} B exceed {} capacity {}",
                    inst.gpu.name, inst.gpu.vram_capacity
                )));
            }
        }
        Ok(())
    }

    /// GPUs across all instances.
    pub fn total_gpus(&self) -> u64 {
        self.instances.iter().map(|i| i.strategy.gpus_per_instance() as u64).sum()
    }
}

/// Instantiates `X` prefill and `Y` decode instances from a plan, or, in
/// colocated mode, the same GPUs as colocated instances (the prefill GPUs
/// with the prefill strategy, the decode GPUs with the decode strategy).
/// `dp` replicas become separate instances.
pub fn build_cluster(
    plan: &DeploymentPlan,
    model: &ModelSpec,
    link: TransferLink,
    cost: CostModel,
    config: SimConfig,
    slo: Slo,
    mode: SimMode,
) -> Result<ClusterState, SimError> {
    let (p_role, d_role) = match mode {
        SimMode::Disaggregated => (Role::Prefill, Role::Decode),
        SimMode::Colocated => (Role::Colocated, Role::Colocated),
    };
    let mut instances = Vec::new();
    for (role, gpu, strategy, count) in [
        (p_role, &plan.p_gpu, plan.p_strategy, plan.p_count),
        (d_role, &plan.d_gpu, plan.d_strategy, plan.d_count),
    ] {
        let replica = ParallelStrategy { dp: 1, ..strategy };
        for _ in 0..count * strategy.dp as u64 {
            instances.push(InstanceSpec { role, gpu: gpu.clone(), strategy: replica });
        }
    }
    ClusterState::new(mode, model.clone(), cost, link, config, slo, instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub arrival_time: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub prefill_instance: Option<usize>,
    pub decode_instance: Option<usize>,
    pub prefill_start: Option<f64>,
    pub first_token_time: Option<f64>,
    /// Completion time of every emitted token, first token included.
    pub token_times: Vec<f64>,
    pub kv_transfer_start: Option<f64>,
    pub kv_transfer_end: Option<f64>,
    pub completion_time: Option<f64>,
}

impl Request {
    pub fn new(id: usize, arrival_time: f64, input_len: u64, output_len: u64) -> Self {
        Request {
            id,
            arrival_time,
            input_len,
            output_len,
            prefill_instance: None,
            decode_instance: None,
            prefill_start: None,
            first_token_time: None,
            token_times: Vec::new(),
            kv_transfer_start: None,
            kv_transfer_end: None,
            completion_time: None,
        }
    }

    pub fn tokens_emitted(&self) -> u64 {
        self.token_times.len() as u64
    }

    pub fn ttft(&self) -> Option<f64> {
        self.first_token_time.map(|t| t - self.arrival_time)
    }

    /// Mean gap between output tokens after the first.
    pub fn tpot(&self) -> Option<f64> {
        match (self.token_times.first(), self.token_times.last()) {
            (Some(first), Some(last)) if self.output_len > 1 && self.completion_time.is_some() => {
                Some((last - first) / (self.output_len - 1) as f64)
            }
            _ => None,
        }
    }
}

/// Deterministic given `seed`. Deterministic arrivals start at 0 and are
/// spaced `1/qps` apart; Poisson arrivals use exponential gaps.
pub fn generate_arrivals(workload: &WorkloadSpec, duration: f64, seed: u64) -> Result<Vec<Request>, SimError> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(SimError::InvalidDuration(duration));
    }
    if !(workload.qps.is_finite() && workload.qps > 0.0) {
        return Err(SimError::Config(format!("qps must be > 0 (got {})", workload.qps)));
    }
    let mut times = Vec::new();
    match workload.arrival_process {
        ArrivalProcess::Deterministic => {
            let gap = 1.0 / workload.qps;
            let mut i = 0u64;
            loop {
                let t = i as f64 * gap;
                if t >= duration {
                    break;
                }
                times.push(t);
                i += 1;
            }
        }
        ArrivalProcess::Poisson => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let exp = Exp::new(workload.qps).map_err(|e| SimError::Config(e.to_string()))?;
            let mut t = 0.0;
            loop {
                t += exp.sample(&mut rng);
                if t >= duration {
                    break;
                }
                times.push(t);
            }
        }
    }
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(id, t)| Request::new(id, t, workload.input_len, workload.output_len))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Arrival,
    Queued,
    PrefillStart,
    FirstToken,
    TransferStart,
    Staged,
    Admitted,
    KvLoaded,
    Completed,
}

/// One request lifecycle event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: f64,
    pub request: usize,
    pub event: TraceKind,
    pub instance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: usize,
    pub role: Role,
    pub gpu: String,
    pub strategy: ParallelStrategy,
    pub busy_fraction: f64,
    pub busy_time: f64,
    pub peak_vram: u64,
    pub vram_capacity: u64,
    pub max_running: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub arrived: u64,
    pub completed: u64,
    pub unfinished: u64,
    /// Measurement window: first arrival to the horizon or last completion.
    pub window: f64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub tpot_mean: f64,
    pub tpot_p99: f64,
    /// Output tokens emitted per second of window.
    pub throughput: f64,
    /// Completed requests per second.
    pub completed_rate: f64,
    /// Completed requests per second meeting both SLOs.
    pub goodput: f64,
    pub slo_attainment: f64,
    pub kv_transfer_time_mean: f64,
    pub tokens_emitted: u64,
    pub busy_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub metrics: SimMetrics,
    pub instances: Vec<InstanceSummary>,
    pub requests: Vec<Request>,
    pub trace: Vec<TraceRecord>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    PrefillDone,
    DecodeStepDone,
    KvLoaded,
    Staged,
    Queued,
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    id: usize,
    seq: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.cmp(&self.kind))
            .then(other.id.cmp(&self.id))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Prefill(Vec<usize>),
    Decode,
}

#[derive(Debug)]
struct Inst {
    role: Role,
    gpu: GpuSpec,
    strategy: ParallelStrategy,
    weight_bytes: u64,
    queue: VecDeque<usize>,
    ready: Vec<usize>,
    running: Vec<usize>,
    step: Option<Step>,
    step_start: f64,
    /// Requests holding a KV reservation.
    admitted: u64,
    kv_reserved: u64,
    prefill_activation: u64,
    load: u64,
    busy_time: f64,
    peak_vram: u64,
    max_running: u64,
}

struct Engine<'a> {
    c: &'a ClusterState,
    kv_bytes_per_token: u64,
    insts: Vec<Inst>,
    reqs: Vec<Request>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    trace: Vec<TraceRecord>,
}

impl<'a> Engine<'a> {
    fn new(c: &'a ClusterState, reqs: Vec<Request>) -> Self {
        let insts = c
            .instances
            .iter()
            .map(|s| Inst {
                role: s.role,
                gpu: s.gpu.clone(),
                strategy: s.strategy,
                weight_bytes: c.cost.weight_bytes_per_gpu(&c.model, &s.strategy),
                queue: VecDeque::new(),
                ready: Vec::new(),
                running: Vec::new(),
                step: None,
                step_start: 0.0,
                admitted: 0,
                kv_reserved: 0,
                prefill_activation: 0,
                load: 0,
                busy_time: 0.0,
                peak_vram: 0,
                max_running: 0,
            })
            .collect();
        Engine {
            c,
            kv_bytes_per_token: derive_stats(&c.model).kv_bytes_per_token,
            insts,
            reqs,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            trace: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, kind: EventKind, id: usize) {
        self.seq += 1;
        self.heap.push(Event { time, kind, id, seq: self.seq });
    }

    fn log(&mut self, request: usize, event: TraceKind, instance: Option<usize>) {
        if self.c.config.record_trace {
            self.trace.push(TraceRecord { time: self.now, request, event, instance });
        }
    }

    fn kv_reservation(&self, i: usize, r: usize) -> u64 {
        let inst = &self.insts[i];
        let req = &self.reqs[r];
        self.c.cost.kv_reservation(&inst.gpu, &self.c.model, &inst.strategy, req.input_len + req.output_len)
    }

    /// Per-GPU VRAM with `admitted` KV reservations worth `kv` bytes and the
    /// given prefill activation.
    fn vram(&self, i: usize, admitted: u64, kv: u64, prefill_activation: u64) -> u64 {
        let inst = &self.insts[i];
        let act = self
            .c
            .cost
            .decode_vram(&self.c.model, &inst.strategy, admitted, 0, inst.gpu.kv_block_size as u64)
            .activation_bytes;
        inst.weight_bytes + act + kv + prefill_activation
    }

    fn vram_in_use(&self, i: usize) -> u64 {
        let inst = &self.insts[i];
        self.vram(i, inst.admitted, inst.kv_reserved, inst.prefill_activation)
    }

    fn prefill_activation(&self, i: usize, batch: &[usize]) -> u64 {
        let seq = batch.iter().map(|&r| self.reqs[r].input_len).max().unwrap_or(0);
        self.c
            .cost
            .prefill_vram(&self.c.model, &self.insts[i].strategy, batch.len() as u64, seq)
            .activation_bytes
    }

    fn least_loaded(&self, roles: &[Role]) -> usize {
        self.insts
            .iter()
            .enumerate()
            .filter(|(_, s)| roles.contains(&s.role))
            .min_by_key(|(id, s)| (s.load, *id))
            .map(|(id, _)| id)
            .expect("cluster validated to contain the role")
    }

    /// Picks the prefill batch from the head of the queue: as many requests
    /// as fit, up to the configured batch, in FIFO order.
    fn take_prefill_batch(&mut self, i: usize) -> Vec<usize> {
        let cap = self.insts[i].gpu.vram_capacity;
        let colocated = self.insts[i].role == Role::Colocated;
        let mut batch = Vec::new();
        let mut extra_kv = 0;
        while (batch.len() as u64) < self.c.config.prefill_batch {
            let Some(&r) = self.insts[i].queue.get(batch.len()) else { break };
            let mut trial = batch.clone();
            trial.push(r);
            let kv = if colocated { self.kv_reservation(i, r) } else { 0 };
            let inst = &self.insts[i];
            let (admitted, reserved) = if colocated {
                (inst.admitted + trial.len() as u64, inst.kv_reserved + extra_kv + kv)
            } else {
                (0, 0)
            };
            if self.vram(i, admitted, reserved, self.prefill_activation(i, &trial)) > cap {
                break;
            }
            extra_kv += kv;
            batch = trial;
        }
        for _ in 0..batch.len() {
            self.insts[i].queue.pop_front();
        }
        if colocated {
            self.insts[i].admitted += batch.len() as u64;
            self.insts[i].kv_reserved += extra_kv;
        }
        batch
    }

    fn try_start(&mut self, i: usize) -> Result<(), SimError> {
        if self.insts[i].step.is_some() {
            return Ok(());
        }
        let inst = &mut self.insts[i];
        let ready = std::mem::take(&mut inst.ready);
        inst.running.extend(ready);
        if matches!(self.insts[i].role, Role::Prefill | Role::Colocated) {
            let batch = self.take_prefill_batch(i);
            if !batch.is_empty() {
                let seq = batch.iter().map(|&r| self.reqs[r].input_len).max().expect("non-empty");
                let inst = &self.insts[i];
                let latency = self
                    .c
                    .cost
                    .prefill_cost(&inst.gpu, &self.c.model, &inst.strategy, batch.len() as u64, seq)?
                    .latency;
                self.insts[i].prefill_activation = self.prefill_activation(i, &batch);
                for &r in &batch {
                    self.reqs[r].prefill_start = Some(self.now);
                    self.log(r, TraceKind::PrefillStart, Some(i));
                }
                self.insts[i].step = Some(Step::Prefill(batch));
                self.insts[i].step_start = self.now;
                self.push(self.now + latency, EventKind::PrefillDone, i);
                return Ok(());
            }
        }
        if self.insts[i].role != Role::Prefill && !self.insts[i].running.is_empty() {
            let inst = &self.insts[i];
            let context: u64 = inst
                .running
                .iter()
                .map(|&r| self.reqs[r].input_len + self.reqs[r].tokens_emitted())
                .sum();
            let batch = inst.running.len() as u64;
            let latency = self
                .c
                .cost
                .decode_step_cost(&inst.gpu, &self.c.model, &inst.strategy, batch, context)?
                .latency;
            let inst = &mut self.insts[i];
            inst.max_running = inst.max_running.max(batch);
            inst.step = Some(Step::Decode);
            inst.step_start = self.now;
            self.push(self.now + latency, EventKind::DecodeStepDone, i);
        }
        Ok(())
    }

    /// Reserves VRAM for queued decode requests in FIFO order and starts
    /// their host-to-GPU copy.
    fn admit_decode(&mut self, i: usize) {
        while let Some(&r) = self.insts[i].queue.front() {
            let kv = self.kv_reservation(i, r);
            let inst = &self.insts[i];
            if self.vram(i, inst.admitted + 1, inst.kv_reserved + kv, 0) > inst.gpu.vram_capacity {
                break;
            }
            let inst = &mut self.insts[i];
            inst.queue.pop_front();
            inst.admitted += 1;
            inst.kv_reserved += kv;
            self.log(r, TraceKind::Admitted, Some(i));
            let bytes = self.reqs[r].input_len * self.kv_bytes_per_token;
            let hop = self.c.link.hop_times(bytes)[2];
            self.push(self.now + hop, EventKind::KvLoaded, r);
        }
    }

    fn complete(&mut self, r: usize, i: usize) {
        self.reqs[r].completion_time = Some(self.now);
        self.log(r, TraceKind::Completed, Some(i));
        if self.insts[i].role != Role::Prefill {
            let kv = self.kv_reservation(i, r);
            let inst = &mut self.insts[i];
            inst.admitted -= 1;
            inst.kv_reserved -= kv;
        }
    }

    fn end_step(&mut self, i: usize) {
        let inst = &mut self.insts[i];
        inst.busy_time += self.now - inst.step_start;
        inst.prefill_activation = 0;
    }

    fn on_prefill_done(&mut self, i: usize) -> Result<(), SimError> {
        let Some(Step::Prefill(batch)) = self.insts[i].step.take() else {
            unreachable!("prefill completion without a prefill step")
        };
        self.end_step(i);
        for r in batch {
            let req = &mut self.reqs[r];
            req.first_token_time = Some(self.now);
            req.token_times.push(self.now);
            let (input, output) = (req.input_len, req.output_len);
            self.log(r, TraceKind::FirstToken, Some(i));
            let role = self.insts[i].role;
            self.insts[i].load -= input;
            if role == Role::Colocated {
                self.insts[i].load -= 1;
            }
            if output == 1 {
                self.complete(r, i);
                continue;
            }
            match role {
                Role::Colocated => self.insts[i].running.push(r),
                _ => {
                    let d = self.least_loaded(&[Role::Decode]);
                    self.insts[d].load += output - 1;
                    self.reqs[r].decode_instance = Some(d);
                    self.reqs[r].kv_transfer_start = Some(self.now);
                    self.log(r, TraceKind::TransferStart, Some(i));
                    let [h1, h2, _] = self.c.link.hop_times(input * self.kv_bytes_per_token);
                    self.push(self.now + h1 + h2, EventKind::Staged, r);
                }
            }
        }
        self.try_start(i)
    }

    fn on_decode_step_done(&mut self, i: usize) -> Result<(), SimError> {
        self.insts[i].step = None;
        self.end_step(i);
        let running = std::mem::take(&mut self.insts[i].running);
        let mut still = Vec::with_capacity(running.len());
        for r in running {
            self.reqs[r].token_times.push(self.now);
            self.insts[i].load -= 1;
            if self.reqs[r].tokens_emitted() == self.reqs[r].output_len {
                self.complete(r, i);
            } else {
                still.push(r);
            }
        }
        self.insts[i].running = still;
        if self.insts[i].role == Role::Decode {
            self.admit_decode(i);
        }
        self.try_start(i)
    }

    fn check_vram(&mut self) -> Result<(), SimError> {
        for i in 0..self.insts.len() {
            let used = self.vram_in_use(i);
            let inst = &mut self.insts[i];
            inst.peak_vram = inst.peak_vram.max(used);
            if used > inst.gpu.vram_capacity {
                return Err(SimError::VramBreach { instance: i, used, capacity: inst.gpu.vram_capacity, time: self.now });
            }
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        match ev.kind {
            EventKind::Arrival => {
                let r = ev.id;
                self.log(r, TraceKind::Arrival, None);
                let (roles, extra): (&[Role], u64) = match self.c.mode {
                    SimMode::Disaggregated => (&[Role::Prefill], 0),
                    SimMode::Colocated => (&[Role::Colocated], self.reqs[r].output_len),
                };
                let i = self.least_loaded(roles);
                self.insts[i].load += self.reqs[r].input_len + extra;
                self.reqs[r].prefill_instance = Some(i);
                self.push(self.now + self.c.config.dispatch_overhead, EventKind::Queued, r);
            }
            EventKind::Queued => {
                let r = ev.id;
                let i = self.reqs[r].prefill_instance.expect("dispatched");
                self.insts[i].queue.push_back(r);
                self.log(r, TraceKind::Queued, Some(i));
                self.try_start(i)?;
            }
            EventKind::PrefillDone => self.on_prefill_done(ev.id)?,
            EventKind::DecodeStepDone => self.on_decode_step_done(ev.id)?,
            EventKind::Staged => {
                let r = ev.id;
                let d = self.reqs[r].decode_instance.expect("routed at prefill completion");
                self.log(r, TraceKind::Staged, Some(d));
                self.insts[d].queue.push_back(r);
                self.admit_decode(d);
            }
            EventKind::KvLoaded => {
                let r = ev.id;
                let d = self.reqs[r].decode_instance.expect("routed at prefill completion");
                self.reqs[r].kv_transfer_end = Some(self.now);
                self.log(r, TraceKind::KvLoaded, Some(d));
                self.insts[d].ready.push(r);
                self.try_start(d)?;
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        for r in 0..self.reqs.len() {
            let t = self.reqs[r].arrival_time;
            self.push(t, EventKind::Arrival, r);
        }
        let limit = self.c.config.max_sim_time;
        while let Some(ev) = self.heap.pop() {
            if !ev.time.is_finite() || ev.time > limit {
                return Err(SimError::TimeOverflow { time: ev.time, limit });
            }
            if self.c.config.horizon.is_some_and(|h| ev.time > h) {
                break;
            }
            self.now = ev.time;
            self.handle(ev)?;
            self.check_vram()?;
        }
        Ok(self.finish())
    }

    fn finish(self) -> SimReport {
        let reqs = self.reqs;
        let first_arrival = reqs.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
        let last_done = reqs.iter().filter_map(|r| r.completion_time).fold(f64::NEG_INFINITY, f64::max);
        let end = self.c.config.horizon.unwrap_or(last_done);
        let window = if reqs.is_empty() || !end.is_finite() { 0.0 } else { (end - first_arrival).max(0.0) };
        let per_s = |x: f64| if window > 0.0 { x / window } else { 0.0 };

        let mut ttft: Vec<f64> = reqs.iter().filter_map(Request::ttft).collect();
        let mut tpot: Vec<f64> = reqs.iter().filter_map(Request::tpot).collect();
        ttft.sort_by(f64::total_cmp);
        tpot.sort_by(f64::total_cmp);
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let transfer: Vec<f64> =
            reqs.iter().filter_map(|r| Some(r.kv_transfer_end? - r.kv_transfer_start?)).collect();

        let completed = reqs.iter().filter(|r| r.completion_time.is_some()).count() as u64;
        let slo = self.c.slo;
        let good = reqs
            .iter()
            .filter(|r| r.completion_time.is_some())
            .filter(|r| r.ttft().is_some_and(|t| t <= slo.ttft) && r.tpot().is_none_or(|t| t <= slo.tpot))
            .count() as u64;
        let tokens: u64 = reqs.iter().map(Request::tokens_emitted).sum();

        let instances: Vec<InstanceSummary> = self
            .insts
            .iter()
            .enumerate()
            .map(|(id, s)| InstanceSummary {
                id,
                role: s.role,
                gpu: s.gpu.name.clone(),
                strategy: s.strategy,
                busy_fraction: if window > 0.0 { s.busy_time / window } else { 0.0 },
                busy_time: s.busy_time,
                peak_vram: s.peak_vram,
                vram_capacity: s.gpu.vram_capacity,
                max_running: s.max_running,
            })
            .collect();

        let metrics = SimMetrics {
            arrived: reqs.len() as u64,
            completed,
            unfinished: reqs.len() as u64 - completed,
            window,
            ttft_mean: mean(&ttft),
            ttft_p50: percentile(&ttft, 50.0),
            ttft_p99: percentile(&ttft, 99.0),
            tpot_mean: mean(&tpot),
            tpot_p99: percentile(&tpot, 99.0),
            throughput: per_s(tokens as f64),
            completed_rate: per_s(completed as f64),
            goodput: per_s(good as f64),
            slo_attainment: if completed > 0 { good as f64 / completed as f64 } else { 0.0 },
            kv_transfer_time_mean: mean(&transfer),
            tokens_emitted: tokens,
            busy_fraction: instances.iter().map(|s| s.busy_fraction).collect(),
        };
        SimReport { metrics, instances, requests: reqs, trace: self.trace }
    }
}

fn check_arrivals(arrivals: &[Request]) -> Result<(), SimError> {
    for (i, r) in arrivals.iter().enumerate() {
        if r.id != i {
            return Err(SimError::Config(format!("request ids must be 0..n in order (found {} at {i})", r.id)));
        }
        if !(r.arrival_time.is_finite() && r.arrival_time >= 0.0) {
            return Err(SimError::Config(format!("request {i} has invalid arrival time {}", r.arrival_time)));
        }
        if r.input_len == 0 || r.output_len == 0 {
            return Err(SimError::Config(format!("request {i} has an empty prompt or output")));
        }
        if r.first_token_time.is_some() || !r.token_times.is_empty() {
            return Err(SimError::Config(format!("request {i} was already served")));
        }
    }
    Ok(())
}

/// Runs the event loop on either kind of cluster.
pub fn run(cluster: &ClusterState, arrivals: Vec<Request>) -> Result<SimReport, SimError> {
    cluster.validate()?;
    check_arrivals(&arrivals)?;
    Engine::new(cluster, arrivals).run()
}

/// [`run`] restricted to colocated clusters.
pub fn run_colocated(cluster: &ClusterState, arrivals: Vec<Request>) -> Result<SimReport, SimError> {
    if cluster.mode != SimMode::Colocated {
        return Err(SimError::WrongMode("run_colocated", SimMode::Colocated));
    }
    run(cluster, arrivals)
}

/// Checks a finished run against the simulator invariants and returns a
/// description of every violation.
pub fn audit(cluster: &ClusterState, report: &SimReport) -> Vec<String> {
    let mut v = Vec::new();
    let mut completed_tokens = 0;
    for r in &report.requests {
        let id = r.id;
        if r.tokens_emitted() > r.output_len {
            v.push(format!("request {id}: {} tokens emitted for output_len {}", r.tokens_emitted(), r.output_len));
        }
        if r.completion_time.is_some() {
            completed_tokens += r.tokens_emitted();
            if r.tokens_emitted() != r.output_len {
                v.push(format!("request {id}: completed with {} of {} tokens", r.tokens_emitted(), r.output_len));
            }
        }
        let mut chain = vec![Some(r.arrival_time), r.prefill_start, r.first_token_time];
        if cluster.mode == SimMode::Disaggregated && r.output_len > 1 {
            chain.extend([r.kv_transfer_start, r.kv_transfer_end]);
        }
        let present: Vec<f64> = chain.into_iter().flatten().collect();
        if present.windows(2).any(|w| w[1] < w[0]) {
            v.push(format!("request {id}: lifecycle timestamps out of order"));
        }
        if r.kv_transfer_start.is_some_and(|s| r.first_token_time.is_none_or(|p| s < p)) {
            v.push(format!("request {id}: KV transfer started before prefill finished"));
        }
        if let (Some(end), Some(second)) = (r.kv_transfer_end, r.token_times.get(1)) {
            if *second < end {
                v.push(format!("request {id}: decode token before KV transfer finished"));
            }
        }
        if r.token_times.windows(2).any(|w| w[1] < w[0]) {
            v.push(format!("request {id}: token times not monotone"));
        }
        if r.completion_time.is_some_and(|c| r.token_times.last() != Some(&c)) {
            v.push(format!("request {id}: completion differs from last token time"));
        }
    }
    let expected: u64 =
        report.requests.iter().filter(|r| r.completion_time.is_some()).map(|r| r.output_len).sum();
    if completed_tokens != expected {
        v.push(format!("token conservation: {completed_tokens} emitted by completed requests, {expected} expected"));
    }
    if report.metrics.completed + report.metrics.unfinished != report.metrics.arrived {
        v.push("request conservation: completed + unfinished != arrived".into());
    }
    for s in &report.instances {
        if s.peak_vram > s.vram_capacity {
            v.push(format!("instance {}: peak VRAM {} above capacity {}", s.id, s.peak_vram, s.vram_capacity));
        }
        if s.role == Role::Decode {
            let spec = &cluster.instances[s.id];
            let max_ctx = report.requests.iter().map(|r| r.input_len + r.output_len).max().unwrap_or(0);
            if let Ok(limit) = cluster.cost.max_decode_batch(&spec.gpu, &cluster.model, &spec.strategy, max_ctx) {
                if s.max_running > limit {
                    v.push(format!("instance {}: batch {} above max decode batch {limit}", s.id, s.max_running));
                }
            }
        }
    }
    let m = &report.metrics;
    if m.ttft_p50 > m.ttft_p99 {
        v.push("ttft p50 above p99".into());
    }
    if m.goodput > m.completed_rate {
        v.push("goodput above completed rate".into());
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: SimMetrics,
    /// Relative change against the first row, `(x - base) / base`.
    pub throughput_delta: f64,
    pub goodput_delta: f64,
    pub ttft_mean_delta: f64,
    pub tpot_mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn relative_delta(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        if x == 0.0 { 0.0 } else { f64::INFINITY.copysign(x) }
    } else {
        (x - base) / base
    }
}

/// Simulates each labeled cluster on the same arrivals; the first entry is
/// the baseline.
pub fn compare(configs: &[(String, ClusterState)], arrivals: &[Request]) -> Result<ComparisonReport, SimError> {
    let mut runs = Vec::with_capacity(configs.len());
    for (label, cluster) in configs {
        runs.push((label.clone(), run(cluster, arrivals.to_vec())?.metrics));
    }
    Ok(compare_metrics(runs))
}

pub fn compare_metrics(runs: Vec<(String, SimMetrics)>) -> ComparisonReport {
    let Some((baseline, base)) = runs.first().cloned() else {
        return ComparisonReport { baseline: String::new(), rows: Vec::new() };
    };
    let rows = runs
        .into_iter()
        .map(|(label, m)| ComparisonRow {
            throughput_delta: relative_delta(m.throughput, base.throughput),
            goodput_delta: relative_delta(m.goodput, base.goodput),
            ttft_mean_delta: relative_delta(m.ttft_mean, base.ttft_mean),
            tpot_mean_delta: relative_delta(m.tpot_mean, base.tpot_mean),
            label,
            metrics: m,
        })
        .collect();
    ComparisonReport { baseline, rows }
}

impl ComparisonReport {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>12} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9}\n",
            "config", "tok/s", "goodput", "ttft_mean", "tpot_mean", "completed", "d_tput", "d_good", "d_ttft", "d_tpot"
        );
        for r in &self.rows {
            let pct = |d: f64| format!("{:+.1}%", d * 100.0);
            out.push_str(&format!(
                "{:<28} {:>12.2} {:>10.3} {:>10.4} {:>10.4} {:>10} {:>9} {:>9} {:>9} {:>9}\n",
                r.label,
                r.metrics.throughput,
                r.metrics.goodput,
                r.metrics.ttft_mean,
                r.metrics.tpot_mean,
                r.metrics.completed,
                pct(r.throughput_delta),
                pct(r.goodput_delta),
                pct(r.ttft_mean_delta),
                pct(r.tpot_mean_delta)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests;
