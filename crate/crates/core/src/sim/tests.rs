use super::*;
use crate::catalog::fixtures::*;
use crate::catalog::Catalog;
use crate::planner::{Planner, SearchSpace};

fn slo() -> Slo {
    Slo { ttft: 1.0, tpot: 0.1 }
}

fn inst(role: Role, gpu: GpuSpec) -> InstanceSpec {
    InstanceSpec { role, gpu, strategy: ParallelStrategy::SINGLE }
}

fn disagg(p: usize, d: usize, config: SimConfig) -> ClusterState {
    let mut v: Vec<_> = (0..p).map(|_| inst(Role::Prefill, gpu_b())).collect();
    v.extend((0..d).map(|_| inst(Role::Decode, gpu_a())));
    ClusterState::new(SimMode::Disaggregated, llama2_7b(), CostModel::default(), TransferLink::default(), config, slo(), v)
        .unwrap()
}

fn colocated(gpus: Vec<GpuSpec>, config: SimConfig) -> ClusterState {
    let v = gpus.into_iter().map(|g| inst(Role::Colocated, g)).collect();
    ClusterState::new(SimMode::Colocated, llama2_7b(), CostModel::default(), TransferLink::default(), config, slo(), v)
        .unwrap()
}

fn traced() -> SimConfig {
    SimConfig { record_trace: true, ..SimConfig::default() }
}

#[test]
fn link_hops_and_validation() {
    let link = TransferLink { bandwidth: 100.0, discount: 0.5, per_request_overhead: 1.0, staging_bandwidth: 200.0 };
    assert_eq!(link.hop_times(400), [3.0, 9.0, 3.0]);
    assert!(TransferLink { bandwidth: 0.0, ..link }.validate().is_err());
    assert!(TransferLink { per_request_overhead: -1.0, ..link }.validate().is_err());
    assert!(TransferLink { discount: 1.5, ..link }.validate().is_err());
    link.validate().unwrap();
}

fn plan_with(p: u64, d: u64) -> DeploymentPlan {
    let planner = Planner::new(CostModel::default(), SearchSpace::default());
    let mut plan = planner.plan(&gpu_b(), &gpu_a(), &llama2_7b(), &workload(256, 256, 2.0)).unwrap().plan;
    plan.p_count = p;
    plan.d_count = d;
    plan
}

#[test]
fn build_cluster_instance_counts() {
    let b = |p, d, mode| {
        build_cluster(&plan_with(p, d), &llama2_7b(), TransferLink::default(), CostModel::default(), SimConfig::default(), slo(), mode)
            .unwrap()
    };
    assert_eq!(b(1, 1, SimMode::Disaggregated).instances.len(), 2);
    let c = b(3, 1, SimMode::Disaggregated);
    assert_eq!(c.instances.len(), 4);
    assert_eq!(c.instances.iter().filter(|i| i.role == Role::Prefill).count(), 3);
    let col = b(1, 0, SimMode::Colocated);
    assert_eq!(col.instances.len(), 1);
    assert_eq!(col.instances[0].role, Role::Colocated);
    assert!(matches!(
        build_cluster(&plan_with(1, 0), &llama2_7b(), TransferLink::default(), CostModel::default(), SimConfig::default(), slo(), SimMode::Disaggregated),
        Err(SimError::Config(_))
    ));
}

#[test]
fn cluster_rejects_oversized_weights() {
    let small = GpuSpec { vram_capacity: 1_000_000_000, ..gpu_a() };
    let err = ClusterState::new(
        SimMode::Colocated,
        llama2_7b(),
        CostModel::default(),
        TransferLink::default(),
        SimConfig::default(),
        slo(),
        vec![inst(Role::Colocated, small)],
    )
    .unwrap_err();
    assert!(matches!(err, SimError::Config(m) if m.contains("weights")));
}

#[test]
fn deterministic_arrivals() {
    let reqs = generate_arrivals(&workload(256, 256, 2.0), 5.0, 1).unwrap();
    assert_eq!(reqs.len(), 10);
    for (i, r) in reqs.iter().enumerate() {
        assert_eq!(r.arrival_time, i as f64 * 0.5);
        assert_eq!((r.input_len, r.output_len), (256, 256));
    }
    assert!(generate_arrivals(&workload(1, 1, 1.0), 0.0, 1).is_err());
}

#[test]
fn poisson_arrivals_are_seeded_and_have_the_right_mean() {
    let w = WorkloadSpec { arrival_process: ArrivalProcess::Poisson, ..workload(8, 8, 4.0) };
    let a = generate_arrivals(&w, 25_000.0, 42).unwrap();
    assert_eq!(a, generate_arrivals(&w, 25_000.0, 42).unwrap());
    assert_ne!(a, generate_arrivals(&w, 25_000.0, 43).unwrap());
    assert!(a.len() > 99_000, "{}", a.len());
    let gaps: Vec<f64> = std::iter::once(a[0].arrival_time).chain(a.windows(2).map(|p| p[1].arrival_time - p[0].arrival_time)).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - 0.25).abs() / 0.25 < 0.05, "mean gap {mean}");
}

#[test]
fn single_request_ttft_is_closed_form() {
    let overhead = 0.003;
    let c = disagg(1, 1, SimConfig { dispatch_overhead: overhead, ..traced() });
    let report = run(&c, vec![Request::new(0, 0.0, 512, 4)]).unwrap();
    let lp = CostModel::default().prefill_cost(&gpu_b(), &llama2_7b(), &ParallelStrategy::SINGLE, 1, 512).unwrap().latency;
    assert_eq!(report.requests[0].ttft(), Some(overhead + lp));
    assert_eq!(report.metrics.ttft_mean, overhead + lp);
    assert_eq!(report.metrics.completed, 1);

    // decode tokens follow the staged transfer and the per-step cost
    let r = &report.requests[0];
    let hops = TransferLink::default().hop_times(512 * 524_288);
    let loaded = overhead + lp + hops[0] + hops[1] + hops[2];
    assert!((r.kv_transfer_end.unwrap() - loaded).abs() < 1e-12);
    let mut t = r.kv_transfer_end.unwrap();
    for (k, &tok) in r.token_times[1..].iter().enumerate() {
        t += CostModel::default()
            .decode_step_cost(&gpu_a(), &llama2_7b(), &ParallelStrategy::SINGLE, 1, 512 + 1 + k as u64)
            .unwrap()
            .latency;
        assert!((tok - t).abs() < 1e-12);
    }
    let kinds: Vec<TraceKind> = report.trace.iter().map(|e| e.event).collect();
    assert_eq!(
        kinds,
        [
            TraceKind::Arrival,
            TraceKind::Queued,
            TraceKind::PrefillStart,
            TraceKind::FirstToken,
            TraceKind::TransferStart,
            TraceKind::Staged,
            TraceKind::Admitted,
            TraceKind::KvLoaded,
            TraceKind::Completed
        ]
    );
}

#[test]
fn ttft_grows_with_input_len() {
    let c = disagg(1, 1, SimConfig::default());
    let mut last = 0.0;
    for input in [128, 256, 512, 1024] {
        let reqs = generate_arrivals(&workload(input, 64, 2.0), 10.0, 0).unwrap();
        let m = run(&c, reqs).unwrap().metrics;
        assert!(m.ttft_mean > last);
        last = m.ttft_mean;
    }
}

#[test]
fn runs_are_bitwise_deterministic() {
    let c = disagg(2, 2, traced());
    let w = WorkloadSpec { arrival_process: ArrivalProcess::Poisson, ..workload(512, 128, 6.0) };
    let a = run(&c, generate_arrivals(&w, 20.0, 9).unwrap()).unwrap();
    let b = run(&c, generate_arrivals(&w, 20.0, 9).unwrap()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(audit(&c, &a).is_empty(), "{:?}", audit(&c, &a));
}

#[test]
fn colocated_without_overlap_matches_disaggregated_minus_transfer() {
    let config = SimConfig::default();
    let d = ClusterState::new(
        SimMode::Disaggregated,
        llama2_7b(),
        CostModel::default(),
        TransferLink::default(),
        config.clone(),
        slo(),
        vec![inst(Role::Prefill, gpu_a()), inst(Role::Decode, gpu_a())],
    )
    .unwrap();
    let c = colocated(vec![gpu_a()], config);
    let reqs = vec![Request::new(0, 0.0, 256, 32), Request::new(1, 100.0, 256, 32)];
    let rd = run(&d, reqs.clone()).unwrap();
    let rc = run_colocated(&c, reqs).unwrap();
    for (a, b) in rd.requests.iter().zip(&rc.requests) {
        let transfer = a.kv_transfer_end.unwrap() - a.kv_transfer_start.unwrap();
        assert_eq!(a.first_token_time, b.first_token_time);
        for (x, y) in a.token_times[1..].iter().zip(&b.token_times[1..]) {
            assert!((x - transfer - y).abs() < 1e-9, "{x} {y}");
        }
    }
    assert_eq!(rc.metrics.kv_transfer_time_mean, 0.0);
    assert!(matches!(run_colocated(&d, Vec::new()), Err(SimError::WrongMode(..))));
}

#[test]
fn prefill_priority_stretches_decode_gaps() {
    let reqs = generate_arrivals(&workload(1024, 256, 4.0), 10.0, 0).unwrap();
    let d = run(&disagg(1, 1, SimConfig::default()), reqs.clone()).unwrap();
    let c = run(&colocated(vec![gpu_b(), gpu_a()], SimConfig::default()), reqs).unwrap();
    assert!(c.metrics.tpot_mean > d.metrics.tpot_mean, "{} vs {}", c.metrics.tpot_mean, d.metrics.tpot_mean);
}

#[test]
fn vram_admission_queues_instead_of_dropping() {
    let w = workload(1024, 64, 50.0);
    let weights = CostModel::default().weight_bytes_per_gpu(&llama2_7b(), &ParallelStrategy::SINGLE);
    // room for exactly two full-context sequences
    let two = CostModel::default().decode_vram(&llama2_7b(), &ParallelStrategy::SINGLE, 2, 1088, 16).total_bytes;
    let tight = GpuSpec { vram_capacity: two, ..gpu_a() };
    assert!(tight.vram_capacity > weights);
    let c = ClusterState::new(
        SimMode::Disaggregated,
        llama2_7b(),
        CostModel::default(),
        TransferLink::default(),
        SimConfig::default(),
        slo(),
        vec![inst(Role::Prefill, gpu_b()), inst(Role::Decode, tight)],
    )
    .unwrap();
    let report = run(&c, generate_arrivals(&w, 1.0, 0).unwrap()).unwrap();
    assert_eq!(report.metrics.completed, 50);
    assert_eq!(report.instances[1].max_running, 2);
    assert!(report.instances[1].peak_vram <= two);
    assert!(audit(&c, &report).is_empty(), "{:?}", audit(&c, &report));
}

#[test]
fn inadmissible_requests_stay_queued() {
    let weights = CostModel::default().weight_bytes_per_gpu(&llama2_7b(), &ParallelStrategy::SINGLE);
    let tiny = GpuSpec { vram_capacity: weights + 1, ..gpu_a() };
    let c = ClusterState::new(
        SimMode::Disaggregated,
        llama2_7b(),
        CostModel::default(),
        TransferLink::default(),
        SimConfig::default(),
        slo(),
        vec![inst(Role::Prefill, gpu_b()), inst(Role::Decode, tiny)],
    )
    .unwrap();
    let m = run(&c, generate_arrivals(&workload(128, 8, 2.0), 2.0, 0).unwrap()).unwrap().metrics;
    assert_eq!((m.arrived, m.completed, m.unfinished), (4, 0, 4));
}

#[test]
fn horizon_and_time_limit() {
    let reqs = generate_arrivals(&workload(256, 256, 2.0), 10.0, 0).unwrap();
    let c = disagg(1, 1, SimConfig { horizon: Some(3.0), ..SimConfig::default() });
    let m = run(&c, reqs.clone()).unwrap().metrics;
    assert!(m.unfinished > 0);
    assert_eq!(m.window, 3.0);
    assert_eq!(m.completed + m.unfinished, m.arrived);
    let c = disagg(1, 1, SimConfig { max_sim_time: 1.0, ..SimConfig::default() });
    assert!(matches!(run(&c, reqs), Err(SimError::TimeOverflow { .. })));
}

#[test]
fn single_output_token_skips_decode() {
    let c = disagg(1, 1, SimConfig::default());
    let r = run(&c, vec![Request::new(0, 0.0, 64, 1)]).unwrap();
    assert_eq!(r.requests[0].completion_time, r.requests[0].first_token_time);
    assert_eq!(r.requests[0].kv_transfer_start, None);
    assert_eq!(r.metrics.tokens_emitted, 1);
}

#[test]
fn prefill_batching_groups_queued_requests() {
    let reqs: Vec<_> = (0..4).map(|i| Request::new(i, 0.0, 256, 2)).collect();
    let c = disagg(1, 1, SimConfig { prefill_batch: 4, ..SimConfig::default() });
    let r = run(&c, reqs.clone()).unwrap();
    // the first arrival starts alone, the other three share the next step
    let starts: Vec<f64> = r.requests.iter().map(|q| q.prefill_start.unwrap()).collect();
    assert_eq!(starts[0], 0.0);
    assert!(starts[1] > 0.0 && starts[1] == starts[2] && starts[2] == starts[3]);
    let mut zero = disagg(1, 1, SimConfig::default());
    zero.config.prefill_batch = 0;
    assert!(matches!(run(&zero, reqs), Err(SimError::Config(_))));
}

#[test]
fn malformed_arrivals_are_rejected() {
    let c = disagg(1, 1, SimConfig::default());
    assert!(run(&c, vec![Request::new(1, 0.0, 8, 8)]).is_err());
    assert!(run(&c, vec![Request::new(0, -1.0, 8, 8)]).is_err());
    assert!(run(&c, vec![Request::new(0, 0.0, 0, 8)]).is_err());
}

#[test]
fn compare_self_and_recomputed_deltas() {
    let c = disagg(1, 1, SimConfig::default());
    let reqs = generate_arrivals(&workload(512, 128, 3.0), 10.0, 0).unwrap();
    let report = compare(&[("a".into(), c.clone()), ("b".into(), c)], &reqs).unwrap();
    for r in &report.rows {
        assert_eq!((r.throughput_delta, r.goodput_delta, r.ttft_mean_delta, r.tpot_mean_delta), (0.0, 0.0, 0.0, 0.0));
    }
    let col = colocated(vec![gpu_b(), gpu_a()], SimConfig::default());
    let report = compare(&[("d".into(), disagg(1, 1, SimConfig::default())), ("c".into(), col)], &reqs).unwrap();
    let (base, other) = (&report.rows[0].metrics, &report.rows[1]);
    assert_eq!(other.throughput_delta, (other.metrics.throughput - base.throughput) / base.throughput);
    assert_eq!(other.ttft_mean_delta, (other.metrics.ttft_mean - base.ttft_mean) / base.ttft_mean);
    assert_eq!(report.render_table().lines().count(), 3);
}

#[test]
fn percentile_nearest_rank() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 50.0), 50.0);
    assert_eq!(percentile(&v, 99.0), 99.0);
    assert_eq!(percentile(&v, 100.0), 100.0);
    assert_eq!(percentile(&[7.0], 1.0), 7.0);
    assert_eq!(percentile(&[], 50.0), 0.0);
}

fn toy_catalog() -> Catalog {
    Catalog { gpus: vec![gpu_a(), gpu_b()], models: vec![llama2_7b()], workloads: vec![WorkloadSpec { name: "w".into(), ..workload(256, 256, 2.0) }] }
}

const SCENARIO: &str = r#"
name = "toy"
model = "llama2-7b"
workload = "w"
seed = 3
duration = 5.0

[cluster]
prefill = { gpu = "B", count = 1 }
decode = { gpu = "A", count = 1, strategy = { tp = 1 } }

[sweep]
pd_ratio = [[1, 1], [2, 1], [3, 1]]
qps = [2.0, 4.0]
"#;

#[test]
fn scenario_points_and_round_trip() {
    let s = Scenario::parse(SCENARIO).unwrap();
    let cat = toy_catalog();
    let points = s.points(&cat).unwrap();
    assert_eq!(points.len(), 6);
    assert_eq!((points[0].p_count, points[0].qps), (1, 2.0));
    assert_eq!((points[1].p_count, points[1].qps), (1, 4.0));
    assert_eq!((points[5].p_count, points[5].qps), (3, 4.0));
    assert_eq!(Scenario::parse(&s.to_toml_string()).unwrap(), s);
    let cluster = s.cluster_at(&cat, &points[4]).unwrap();
    assert_eq!(cluster.instances.len(), 4);
    let report = s.run_point(&cat, &points[0]).unwrap();
    assert_eq!(report.metrics.arrived, 10);
}

#[test]
fn scenario_errors_name_the_problem() {
    let bad = SCENARIO.replace("duration = 5.0", "duration = \"x\"");
    let err = Scenario::parse(&bad).unwrap_err();
    assert!(err.to_string().contains("duration"), "{err}");
    let s = Scenario::parse(&SCENARIO.replace("\"B\"", "\"Z\"")).unwrap();
    let cat = toy_catalog();
    let p = s.base_point(&cat).unwrap();
    assert_eq!(s.cluster_at(&cat, &p).unwrap_err(), ScenarioError::Unknown { kind: "gpu", name: "Z".into() });
}
