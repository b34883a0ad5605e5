use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use hetpd_core::planner::{explain, ExplainReport, Planned};
use hetpd_core::sim::{audit, build_cluster, compare_metrics, generate_arrivals, run, Slo, SweepPoint};
use hetpd_core::{load_catalog, Catalog, CostModel, DeploymentPlan, PlanError, Planner, Scenario, SearchSpace, SimMode};

use crate::output::{self, CompareRow, MetricsRow};
use crate::{Cli, Command, Failure, PlanArgs, SimulateArgs, SweepArgs, ValidateArgs, EXIT_INFEASIBLE, EXIT_INPUT};

type Outcome = Result<u8, Failure>;

pub fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Plan(a) => plan(cli, a, true),
        Command::Explain(a) => plan(cli, a, false),
        Command::Simulate(a) => simulate(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Compare(a) => compare(cli, a),
        Command::Validate(a) => validate(a),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::input)
}

fn read_catalog(path: &Path) -> Result<Catalog, Failure> {
    load_catalog(&read(path)?).with_context(|| format!("catalog {}", path.display())).map_err(Failure::input)
}

fn read_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::parse(&read(path)?).with_context(|| format!("scenario {}", path.display())).map_err(Failure::input)
}

fn read_plan(path: &Path) -> Result<DeploymentPlan, Failure> {
    serde_json::from_str(&read(path)?).with_context(|| format!("plan {}", path.display())).map_err(Failure::input)
}

/// Catalog for a scenario: the override if given, else the scenario's own
/// path resolved against the scenario file's directory.
fn scenario_catalog(scenario: &Scenario, scenario_path: &Path, over: Option<&Path>) -> Result<Catalog, Failure> {
    let path = match (over, &scenario.catalog) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(rel)) => scenario_path.parent().unwrap_or(Path::new(".")).join(rel),
        (None, None) => {
            return Err(Failure::input(anyhow!(
                "scenario `{}` names no catalog; pass --catalog",
                scenario.name
            )))
        }
    };
    read_catalog(&path)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::input)?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display())).map_err(Failure::input)?;
    Ok(path)
}

fn render_explain(report: &ExplainReport, cli: &Cli) -> anyhow::Result<String> {
    match cli.format {
        crate::Format::Table => Ok(report.render_table()),
        f => output::render(&output::explain_rows(report), f, |_| String::new()),
    }
}

fn plan(cli: &Cli, a: &PlanArgs, write_plan: bool) -> Outcome {
    let catalog = read_catalog(&a.catalog)?;
    let model = catalog.model(&a.model).ok_or_else(|| Failure::input(anyhow!("unknown model `{}`", a.model)))?;
    let workload =
        catalog.workload(&a.workload).ok_or_else(|| Failure::input(anyhow!("unknown workload `{}`", a.workload)))?;
    let space = match &a.space {
        Some(p) => toml::from_str::<SearchSpace>(&read(p)?)
            .with_context(|| format!("search space {}", p.display()))
            .map_err(Failure::input)?,
        None => SearchSpace::default(),
    };
    let planner = Planner { cost: CostModel::default(), space, gpu_budget: a.gpu_budget };
    let outcome: Result<Planned, PlanError> = match (&a.prefill_gpu, &a.decode_gpu) {
        (Some(p), Some(d)) => {
            let gpu = |n: &str| catalog.gpu(n).ok_or_else(|| Failure::input(anyhow!("unknown gpu `{n}`")));
            planner.plan(gpu(p)?, gpu(d)?, model, workload)
        }
        _ => planner.assign_roles(&catalog.gpus, model, workload),
    };
    let report = explain(&outcome);
    let rendered = render_explain(&report, cli).map_err(Failure::internal)?;
    print!("{rendered}");
    write_artifact(&cli.output_dir, &format!("explain.{}", cli.format.extension()), &rendered)?;
    match outcome {
        Ok(planned) => {
            planned
                .plan
                .validate(&planner.cost, model, workload)
                .context("planner produced an unsound plan")
                .map_err(Failure::internal)?;
            if write_plan {
                let json = serde_json::to_string_pretty(&planned.plan).map_err(Failure::internal)?;
                write_artifact(&cli.output_dir, "plan.json", &(json + "\n"))?;
            }
            Ok(0)
        }
        Err(PlanError::Infeasible { .. } | PlanError::QpsUnreachable { .. } | PlanError::NoCompatibleStrategy(_)) => {
            eprintln!("infeasible: {}", report.error.unwrap_or_default());
            Ok(EXIT_INFEASIBLE)
        }
        Err(e) => Err(Failure::input(e)),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    let mut scenario = read_scenario(&a.scenario)?;
    let catalog = scenario_catalog(&scenario, &a.scenario, a.catalog.as_deref())?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if a.trace {
        scenario.sim.record_trace = true;
    }
    let (point, cluster) = match &a.plan {
        Some(p) => {
            let plan = read_plan(p)?;
            let model = catalog
                .model(&scenario.model)
                .ok_or_else(|| Failure::input(anyhow!("unknown model `{}`", scenario.model)))?;
            let base = scenario.base_point(&catalog).map_err(Failure::input)?;
            let workload = scenario.workload_at(&catalog, &base).map_err(Failure::input)?;
            let cluster = build_cluster(
                &plan,
                model,
                scenario.link,
                CostModel::new(scenario.cost),
                scenario.sim.clone(),
                Slo { ttft: workload.ttft_slo, tpot: workload.tpot_slo },
                scenario.mode,
            )
            .map_err(Failure::input)?;
            (SweepPoint { p_count: plan.p_count, d_count: plan.d_count, ..base }, cluster)
        }
        None => {
            let point = scenario.base_point(&catalog).map_err(Failure::input)?;
            (point, scenario.cluster_at(&catalog, &point).map_err(Failure::input)?)
        }
    };
    let workload = scenario.workload_at(&catalog, &point).map_err(Failure::input)?;
    let arrivals = generate_arrivals(&workload, scenario.duration, scenario.seed).map_err(Failure::input)?;
    let report = run(&cluster, arrivals).map_err(Failure::internal)?;
    let breaches = audit(&cluster, &report);
    if !breaches.is_empty() {
        return Err(Failure::internal(anyhow!("simulation invariants violated:\n  {}", breaches.join("\n  "))));
    }
    let rows = [MetricsRow::new(&scenario.name, &point, scenario.seed, &report.metrics)];
    let rendered = output::render(&rows, cli.format, output::metrics_table).map_err(Failure::internal)?;
    print!("{rendered}");
    write_artifact(&cli.output_dir, &format!("metrics.{}", cli.format.extension()), &rendered)?;
    if cluster.config.record_trace {
        let trace = output::to_jsonl(&report.trace).map_err(Failure::internal)?;
        write_artifact(&cli.output_dir, "trace.jsonl", &trace)?;
    }
    Ok(0)
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(jobs).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

fn jobs(a: &SweepArgs) -> usize {
    a.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Outcome {
    let scenario = read_scenario(&a.scenario)?;
    let catalog = scenario_catalog(&scenario, &a.scenario, a.catalog.as_deref())?;
    let points = scenario.points(&catalog).map_err(Failure::input)?;
    let results = par_map(&points, jobs(a), |p| {
        let cluster = scenario.cluster_at(&catalog, p)?;
        let report = scenario.run_point(&catalog, p)?;
        Ok::<_, hetpd_core::sim::ScenarioError>((report.metrics.clone(), audit(&cluster, &report)))
    });
    let mut rows = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(results) {
        let (metrics, breaches) = r.with_context(|| format!("sweep point {p:?}")).map_err(Failure::input)?;
        if !breaches.is_empty() {
            return Err(Failure::internal(anyhow!("invariants violated at {p:?}:\n  {}", breaches.join("\n  "))));
        }
        rows.push(MetricsRow::new(&scenario.name, p, scenario.seed, &metrics));
    }
    let rendered = output::render(&rows, cli.format, output::metrics_table).map_err(Failure::internal)?;
    print!("{rendered}");
    write_artifact(&cli.output_dir, &format!("sweep.{}", cli.format.extension()), &rendered)?;
    Ok(0)
}

fn compare(cli: &Cli, a: &SweepArgs) -> Outcome {
    let scenario = read_scenario(&a.scenario)?;
    let catalog = scenario_catalog(&scenario, &a.scenario, a.catalog.as_deref())?;
    let mut points = scenario.points(&catalog).map_err(Failure::input)?;
    points.retain(|p| p.mode == SimMode::Disaggregated);
    points.dedup();
    if points.is_empty() {
        let base = scenario.base_point(&catalog).map_err(Failure::input)?;
        points.push(SweepPoint { mode: SimMode::Disaggregated, ..base });
    }
    let results = par_map(&points, jobs(a), |p| {
        let colo = SweepPoint { mode: SimMode::Colocated, ..*p };
        let base = scenario.run_point(&catalog, &colo)?;
        let disagg = scenario.run_point(&catalog, p)?;
        let tag = format!("{}P{}D in{} out{} qps{}", p.p_count, p.d_count, p.input_len, p.output_len, p.qps);
        Ok::<_, hetpd_core::sim::ScenarioError>(compare_metrics(vec![
            (format!("colocated {tag}"), base.metrics),
            (format!("disaggregated {tag}"), disagg.metrics),
        ]))
    });
    let mut rows = Vec::new();
    for (p, r) in points.iter().zip(results) {
        let report = r.with_context(|| format!("compare point {p:?}")).map_err(Failure::input)?;
        for (row, mode) in report.rows.iter().zip([SimMode::Colocated, SimMode::Disaggregated]) {
            rows.push(CompareRow::new(&SweepPoint { mode, ..*p }, row));
        }
    }
    let rendered = output::render(&rows, cli.format, output::compare_table).map_err(Failure::internal)?;
    print!("{rendered}");
    write_artifact(&cli.output_dir, &format!("compare.{}", cli.format.extension()), &rendered)?;
    Ok(0)
}

fn validate(a: &ValidateArgs) -> Outcome {
    let mut problems = Vec::new();
    let mut checked = 0;
    let catalog = match &a.catalog {
        Some(p) => {
            checked += 1;
            match read_catalog(p) {
                Ok(c) => Some(c),
                Err(f) => {
                    problems.push(format!("{:#}", f.error));
                    None
                }
            }
        }
        None => None,
    };
    for path in &a.scenario {
        checked += 1;
        let result = read_scenario(path).and_then(|s| {
            let cat = match &catalog {
                Some(c) => c.clone(),
                None => scenario_catalog(&s, path, None)?,
            };
            for p in s.points(&cat).map_err(Failure::input)? {
                s.cluster_at(&cat, &p)
                    .with_context(|| format!("scenario {} at {p:?}", path.display()))
                    .map_err(Failure::input)?;
            }
            Ok(())
        });
        if let Err(f) = result {
            problems.push(format!("{:#}", f.error));
        }
    }
    for path in &a.plan {
        checked += 1;
        let result = read_plan(path).and_then(|plan| {
            let cat = catalog.as_ref().ok_or_else(|| Failure::input(anyhow!("--plan needs --catalog")))?;
            let model = cat.model(&plan.model).ok_or_else(|| Failure::input(anyhow!("unknown model `{}`", plan.model)))?;
            let workload = cat
                .workload(&plan.workload)
                .ok_or_else(|| Failure::input(anyhow!("unknown workload `{}`", plan.workload)))?;
            plan.validate(&CostModel::default(), model, workload)
                .with_context(|| format!("plan {}", path.display()))
                .map_err(Failure::input)
        });
        if let Err(f) = result {
            problems.push(format!("{:#}", f.error));
        }
    }
    if checked == 0 {
        return Err(Failure::input(anyhow!("nothing to validate; pass --catalog, --scenario or --plan")));
    }
    for p in &problems {
        eprintln!("invalid: {p}");
    }
    if problems.is_empty() {
        println!("ok: {checked} input(s) valid");
        Ok(0)
    } else {
        Ok(EXIT_INPUT)
    }
}
