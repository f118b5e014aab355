use std::collections::BTreeMap;

use crate::dist::ToyTask;
use crate::error::{Error, Result};
use crate::meanflow::MeanFlowModel;
use crate::metrics::{
    distance_error_histogram, flops_estimate, loss_heatmap, svg, BudgetLedger, EvalReport, PassCounts, Phase,
    FLOW_STEP_COST, MEANFLOW_STEP_COST,
};
use crate::model::NfeCounter;
use crate::pipeline::config::{Method, RunConfig};
use crate::pipeline::manifest::{OutputDir, RunManifest};
use crate::pipeline::stages::{
    evaluate, run_stage1, run_stage2, step_forward_equivalents, train_flow_stage, train_meanflow_stage, CurvePoint,
    CurveProbe, Generator, Reflow, TrainedFlow,
};
use crate::rectflow::{CouplingSource, FlowModel, FlowTrainConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::trace::Snapshots;

/// Report name of the Re-MeanFlow run on untruncated couplings.
pub const ABLATION_NAME: &str = "re_meanflow_k0";

/// Points drawn per method in the sample scatter figures.
const SCATTER_POINTS: usize = 2000;

pub struct ComparisonOutcome {
    pub reports: Vec<EvalReport>,
    pub manifest: RunManifest,
}

impl ComparisonOutcome {
    /// Median over seeds of a metric for `method`, ignoring failed runs.
    pub fn median(&self, method: &str, metric: impl Fn(&crate::metrics::EvalMetrics) -> f64) -> Option<f64> {
        let mut v: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.metrics.as_ref().map(&metric))
            .collect();
        median(&mut v)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

struct MethodRun {
    name: String,
    result: Result<(crate::metrics::EvalMetrics, Tensor)>,
    ledger: BudgetLedger,
    curve: Vec<CurvePoint>,
}

/// Trains and evaluates every configured method for every seed, writing
/// checkpoints, couplings, reports, figures and the manifest under `cfg.out`.
/// A failing method is reported as failed; the others still run.
pub fn run_comparison(cfg: &RunConfig) -> Result<ComparisonOutcome> {
    cfg.validate()?;
    let out = OutputDir::create(&cfg.out)?;
    let hash = cfg.hash();
    let mut manifest = RunManifest::new("compare", &hash);
    let task = cfg.task.build()?;
    let mut reports = Vec::new();
    let mut summary = String::from(
        "method,seed,status,outlier_rate,energy_distance,mean_angular_error,straightness,lipschitz_estimate,train_steps,forward_equivalents,flops\n",
    );

    for seed in cfg.seeds() {
        let runs = run_seed(cfg, &task, seed, &out)?;
        let mut curve_csv = String::from("method,step,forward_equivalents,energy_distance\n");
        let mut curves = Vec::new();
        let mut scatter_sets: Vec<(String, Tensor)> = Vec::new();
        let mut rng = stream(seed, "scatter", 0);
        let (target, _) = task.sample_data(SCATTER_POINTS, &mut rng)?;
        scatter_sets.push(("target".into(), target));

        for run in runs {
            let fe = run.ledger.forward_equivalents(2.0);
            let flops = flops_estimate(&run.ledger, 2.0).total;
            let report = match run.result {
                Ok((metrics, samples)) => {
                    let n = SCATTER_POINTS.min(samples.rows());
                    let head = Tensor::new(vec![n, samples.cols()], samples.values()[..n * samples.cols()].to_vec())?;
                    scatter_sets.push((run.name.clone(), head));
                    EvalReport {
                        method: run.name.clone(),
                        seed,
                        config_hash: hash.clone(),
                        metrics: Some(metrics),
                        error: None,
                        budget: run.ledger,
                    }
                }
                Err(e) => EvalReport {
                    method: run.name.clone(),
                    seed,
                    config_hash: hash.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                    budget: run.ledger,
                },
            };
            summary += &match &report.metrics {
                Some(m) => format!(
                    "{},{seed},ok,{:?},{:?},{:?},{:?},{:?},{},{fe:?},{flops:?}\n",
                    report.method,
                    m.outlier_rate,
                    m.energy_distance,
                    m.mean_angular_error,
                    m.straightness,
                    m.lipschitz_estimate,
                    report.budget.train_steps()
                ),
                None => {
                    format!("{},{seed},failed,,,,,,{},{fe:?},{flops:?}\n", report.method, report.budget.train_steps())
                }
            };
            for p in &run.curve {
                curve_csv += &format!("{},{},{:?},{:?}\n", run.name, p.step, p.forward_equivalents, p.energy_distance);
            }
            if !run.curve.is_empty() {
                curves.push((
                    run.name.clone(),
                    run.curve.iter().map(|p| (p.forward_equivalents, p.energy_distance)).collect::<Vec<_>>(),
                ));
            }
            out.write("reports", &format!("{}_seed{seed}.txt", report.method), report.to_kv())?;
            manifest.budget.insert(format!("{}/seed{seed}", report.method), report.budget.clone());
            reports.push(report);
        }

        if cfg.compare.curve_every > 0 {
            out.write("reports", &format!("curve_seed{seed}.csv"), curve_csv)?;
            let series: Vec<(&str, Vec<(f64, f64)>)> = curves.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
            out.write(
                "figures",
                &format!("curve_seed{seed}.svg"),
                svg::lines(
                    &format!("energy distance vs. forward-equivalents, seed {seed}"),
                    "forward-equivalents",
                    "energy distance",
                    &series,
                ),
            )?;
        }
        let sets: Vec<(&str, &Tensor)> = scatter_sets.iter().map(|(n, t)| (n.as_str(), t)).collect();
        out.write(
            "figures",
            &format!("samples_seed{seed}.svg"),
            svg::scatter(&format!("one-step samples, seed {seed}"), &sets),
        )?;
    }

    out.write("reports", "summary.csv", summary)?;
    let mut outcome = ComparisonOutcome { reports, manifest: RunManifest::new("compare", &hash) };
    let mut medians = String::from("method,runs_ok,median_outlier_rate,median_energy_distance\n");
    let mut names: Vec<&str> = cfg.compare.methods.iter().map(|m| m.name()).collect();
    if cfg.compare.truncation_ablation {
        names.push(ABLATION_NAME);
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for name in names {
        let ok = outcome.reports.iter().filter(|r| r.method == name && r.is_ok()).count();
        medians += &format!(
            "{name},{ok},{},{}\n",
            fmt(outcome.median(name, |m| m.outlier_rate)),
            fmt(outcome.median(name, |m| m.energy_distance))
        );
    }
    out.write("reports", "medians.csv", medians)?;
    // `out` and `workers` are left to their defaults so the copy is identical
    // for every output location and worker count.
    let saved: String = cfg
        .to_toml()?
        .lines()
        .filter(|l| !l.starts_with("out = ") && !l.starts_with("workers = "))
        .map(|l| format!("{l}\n"))
        .collect();
    out.write("reports", "config.toml", saved)?;
    manifest.finish(&out.root)?;
    outcome.manifest = manifest;
    Ok(outcome)
}

fn failed(name: &str, err: Error, ledger: BudgetLedger) -> MethodRun {
    MethodRun { name: name.to_string(), result: Err(err), ledger, curve: Vec::new() }
}

fn run_seed(cfg: &RunConfig, task: &ToyTask, seed: u64, out: &OutputDir) -> Result<Vec<MethodRun>> {
    let methods = &cfg.compare.methods;
    let needs_reflow = methods.contains(&Method::ReMeanflow)
        || methods.contains(&Method::TwoRectified)
        || cfg.compare.truncation_ablation;
    let probe = CurveProbe::new(task, cfg.compare.curve_samples.max(2), seed)?;
    let empty_ledger = || BudgetLedger::new(0.0);

    // Stage 1 also serves as the reference field for angular errors, so it
    // runs even when only the scratch baseline is compared.
    let stage1 = run_stage1(cfg, seed, out);
    let stage2: Result<Reflow> = match (&stage1, needs_reflow) {
        (Ok(s1), true) => run_stage2(cfg, seed, &s1.model, &s1.digest, out),
        (Err(e), true) => Err(Error::InvalidArgument(format!("stage 1 failed: {e}"))),
        (_, false) => Err(Error::InvalidArgument("reflow not requested".into())),
    };
    let upstream = |s1: &TrainedFlow, s2: &Reflow| {
        let mut l = s1.ledger.clone();
        l.absorb(&s2.ledger);
        l
    };

    let mut runs = Vec::new();
    let mut variants: Vec<(Method, &str)> = methods.iter().map(|m| (*m, m.name())).collect();
    if cfg.compare.truncation_ablation {
        variants.push((Method::ReMeanflow, ABLATION_NAME));
    }
    for (method, name) in variants {
        let run = match (method, &stage1, &stage2) {
            (Method::ReMeanflow, Ok(s1), Ok(s2)) => {
                let (set, digest) =
                    if name == ABLATION_NAME { (&s2.raw, &s2.raw_digest) } else { (&s2.couplings, &s2.digest) };
                let base = upstream(s1, s2);
                re_meanflow(cfg, task, seed, name, set, digest, &s1.model, base, &probe, out)
            }
            (Method::TwoRectified, Ok(s1), Ok(s2)) => {
                two_rectified(cfg, task, seed, s1, s2, upstream(s1, s2), &probe, out)
            }
            (Method::MeanflowScratch, Ok(s1), _) => scratch(cfg, task, seed, &s1.model, &probe, out),
            (_, Err(e), _) => failed(name, Error::InvalidArgument(format!("stage 1 failed: {e}")), empty_ledger()),
            (_, Ok(s1), Err(e)) => {
                failed(name, Error::InvalidArgument(format!("reflow failed: {e}")), s1.ledger.clone())
            }
        };
        runs.push(run);
    }
    Ok(runs)
}

fn curve_hook<'a, M>(
    base: f64,
    per_step: f64,
    points: &'a mut Vec<CurvePoint>,
    sample: impl Fn(&M) -> Result<Tensor> + 'a,
    probe: &'a CurveProbe,
) -> impl FnMut(u64, &M) -> Result<()> + 'a {
    move |step, model| {
        let x = sample(model)?;
        // Diverged snapshots are recorded as infinitely far.
        let e = if x.is_finite() { probe.energy(&x)? } else { f64::INFINITY };
        points.push(CurvePoint { step, forward_equivalents: base + per_step * step as f64, energy_distance: e });
        Ok(())
    }
}

fn mf_sampler(probe: &CurveProbe) -> impl Fn(&MeanFlowModel) -> Result<Tensor> + '_ {
    move |m| Generator::MeanFlow(m).generate(&probe.noise, probe.classes.as_deref(), &NfeCounter::new())
}

#[allow(clippy::too_many_arguments)]
fn re_meanflow(
    cfg: &RunConfig,
    task: &ToyTask,
    seed: u64,
    name: &str,
    set: &crate::rectflow::CouplingSet,
    digest: &str,
    flow: &FlowModel,
    base: BudgetLedger,
    probe: &CurveProbe,
    out: &OutputDir,
) -> MethodRun {
    let mut curve = Vec::new();
    let per_step = cfg.meanflow.batch as f64 * step_forward_equivalents(MEANFLOW_STEP_COST);
    let trained = {
        let mut hook = curve_hook(base.forward_equivalents(2.0), per_step, &mut curve, mf_sampler(probe), probe);
        let snaps =
            (cfg.compare.curve_every > 0).then_some(Snapshots { every: cfg.compare.curve_every, callback: &mut hook });
        train_meanflow_stage(
            cfg,
            &cfg.meanflow,
            &CouplingSource::Dataset(set),
            digest,
            Some(flow),
            Phase::Stage3Train,
            derive_seed(seed, "stage3", 0),
            &format!("{name}_seed{seed}"),
            out,
            snaps,
        )
    };
    let mut ledger = base;
    let result = trained.and_then(|t| {
        ledger.absorb(&t.ledger);
        ledger.flops_per_forward = t.ledger.flops_per_forward;
        if name != ABLATION_NAME {
            diagnostics(cfg, task, seed, &t.model, set, out)?;
        }
        evaluate(Generator::MeanFlow(&t.model), task, flow, &cfg.eval, derive_seed(seed, "eval", 0), &mut ledger)
    });
    MethodRun { name: name.to_string(), result, ledger, curve }
}

/// Loss heatmap and distance/error histogram of the Re-MeanFlow model.
fn diagnostics(
    cfg: &RunConfig,
    _task: &ToyTask,
    seed: u64,
    model: &MeanFlowModel,
    set: &crate::rectflow::CouplingSet,
    out: &OutputDir,
) -> Result<()> {
    let e = &cfg.eval;
    if e.heatmap_samples > 0 {
        let h = loss_heatmap(
            model,
            &CouplingSource::Dataset(set),
            e.heatmap_grid,
            e.heatmap_samples,
            &mut stream(seed, "heatmap", 0),
        )?;
        out.write("reports", &format!("heatmap_seed{seed}.csv"), h.to_csv())?;
        out.write(
            "figures",
            &format!("heatmap_seed{seed}.svg"),
            svg::heatmap(&format!("mean-flow loss over (t, r), seed {seed}"), &h),
        )?;
    }
    if e.hist_bins >= 2 {
        let hist = distance_error_histogram(model, set, e.hist_bins)?;
        out.write("reports", &format!("histogram_seed{seed}.csv"), hist.to_csv())?;
        out.write(
            "figures",
            &format!("histogram_seed{seed}.svg"),
            svg::histogram(&format!("angular error by coupling distance, seed {seed}"), &hist),
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn two_rectified(
    cfg: &RunConfig,
    task: &ToyTask,
    seed: u64,
    s1: &TrainedFlow,
    s2: &Reflow,
    base: BudgetLedger,
    probe: &CurveProbe,
    out: &OutputDir,
) -> MethodRun {
    let name = Method::TwoRectified.name();
    let flow_cfg = FlowTrainConfig { iters: cfg.two_rect_iters(), ..cfg.flow.clone() };
    let mut curve = Vec::new();
    let per_step = flow_cfg.batch as f64 * step_forward_equivalents(FLOW_STEP_COST);
    let trained = {
        let sample = |m: &FlowModel| {
            Generator::Flow { model: m, steps: 1 }.generate(&probe.noise, probe.classes.as_deref(), &NfeCounter::new())
        };
        let mut hook = curve_hook(base.forward_equivalents(2.0), per_step, &mut curve, sample, probe);
        let snaps =
            (cfg.compare.curve_every > 0).then_some(Snapshots { every: cfg.compare.curve_every, callback: &mut hook });
        train_flow_stage(
            cfg,
            &flow_cfg,
            &CouplingSource::Dataset(&s2.raw),
            &s2.raw_digest,
            Phase::Stage3Train,
            derive_seed(seed, "two-rect", 0),
            &format!("{name}_seed{seed}"),
            out,
            snaps,
        )
    };
    let mut ledger = base;
    let result = trained.and_then(|t| {
        ledger.absorb(&t.ledger);
        evaluate(
            Generator::Flow { model: &t.model, steps: 1 },
            task,
            &s1.model,
            &cfg.eval,
            derive_seed(seed, "eval", 0),
            &mut ledger,
        )
    });
    MethodRun { name: name.to_string(), result, ledger, curve }
}

fn scratch(
    cfg: &RunConfig,
    task: &ToyTask,
    seed: u64,
    reference: &FlowModel,
    probe: &CurveProbe,
    out: &OutputDir,
) -> MethodRun {
    let name = Method::MeanflowScratch.name();
    let mf_cfg = crate::meanflow::MeanFlowTrainConfig { iters: cfg.scratch_iters(), ..cfg.meanflow.clone() };
    let mut curve = Vec::new();
    let per_step = mf_cfg.batch as f64 * step_forward_equivalents(MEANFLOW_STEP_COST);
    let trained = {
        let mut hook = curve_hook(0.0, per_step, &mut curve, mf_sampler(probe), probe);
        let snaps =
            (cfg.compare.curve_every > 0).then_some(Snapshots { every: cfg.compare.curve_every, callback: &mut hook });
        train_meanflow_stage(
            cfg,
            &mf_cfg,
            &CouplingSource::Independent(task),
            "",
            None,
            Phase::Stage1Train,
            derive_seed(seed, "scratch", 0),
            &format!("{name}_seed{seed}"),
            out,
            snaps,
        )
    };
    let mut ledger = BudgetLedger::new(reference.net().flops_per_forward());
    let result = trained.and_then(|t| {
        ledger.absorb(&t.ledger);
        evaluate(Generator::MeanFlow(&t.model), task, reference, &cfg.eval, derive_seed(seed, "eval", 0), &mut ledger)
    });
    MethodRun { name: name.to_string(), result, ledger, curve }
}

/// Ledger each method would accumulate for one seed, without training.
pub fn planned_budget(cfg: &RunConfig) -> Result<BTreeMap<String, BudgetLedger>> {
    cfg.validate()?;
    let task = cfg.task.build()?;
    let layers = cfg.net.layer_sizes(task.dim() + 1 + task.num_classes(), task.dim());
    let flops = layers.windows(2).map(|p| 2.0 * (p[0] * p[1]) as f64 + p[1] as f64).sum::<f64>();
    let r = &cfg.reflow;
    let reflow_forwards = r.n_pairs as u64 * r.steps as u64 * r.solver.evals_per_step();
    let eval = cfg.eval.n_samples as u64;
    let mut upstream = BudgetLedger::new(flops);
    upstream.charge_train(Phase::Stage1Train, cfg.flow.iters, cfg.flow.batch as u64, FLOW_STEP_COST);
    upstream.charge_forwards(Phase::ReflowSampling, reflow_forwards);

    let mf = |steps: u64, batch: usize, phase: Phase, base: &BudgetLedger, cost: PassCounts| {
        let mut l = base.clone();
        l.charge_train(phase, steps, batch as u64, cost);
        l.charge_forwards(Phase::Eval, eval);
        l
    };
    let mut out = BTreeMap::new();
    for m in &cfg.compare.methods {
        let l = match m {
            Method::ReMeanflow => {
                mf(cfg.meanflow.iters, cfg.meanflow.batch, Phase::Stage3Train, &upstream, MEANFLOW_STEP_COST)
            }
            Method::TwoRectified => {
                mf(cfg.two_rect_iters(), cfg.flow.batch, Phase::Stage3Train, &upstream, FLOW_STEP_COST)
            }
            Method::MeanflowScratch => mf(
                cfg.scratch_iters(),
                cfg.meanflow.batch,
                Phase::Stage1Train,
                &BudgetLedger::new(flops),
                MEANFLOW_STEP_COST,
            ),
        };
        out.insert(m.name().to_string(), l);
    }
    Ok(out)
}
