use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use remeanflow::checkpoint::{Checkpoint, ModelKind};
use remeanflow::metrics::{flops_estimate, loss_heatmap, svg, BudgetLedger, EvalReport};
use remeanflow::model::NfeCounter;
use remeanflow::pipeline::{
    evaluate, planned_budget, run_comparison, run_stage1, run_stage2, run_stage3, sha256_hex, Generator, OutputDir,
    RunConfig, RunManifest,
};
use remeanflow::rectflow::{CouplingSet, CouplingSource, FlowModel};
use remeanflow::rng::{derive_seed, stream};
use remeanflow::MeanFlowModel;

/// Rectified flow, reflow couplings and one-step MeanFlow on 2-D toy tasks.
#[derive(Parser)]
#[command(name = "remeanflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps for the stage(s) this command runs.
    #[arg(long)]
    iters: Option<u64>,
    /// Percentage of longest couplings to drop (overrides `reflow.truncate_k`).
    #[arg(long, value_name = "K")]
    truncate_k: Option<f64>,
    /// Output directory (overrides `out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reflow worker threads (overrides `workers`).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train a flow on independent data/noise couplings.
    TrainFlow(Common),
    /// Stage 2: generate reflow couplings from a flow and truncate them.
    Reflow {
        #[command(flatten)]
        common: Common,
        /// Flow checkpoint; defaults to `<out>/checkpoints/flow_seed<seed>.json`.
        #[arg(long, value_name = "PATH")]
        flow: Option<PathBuf>,
    },
    /// Stage 3: train a mean-flow model on a coupling file.
    TrainMeanflow {
        #[command(flatten)]
        common: Common,
        /// Coupling file; defaults to `<out>/couplings/reflow_seed<seed>.bin`.
        #[arg(long, value_name = "PATH")]
        couplings: Option<PathBuf>,
        /// Frozen flow checkpoint, needed for `velocity_source = "flow"`.
        #[arg(long, value_name = "PATH")]
        flow: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint and write them as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Euler steps for flow checkpoints (mean-flow checkpoints always use one).
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// CSV destination; defaults to `<out>/reports/samples_<checkpoint stem>.csv`.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the task and a reference flow.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Reference flow for angular errors; defaults to `<out>/checkpoints/flow_seed<seed>.json`.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
        /// Euler steps for flow checkpoints.
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Run the budgeted three-way comparison.
    Compare(Common),
    /// Mean-flow loss over a (t, r) grid.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Coupling file to draw from; independent couplings when omitted.
        #[arg(long, value_name = "PATH")]
        couplings: Option<PathBuf>,
    },
    /// Print the per-method compute ledger a comparison would use.
    Budget(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainFlow(c) | Command::Compare(c) | Command::Budget(c) => c,
            Command::Reflow { common, .. }
            | Command::TrainMeanflow { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Heatmap { common, .. } => common,
        }
    }
}

fn load_config(common: &Common, command: &Command) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.compare.seeds.clear();
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(k) = common.truncate_k {
        cfg.reflow.truncate_k = k;
    }
    if let Some(n) = common.iters {
        match command {
            Command::TrainFlow(_) => cfg.flow.iters = n,
            Command::TrainMeanflow { .. } => cfg.meanflow.iters = n,
            Command::Compare(_) | Command::Budget(_) => {
                cfg.flow.iters = n;
                cfg.meanflow.iters = n;
            }
            _ => bail!("--iters has no effect on this command"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn flow_from(path: &Path) -> anyhow::Result<(FlowModel, String)> {
    let text = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
    let ckpt = Checkpoint::from_json(std::str::from_utf8(&text).context("checkpoint is not UTF-8")?)?;
    Ok((ckpt.to_flow()?, sha256_hex(&text)))
}

enum Loaded {
    Flow(FlowModel),
    MeanFlow(MeanFlowModel),
}

fn load_model(path: &Path) -> anyhow::Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    match ckpt.metadata.as_ref().map(|m| m.model_kind) {
        Some(ModelKind::Flow) => Ok(Loaded::Flow(ckpt.to_flow()?)),
        Some(ModelKind::Meanflow) => Ok(Loaded::MeanFlow(ckpt.to_meanflow()?)),
        None => bail!("{}: checkpoint has no metadata naming the model kind", path.display()),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn finish(manifest: &mut RunManifest, out: &OutputDir) -> anyhow::Result<()> {
    manifest.finish(&out.root)?;
    println!("manifest = {}", out.root.join(remeanflow::pipeline::MANIFEST_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.command.common(), &cli.command)?;
    let seed = cfg.seed;
    match &cli.command {
        Command::TrainFlow(_) => {
            let out = OutputDir::create(&cfg.out)?;
            let mut manifest = RunManifest::new("train-flow", &cfg.hash());
            match run_stage1(&cfg, seed, &out) {
                Ok(s1) => {
                    let (head, tail) = s1.trace.head_tail_means(100);
                    println!("checkpoint = {}", s1.checkpoint.display());
                    println!("loss_first_100 = {head:?}\nloss_last_100 = {tail:?}");
                    manifest.budget.insert(format!("flow/seed{seed}"), s1.ledger);
                    finish(&mut manifest, &out)
                }
                Err(e) => {
                    manifest.fail(&e);
                    manifest.finish(&out.root)?;
                    Err(e.into())
                }
            }
        }
        Command::Reflow { flow, .. } => {
            let out = OutputDir::create(&cfg.out)?;
            let path = flow.clone().unwrap_or_else(|| out.path("checkpoints", &format!("flow_seed{seed}.json")));
            let (model, digest) = flow_from(&path)?;
            let mut manifest = RunManifest::new("reflow", &cfg.hash());
            match run_stage2(&cfg, seed, &model, &digest, &out) {
                Ok(r) => {
                    println!("couplings = {}", r.path.display());
                    println!("pairs_generated = {}\npairs_kept = {}", r.raw.len(), r.couplings.len());
                    println!("failed_pairs = {}", r.raw.provenance.failed_pairs.len());
                    manifest.budget.insert(format!("reflow/seed{seed}"), r.ledger);
                    finish(&mut manifest, &out)
                }
                Err(e) => {
                    manifest.fail(&e);
                    manifest.finish(&out.root)?;
                    Err(e.into())
                }
            }
        }
        Command::TrainMeanflow { couplings, flow, .. } => {
            let out = OutputDir::create(&cfg.out)?;
            let path = couplings.clone().unwrap_or_else(|| out.path("couplings", &format!("reflow_seed{seed}.bin")));
            let bytes = std::fs::read(&path).with_context(|| format!("{}", path.display()))?;
            let set = CouplingSet::from_bytes(&bytes).with_context(|| format!("{}", path.display()))?;
            let frozen = flow.as_deref().map(flow_from).transpose()?.map(|(m, _)| m);
            let mut manifest = RunManifest::new("train-meanflow", &cfg.hash());
            match run_stage3(&cfg, seed, &set, &sha256_hex(&bytes), frozen.as_ref(), &out) {
                Ok(t) => {
                    let (head, tail) = t.trace.head_tail_means(100);
                    println!("checkpoint = {}", t.checkpoint.display());
                    println!("loss_first_100 = {head:?}\nloss_last_100 = {tail:?}");
                    manifest.budget.insert(format!("re_meanflow/seed{seed}"), t.ledger);
                    finish(&mut manifest, &out)
                }
                Err(e) => {
                    manifest.fail(&e);
                    manifest.finish(&out.root)?;
                    Err(e.into())
                }
            }
        }
        Command::Sample { checkpoint, n, steps, output, .. } => {
            let task = cfg.task.build()?;
            let model = load_model(checkpoint)?;
            let mut rng = stream(derive_seed(seed, "sample", 0), "sample", 0);
            let (_, classes) = task.sample_data(*n, &mut rng)?;
            let z = task.sample_prior(*n, &mut rng)?;
            let labels: Option<Vec<Option<usize>>> = classes.as_ref().map(|c| c.iter().map(|&k| Some(k)).collect());
            let nfe = NfeCounter::new();
            let x = match &model {
                Loaded::MeanFlow(m) => Generator::MeanFlow(m).generate(&z, labels.as_deref(), &nfe)?,
                Loaded::Flow(f) => Generator::Flow { model: f, steps: *steps }.generate(&z, labels.as_deref(), &nfe)?,
            };
            let cols: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
            let mut csv = cols.join(",");
            csv += if classes.is_some() { ",class\n" } else { "\n" };
            for i in 0..x.rows() {
                csv += &x.row(i).iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
                if let Some(c) = &classes {
                    csv += &format!(",{}", c[i]);
                }
                csv.push('\n');
            }
            let dest = match output {
                Some(p) => p.clone(),
                None => OutputDir::create(&cfg.out)?.path("reports", &format!("samples_{}.csv", stem(checkpoint))),
            };
            std::fs::write(&dest, csv).with_context(|| format!("{}", dest.display()))?;
            println!("samples = {}\nnfe = {}", dest.display(), nfe.get());
            Ok(())
        }
        Command::Eval { checkpoint, reference, steps, .. } => {
            let task = cfg.task.build()?;
            let out = OutputDir::create(&cfg.out)?;
            let ref_path =
                reference.clone().unwrap_or_else(|| out.path("checkpoints", &format!("flow_seed{seed}.json")));
            let (reference, _) = flow_from(&ref_path)?;
            let model = load_model(checkpoint)?;
            let (generator, flops) = match &model {
                Loaded::MeanFlow(m) => (Generator::MeanFlow(m), m.net().flops_per_forward()),
                Loaded::Flow(f) => (Generator::Flow { model: f, steps: *steps }, f.net().flops_per_forward()),
            };
            let mut ledger = BudgetLedger::new(flops);
            let result = evaluate(generator, &task, &reference, &cfg.eval, derive_seed(seed, "eval", 0), &mut ledger);
            let report = EvalReport {
                method: stem(checkpoint),
                seed,
                config_hash: cfg.hash(),
                error: result.as_ref().err().map(|e| e.to_string()),
                metrics: result.ok().map(|(m, _)| m),
                budget: ledger,
            };
            let kv = report.to_kv();
            out.write("reports", &format!("eval_{}.txt", stem(checkpoint)), &kv)?;
            print!("{kv}");
            match &report.error {
                Some(e) => bail!("evaluation failed: {e}"),
                None => Ok(()),
            }
        }
        Command::Compare(_) => {
            let outcome = run_comparison(&cfg)?;
            println!("method,runs_ok,median_outlier_rate,median_energy_distance");
            let mut names: Vec<String> = Vec::new();
            for r in &outcome.reports {
                if !names.contains(&r.method) {
                    names.push(r.method.clone());
                }
            }
            for name in &names {
                let ok = outcome.reports.iter().filter(|r| &r.method == name && r.is_ok()).count();
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
                println!(
                    "{name},{ok},{},{}",
                    fmt(outcome.median(name, |m| m.outlier_rate)),
                    fmt(outcome.median(name, |m| m.energy_distance))
                );
            }
            for r in outcome.reports.iter().filter(|r| !r.is_ok()) {
                println!("failed: {} seed {}: {}", r.method, r.seed, r.error.as_deref().unwrap_or("unknown"));
            }
            println!("manifest = {}", cfg.out.join(remeanflow::pipeline::MANIFEST_FILE).display());
            Ok(())
        }
        Command::Heatmap { checkpoint, couplings, .. } => {
            let task = cfg.task.build()?;
            let out = OutputDir::create(&cfg.out)?;
            let Loaded::MeanFlow(model) = load_model(checkpoint)? else {
                bail!("{}: heatmap needs a mean-flow checkpoint", checkpoint.display());
            };
            let set = couplings.as_deref().map(CouplingSet::read).transpose()?;
            let source = match &set {
                Some(s) => CouplingSource::Dataset(s),
                None => CouplingSource::Independent(&task),
            };
            let e = &cfg.eval;
            let h = loss_heatmap(&model, &source, e.heatmap_grid, e.heatmap_samples, &mut stream(seed, "heatmap", 0))?;
            let name = stem(checkpoint);
            let csv = out.write("reports", &format!("heatmap_{name}.csv"), h.to_csv())?;
            out.write("figures", &format!("heatmap_{name}.svg"), svg::heatmap(&format!("mean-flow loss, {name}"), &h))?;
            println!("heatmap = {}", csv.display());
            println!("median_cell_mean = {:?}", h.median_cell_mean());
            println!("region_t_ge_0.95_r_le_0.4_mean = {:?}", h.region_mean(0.95, 0.4));
            Ok(())
        }
        Command::Budget(_) => {
            for (method, ledger) in planned_budget(&cfg)? {
                print!("{}", ledger.to_kv(&format!("{method}.")));
                println!("{method}.forward_equivalents = {:?}", ledger.forward_equivalents(2.0));
                println!("{method}.flops = {:?}", flops_estimate(&ledger, 2.0).total);
            }
            Ok(())
        }
    }
}

/// Die quietly on a closed pipe (`remeanflow budget | head`) instead of
/// panicking inside `println!`.
#[cfg(unix)]
fn default_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn default_sigpipe() {}

fn main() -> ExitCode {
    default_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
