use std::path::PathBuf;

use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
use crate::dist::ToyTask;
use crate::error::{Error, Result};
use crate::meanflow::{one_step_sample, train_meanflow, MeanFlowModel, MeanFlowTrainConfig};
use crate::metrics::{
    angular_error, energy_distance, outlier_rate, BudgetLedger, EvalMetrics, PassCounts, Phase, FLOW_STEP_COST,
    GUIDED_EXTRA_FORWARDS, MEANFLOW_STEP_COST,
};
use crate::model::{NfeCounter, VelocityField};
use crate::pipeline::config::{EvalConfig, RunConfig};
use crate::pipeline::manifest::{sha256_hex, OutputDir};
use crate::rectflow::{
    empirical_lipschitz, generate_couplings, integrate_ode, straightness_deviation, train_rectified_flow,
    truncate_by_distance, Coupling, CouplingSet, CouplingSource, Direction, FlowModel, FlowTrainConfig, Provenance,
    Solver,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::trace::{LossTrace, Snapshots};

/// Loss traces are exported as means over windows of this many steps.
const TRACE_WINDOW: usize = 100;

pub struct TrainedFlow {
    pub model: FlowModel,
    pub trace: LossTrace,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub ledger: BudgetLedger,
}

pub struct TrainedMeanFlow {
    pub model: MeanFlowModel,
    pub trace: LossTrace,
    pub checkpoint: PathBuf,
    pub ledger: BudgetLedger,
}

pub struct Reflow {
    /// Couplings after truncation.
    pub couplings: CouplingSet,
    /// Couplings before truncation.
    pub raw: CouplingSet,
    pub path: PathBuf,
    pub digest: String,
    pub raw_digest: String,
    pub ledger: BudgetLedger,
}

/// Energy distance of one-step samples against quality, recorded during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    /// Cumulative forward-equivalents charged so far, reflow included.
    pub forward_equivalents: f64,
    pub energy_distance: f64,
}

/// Fixed noise and target draws used for the budget-vs-quality curve.
pub struct CurveProbe {
    pub noise: Tensor,
    pub classes: Option<Vec<Option<usize>>>,
    pub target: Tensor,
}

impl CurveProbe {
    pub fn new(task: &ToyTask, n: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "curve", 0);
        let (target, classes) = task.sample_data(n, &mut rng)?;
        let noise = task.sample_prior(n, &mut rng)?;
        Ok(CurveProbe { noise, classes: classes.map(|c| c.into_iter().map(Some).collect()), target })
    }

    pub fn energy(&self, samples: &Tensor) -> Result<f64> {
        energy_distance(samples, &self.target, None, &mut stream(0, "curve-energy", 0))
    }
}

/// Forward-equivalents of one training sample at `cost` (backward and JVP count double).
pub fn step_forward_equivalents(cost: PassCounts) -> f64 {
    cost.forwards as f64 + 2.0 * (cost.backwards + cost.jvps) as f64
}

fn labels(classes: &Option<Vec<Option<usize>>>) -> Option<&[Option<usize>]> {
    classes.as_deref()
}

fn write_trace(out: &OutputDir, name: &str, trace: &LossTrace) -> Result<()> {
    let mut csv = String::from("step_end,mean_loss\n");
    for (i, m) in trace.window_means(TRACE_WINDOW).iter().enumerate() {
        csv += &format!("{},{m:?}\n", (i + 1) * TRACE_WINDOW);
    }
    out.write("reports", &format!("{name}_loss.csv"), csv)?;
    Ok(())
}

fn meta(
    kind: ModelKind,
    task: &ToyTask,
    time: Option<&MeanFlowTrainConfig>,
    seed: u64,
    couplings: &str,
    cfg: &RunConfig,
) -> CheckpointMeta {
    CheckpointMeta {
        model_kind: kind,
        d: task.dim(),
        has_class: task.num_classes() > 0,
        num_classes: task.num_classes(),
        time_cfg: time.map(|m| m.time),
        training_seed: seed,
        couplings_hash: couplings.to_string(),
        config_hash: cfg.hash(),
    }
}

/// Trains a flow and saves `<out>/checkpoints/<name>.json`.
#[allow(clippy::too_many_arguments)]
pub fn train_flow_stage(
    cfg: &RunConfig,
    flow_cfg: &FlowTrainConfig,
    source: &CouplingSource<'_>,
    couplings_digest: &str,
    phase: Phase,
    seed: u64,
    name: &str,
    out: &OutputDir,
    snapshots: Option<Snapshots<'_, FlowModel>>,
) -> Result<TrainedFlow> {
    let task = cfg.task.build()?;
    let (model, trace) = train_rectified_flow(source, &cfg.net, flow_cfg, seed, snapshots)?;
    let mut ledger = BudgetLedger::new(model.net().flops_per_forward());
    ledger.charge_train(phase, flow_cfg.iters, flow_cfg.batch as u64, FLOW_STEP_COST);
    let ckpt = Checkpoint::flow(&model, Some(meta(ModelKind::Flow, &task, None, seed, couplings_digest, cfg)));
    let json = ckpt.to_json()?;
    let checkpoint = out.write("checkpoints", &format!("{name}.json"), &json)?;
    write_trace(out, name, &trace)?;
    Ok(TrainedFlow { model, trace, checkpoint, digest: sha256_hex(json.as_bytes()), ledger })
}

/// Trains a mean-flow model and saves `<out>/checkpoints/<name>.json`.
#[allow(clippy::too_many_arguments)]
pub fn train_meanflow_stage(
    cfg: &RunConfig,
    mf_cfg: &MeanFlowTrainConfig,
    source: &CouplingSource<'_>,
    couplings_digest: &str,
    flow: Option<&FlowModel>,
    phase: Phase,
    seed: u64,
    name: &str,
    out: &OutputDir,
    snapshots: Option<Snapshots<'_, MeanFlowModel>>,
) -> Result<TrainedMeanFlow> {
    let task = cfg.task.build()?;
    let (model, trace) = train_meanflow(source, &cfg.net, mf_cfg, flow, seed, snapshots)?;
    let mut ledger = BudgetLedger::new(model.net().flops_per_forward());
    let b = mf_cfg.batch as u64;
    match mf_cfg.guided_from() {
        Some(from) => {
            let guided = mf_cfg.iters - from + 1;
            ledger.charge_train(phase, mf_cfg.iters - guided, b, MEANFLOW_STEP_COST);
            let cost =
                PassCounts { forwards: MEANFLOW_STEP_COST.forwards + GUIDED_EXTRA_FORWARDS, ..MEANFLOW_STEP_COST };
            ledger.charge_train(phase, guided, b, cost);
        }
        None => ledger.charge_train(phase, mf_cfg.iters, b, MEANFLOW_STEP_COST),
    }
    let ckpt =
        Checkpoint::meanflow(&model, Some(meta(ModelKind::Meanflow, &task, Some(mf_cfg), seed, couplings_digest, cfg)));
    let checkpoint = out.write("checkpoints", &format!("{name}.json"), ckpt.to_json()?)?;
    write_trace(out, name, &trace)?;
    Ok(TrainedMeanFlow { model, trace, checkpoint, ledger })
}

/// Stage 1: flow on independent couplings, saved as `flow_seed<seed>.json`.
pub fn run_stage1(cfg: &RunConfig, seed: u64, out: &OutputDir) -> Result<TrainedFlow> {
    let task = cfg.task.build()?;
    let stage_seed = derive_seed(seed, "stage1", 0);
    train_flow_stage(
        cfg,
        &cfg.flow,
        &CouplingSource::Independent(&task),
        "",
        Phase::Stage1Train,
        stage_seed,
        &format!("flow_seed{seed}"),
        out,
        None,
    )
}

/// Stage 2: reflow couplings from `flow`, truncated by distance. Saves
/// `reflow_seed<seed>.bin` and, when anything was dropped, the untruncated
/// `reflow_raw_seed<seed>.bin`.
pub fn run_stage2(cfg: &RunConfig, seed: u64, flow: &FlowModel, flow_digest: &str, out: &OutputDir) -> Result<Reflow> {
    let task = cfg.task.build()?;
    let r = &cfg.reflow;
    let nfe = NfeCounter::new();
    let mut raw = generate_couplings(
        flow,
        &task,
        r.n_pairs,
        r.steps,
        r.solver,
        derive_seed(seed, "reflow", 0),
        cfg.workers,
        flow_digest,
        &nfe,
    )?;
    raw.provenance.config_hash = cfg.hash();
    let mut ledger = BudgetLedger::new(flow.net().flops_per_forward());
    ledger.charge_forwards(Phase::ReflowSampling, nfe.get());

    let raw_bytes = raw.to_bytes()?;
    let raw_digest = sha256_hex(&raw_bytes);
    let (couplings, digest) = if r.truncate_k > 0.0 {
        out.write("couplings", &format!("reflow_raw_seed{seed}.bin"), &raw_bytes)?;
        let t = truncate_by_distance(&raw, r.truncate_k)?;
        let bytes = t.to_bytes()?;
        let digest = sha256_hex(&bytes);
        out.write("couplings", &format!("reflow_seed{seed}.bin"), &bytes)?;
        (t, digest)
    } else {
        out.write("couplings", &format!("reflow_seed{seed}.bin"), &raw_bytes)?;
        (raw.clone(), raw_digest.clone())
    };
    let path = out.path("couplings", &format!("reflow_seed{seed}.bin"));
    Ok(Reflow { couplings, raw, path, digest, raw_digest, ledger })
}

/// Stage 3: mean flow on the stage-2 couplings, saved as `re_meanflow_seed<seed>.json`.
pub fn run_stage3(
    cfg: &RunConfig,
    seed: u64,
    couplings: &CouplingSet,
    couplings_digest: &str,
    flow: Option<&FlowModel>,
    out: &OutputDir,
) -> Result<TrainedMeanFlow> {
    train_meanflow_stage(
        cfg,
        &cfg.meanflow,
        &CouplingSource::Dataset(couplings),
        couplings_digest,
        flow,
        Phase::Stage3Train,
        derive_seed(seed, "stage3", 0),
        &format!("re_meanflow_seed{seed}"),
        out,
        None,
    )
}

/// A trained one-step generator.
#[derive(Clone, Copy)]
pub enum Generator<'a> {
    /// `x = z − u(z, 0, 1)`.
    MeanFlow(&'a MeanFlowModel),
    /// Euler integration of a flow from noise to data.
    Flow { model: &'a FlowModel, steps: usize },
}

impl Generator<'_> {
    pub fn generate(&self, z: &Tensor, classes: Option<&[Option<usize>]>, nfe: &NfeCounter) -> Result<Tensor> {
        match *self {
            Generator::MeanFlow(m) => one_step_sample(m, z, classes, nfe),
            Generator::Flow { model, steps } => {
                integrate_ode(model, z, steps, Solver::Euler, Direction::NoiseToData, classes, nfe)
            }
        }
    }

    fn field(&self) -> &dyn VelocityField {
        match *self {
            Generator::MeanFlow(m) => m,
            Generator::Flow { model, .. } => model,
        }
    }

    pub fn nfe_per_sample(&self) -> u64 {
        match *self {
            Generator::MeanFlow(_) => 1,
            Generator::Flow { steps, .. } => steps as u64,
        }
    }
}

/// Sample quality and geometry of `generator` on `task`. Angular error is
/// measured against the displacement of `reference` integrated in
/// `eval.reference_steps` Euler steps from the same noise. Generation
/// forwards are charged to the ledger's eval phase.
pub fn evaluate(
    generator: Generator<'_>,
    task: &ToyTask,
    reference: &FlowModel,
    eval: &EvalConfig,
    seed: u64,
    ledger: &mut BudgetLedger,
) -> Result<(EvalMetrics, Tensor)> {
    if eval.n_samples == 0 || eval.geometry_samples < 2 || eval.geometry_samples > eval.n_samples {
        return Err(Error::Config("eval needs n_samples ≥ geometry_samples ≥ 2".into()));
    }
    let mut rng = stream(seed, "eval", 0);
    let (target, classes) = task.sample_data(eval.n_samples, &mut rng)?;
    let noise = task.sample_prior(eval.n_samples, &mut rng)?;
    let classes: Option<Vec<Option<usize>>> = classes.map(|c| c.into_iter().map(Some).collect());

    let nfe = NfeCounter::new();
    let samples = generator.generate(&noise, labels(&classes), &nfe)?;
    ledger.charge_forwards(Phase::Eval, nfe.get());
    samples.ensure_finite("generated samples")?;

    let threshold = task.target.sigma_contour_log_density(eval.outlier_sigma);
    let outliers = outlier_rate(&samples, &task.target, threshold);
    let energy = energy_distance(&samples, &target, eval.energy_max_points, &mut stream(seed, "eval-energy", 0))?;

    let g = eval.geometry_samples;
    let d = task.dim();
    let z = Tensor::new(vec![g, d], noise.values()[..g * d].to_vec())?;
    let x_hat = Tensor::new(vec![g, d], samples.values()[..g * d].to_vec())?;
    let geo_classes = classes.as_ref().map(|c| c[..g].to_vec());
    let side = NfeCounter::new();
    let x_ref = integrate_ode(
        reference,
        &z,
        eval.reference_steps,
        Solver::Euler,
        Direction::NoiseToData,
        labels(&geo_classes),
        &side,
    )?;
    let (mut total, mut counted) = (0.0, 0usize);
    for i in 0..g {
        let disp: Vec<f64> = z.row(i).iter().zip(x_hat.row(i)).map(|(a, b)| a - b).collect();
        let disp_ref: Vec<f64> = z.row(i).iter().zip(x_ref.row(i)).map(|(a, b)| a - b).collect();
        match angular_error(&disp, &disp_ref) {
            Ok(a) => {
                total += a;
                counted += 1;
            }
            Err(Error::UndefinedAngle) => {}
            Err(e) => return Err(e),
        }
    }
    let mean_angular_error = if counted == 0 { 0.0 } else { total / counted as f64 };
    let straightness =
        straightness_deviation(generator.field(), &z, eval.straightness_steps, labels(&geo_classes), &side)?;

    let pairs: Vec<Coupling> = (0..g).map(|i| Coupling::new(x_hat.row(i).to_vec(), z.row(i).to_vec(), None)).collect();
    let set = CouplingSet::new(pairs, Provenance::default());
    let lipschitz = empirical_lipschitz(&set, eval.lipschitz_pairs, &mut stream(seed, "eval-lipschitz", 0))?;

    let metrics = EvalMetrics {
        n_samples: eval.n_samples as u64,
        outlier_rate: outliers,
        outlier_threshold: threshold,
        energy_distance: energy,
        mean_angular_error,
        straightness,
        lipschitz_estimate: lipschitz,
        nfe_per_sample: generator.nfe_per_sample(),
    };
    metrics.validate()?;
    Ok((metrics, samples))
}
