//! Mean-velocity models `u(z_t, r, t)`: the bootstrapped JVP target, adaptive
//! loss, guidance, training loop and one-step sampling.

mod cfg;
mod sampler;

pub use cfg::{cfg_velocity, CfgConfig, KappaRule};
pub use sampler::{sample_time_pair, u_shaped_cdf, u_shaped_inverse_cdf, TimeBranch, TimePair, TimeSamplerConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{assemble_input, assemble_tangent, Classes, NetSpec, NfeCounter, VelocityField};
use crate::nn::{Activation, AdamConfig, AdamState, ForwardCache, MlpGrads, MlpModel};
use crate::rectflow::{drop_classes, CouplingSource, FlowModel};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::trace::{LossTrace, Snapshots};

/// Mean-velocity network over `[z_t, r, t, one-hot(class)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFlowModel {
    net: MlpModel,
    dim: usize,
    num_classes: usize,
}

impl MeanFlowModel {
    pub fn new(net: MlpModel, dim: usize, num_classes: usize) -> Result<Self> {
        if net.input_dim() != dim + 2 + num_classes || net.output_dim() != dim {
            return Err(Error::Shape(format!(
                "mean-flow net {:?} does not fit dim {dim} with {num_classes} classes",
                net.layer_sizes()
            )));
        }
        Ok(MeanFlowModel { net, dim, num_classes })
    }

    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, dim: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        let sizes = spec.layer_sizes(dim + 2 + num_classes, dim);
        MeanFlowModel::new(MlpModel::init(&sizes, spec.activation, rng)?, dim, num_classes)
    }

    /// `u ≡ c`.
    pub fn constant(c: &[f64]) -> Self {
        let d = c.len();
        let net = MlpModel::new(
            vec![d + 2, d],
            Activation::Tanh,
            vec![Tensor::zeros(&[d, d + 2])],
            vec![Tensor::new(vec![d], c.to_vec()).expect("nonempty velocity")],
        )
        .expect("consistent shapes");
        MeanFlowModel { net, dim: d, num_classes: 0 }
    }

    /// `u(z, r, t) = A z + b_r r + b_t t + b` with `A` row-major `d × d`.
    pub fn linear(state_weights: &[f64], r_weights: &[f64], t_weights: &[f64], bias: &[f64]) -> Result<Self> {
        let d = bias.len();
        if state_weights.len() != d * d || r_weights.len() != d || t_weights.len() != d {
            return Err(Error::Shape("linear mean flow needs d×d, d, d and d coefficients".into()));
        }
        let mut w = Vec::with_capacity(d * (d + 2));
        for i in 0..d {
            w.extend_from_slice(&state_weights[i * d..(i + 1) * d]);
            w.push(r_weights[i]);
            w.push(t_weights[i]);
        }
        let net = MlpModel::new(
            vec![d + 2, d],
            Activation::Tanh,
            vec![Tensor::new(vec![d, d + 2], w)?],
            vec![Tensor::new(vec![d], bias.to_vec())?],
        )?;
        MeanFlowModel::new(net, d, 0)
    }

    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mean_velocity(&self, z_t: &Tensor, r: &[f64], t: &[f64], classes: Classes<'_>) -> Result<Tensor> {
        let input = assemble_input(z_t, &[r, t], classes, self.num_classes)?;
        self.net.forward(&input)
    }
}

/// `u(z, t, t)`, the instantaneous velocity implied by the mean-flow model.
impl VelocityField for MeanFlowModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, state: &Tensor, t: f64, classes: Classes<'_>) -> Result<Tensor> {
        let times = vec![t; state.rows()];
        self.mean_velocity(state, &times, &times, classes)
    }
}

/// Velocity `v(z_t, t)` that enters the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySource {
    /// The coupling's own `z − x`.
    #[default]
    Conditional,
    /// A frozen flow model evaluated at `(z_t, t)`.
    Flow,
}

struct TargetPass {
    target: Tensor,
    prediction: Tensor,
    cache: ForwardCache,
}

fn target_pass(
    model: &MeanFlowModel,
    z_t: &Tensor,
    r: &[f64],
    t: &[f64],
    v: &Tensor,
    classes: Classes<'_>,
) -> Result<TargetPass> {
    v.check_same_shape(z_t)?;
    let n = z_t.rows();
    if r.len() != n || t.len() != n {
        return Err(Error::Shape("one (r, t) pair per row required".into()));
    }
    if let Some(i) = (0..n).find(|&i| !(0.0 <= r[i] && r[i] <= t[i] && t[i] <= 1.0)) {
        return Err(Error::InvalidArgument(format!("row {i}: need 0 ≤ r ≤ t ≤ 1, got r={} t={}", r[i], t[i])));
    }
    let input = assemble_input(z_t, &[r, t], classes, model.num_classes)?;
    let tangent = assemble_tangent(v, &[0.0, 1.0], model.num_classes)?;
    let (prediction, du_dt, cache) = model.net.jvp_cached(&input, &tangent)?;
    let d = model.dim;
    let mut target = v.clone();
    for (i, row) in target.values_mut().chunks_exact_mut(d).enumerate() {
        if r[i] == t[i] {
            continue;
        }
        let g = du_dt.row(i);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mean-flow JVP at row {i}: z_t={:?} r={} t={} v={:?}",
                z_t.row(i),
                r[i],
                t[i],
                v.row(i)
            )));
        }
        let h = t[i] - r[i];
        for (u, gj) in row.iter_mut().zip(g) {
            *u -= h * gj;
        }
    }
    Ok(TargetPass { target, prediction, cache })
}

/// `v − (t − r)·du/dt`, the total derivative taken along `(dz_t, dr, dt) = (v, 0, 1)`.
/// Rows with `r == t` return `v` unchanged.
pub fn meanflow_target(
    model: &MeanFlowModel,
    z_t: &Tensor,
    r: &[f64],
    t: &[f64],
    v: &Tensor,
    classes: Classes<'_>,
) -> Result<Tensor> {
    target_pass(model, z_t, r, t, v, classes).map(|p| p.target)
}

/// Target and prediction `u(z_t, r, t)` from a single stacked pass.
pub(crate) fn target_and_prediction(
    model: &MeanFlowModel,
    z_t: &Tensor,
    r: &[f64],
    t: &[f64],
    v: &Tensor,
    classes: Classes<'_>,
) -> Result<(Tensor, Tensor)> {
    target_pass(model, z_t, r, t, v, classes).map(|p| (p.target, p.prediction))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Normalization strength; `0` gives plain MSE.
    pub p: f64,
    pub c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { p: 0.5, c: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLoss {
    pub loss: f64,
    /// Squared error per row.
    pub errors: Vec<f64>,
    /// `(e + c)^{−p}` per row, held constant for the gradient.
    pub weights: Vec<f64>,
    /// Gradient of `loss` with respect to the prediction.
    pub grad: Tensor,
}

/// `mean(w · e)` with `e = ‖u_pred − u_tgt‖²` and `w = (e + c)^{−p}`.
pub fn adaptive_loss(u_pred: &Tensor, u_tgt: &Tensor, p: f64, c: f64) -> Result<AdaptiveLoss> {
    u_pred.check_same_shape(u_tgt)?;
    if !(p >= 0.0) || !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("adaptive loss needs p ≥ 0 and c > 0, got p={p} c={c}")));
    }
    let n = u_pred.rows();
    let mut grad = u_pred.axpy(-1.0, u_tgt)?;
    let d = grad.cols();
    let mut errors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut loss = 0.0;
    for row in grad.values_mut().chunks_exact_mut(d) {
        let e: f64 = row.iter().map(|x| x * x).sum();
        let w = if p == 0.0 { 1.0 } else { (e + c).powf(-p) };
        loss += w * e;
        for g in row.iter_mut() {
            *g *= 2.0 * w / n as f64;
        }
        errors.push(e);
        weights.push(w);
    }
    Ok(AdaptiveLoss { loss: loss / n as f64, errors, weights, grad })
}

/// Loss and parameter gradients for one batch. With `cached_target` the
/// target is taken as given; otherwise it is recomputed in the same pass.
#[allow(clippy::too_many_arguments)]
pub fn meanflow_loss_gradients(
    model: &MeanFlowModel,
    z_t: &Tensor,
    r: &[f64],
    t: &[f64],
    v: &Tensor,
    classes: Classes<'_>,
    loss_cfg: &LossConfig,
    cached_target: Option<&Tensor>,
) -> Result<(f64, MlpGrads)> {
    let (prediction, target, cache) = match cached_target {
        Some(target) => {
            let input = assemble_input(z_t, &[r, t], classes, model.num_classes)?;
            let (pred, cache) = model.net.forward_cached(&input)?;
            (pred, target.clone(), cache)
        }
        None => {
            let p = target_pass(model, z_t, r, t, v, classes)?;
            (p.prediction, p.target, p.cache)
        }
    };
    let loss = adaptive_loss(&prediction, &target, loss_cfg.p, loss_cfg.c)?;
    let (grads, _) = model.net.backward(&cache, &loss.grad)?;
    Ok((loss.loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFlowTrainConfig {
    pub iters: u64,
    pub batch: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub time: TimeSamplerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub velocity_source: VelocitySource,
    #[serde(default = "default_class_dropout")]
    pub class_dropout: f64,
    /// Enables the guided second stage (conditional tasks only).
    #[serde(default)]
    pub cfg: Option<CfgConfig>,
}

fn default_class_dropout() -> f64 {
    0.1
}

impl Default for MeanFlowTrainConfig {
    fn default() -> Self {
        MeanFlowTrainConfig {
            iters: 10_000,
            batch: 1024,
            adam: AdamConfig::default(),
            time: TimeSamplerConfig::default(),
            loss: LossConfig::default(),
            velocity_source: VelocitySource::Conditional,
            class_dropout: default_class_dropout(),
            cfg: None,
        }
    }
}

impl MeanFlowTrainConfig {
    /// Step (1-based) at which guided targets take over, if ever.
    pub fn guided_from(&self) -> Option<u64> {
        self.cfg.map(|c| (c.stage_split * self.iters as f64).floor() as u64 + 1).filter(|&s| s <= self.iters)
    }
}

/// Trains a mean-flow model on couplings from `source`. `flow` is required
/// when targets use a frozen flow velocity or guidance.
pub fn train_meanflow(
    source: &CouplingSource<'_>,
    spec: &NetSpec,
    cfg: &MeanFlowTrainConfig,
    flow: Option<&FlowModel>,
    seed: u64,
    mut snapshots: Option<Snapshots<'_, MeanFlowModel>>,
) -> Result<(MeanFlowModel, LossTrace)> {
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "mean-flow training needs iters > 0 and batch > 0, got {} and {}",
            cfg.iters, cfg.batch
        )));
    }
    cfg.time.validate()?;
    let needs_flow = cfg.velocity_source == VelocitySource::Flow || cfg.cfg.is_some();
    if needs_flow && flow.is_none() {
        return Err(Error::Config("frozen flow model required for this velocity source".into()));
    }
    if let Some(g) = &cfg.cfg {
        g.validate()?;
        if source.num_classes() == 0 {
            return Err(Error::Config("guidance requires class-labelled couplings".into()));
        }
    }
    let d = source.dim();
    let mut model = MeanFlowModel::init(spec, d, source.num_classes(), &mut stream(seed, "mf-init", 0))?;
    let mut adam = AdamState::new(cfg.adam, &model.net.parameters());
    let mut rng = stream(seed, "mf-batches", 0);
    let mut trace = LossTrace::default();
    let guided_from = cfg.guided_from();
    let b = cfg.batch;

    for step in 1..=cfg.iters {
        let batch = source.draw(b, &mut rng)?;
        let pairs: Vec<TimePair> = (0..b).map(|_| sample_time_pair(&cfg.time, &mut rng)).collect();
        let r: Vec<f64> = pairs.iter().map(|p| p.r).collect();
        let t: Vec<f64> = pairs.iter().map(|p| p.t).collect();
        let classes = drop_classes(batch.classes.as_deref(), cfg.class_dropout, &mut rng);
        let z_t = batch.interpolate(&t)?;
        let mut v = match (cfg.velocity_source, flow) {
            (VelocitySource::Flow, Some(f)) => f.velocity_at(&z_t, &t, classes.as_deref())?,
            _ => batch.z.axpy(-1.0, &batch.x)?,
        };
        if let (Some(g), Some(f), Some(labels)) = (&cfg.cfg, flow, &classes) {
            if guided_from.is_some_and(|s| step >= s) {
                let (omegas, kappas): (Vec<f64>, Vec<f64>) = (0..b).map(|_| g.sample(&mut rng)).unzip();
                let guided = cfg::cfg_mix(f, &model, &z_t, &t, labels, &omegas, &kappas)?;
                // Label-dropped rows keep the unguided velocity.
                for (i, label) in labels.iter().enumerate() {
                    if label.is_some() {
                        v.row_mut(i).copy_from_slice(guided.row(i));
                    }
                }
            }
        }
        let (loss, grads) = meanflow_loss_gradients(&model, &z_t, &r, &t, &v, classes.as_deref(), &cfg.loss, None)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("mean-flow loss at step {step}")));
        }
        trace.push(loss);
        model.net.apply_adam(&mut adam, &grads)?;
        Snapshots::maybe_fire(&mut snapshots, step, cfg.iters, &model)?;
    }
    Ok((model, trace))
}

/// `z − u(z, 0, 1)`: one network evaluation per row.
pub fn one_step_sample(model: &MeanFlowModel, z: &Tensor, classes: Classes<'_>, nfe: &NfeCounter) -> Result<Tensor> {
    let n = z.rows();
    let u = model.mean_velocity(z, &vec![0.0; n], &vec![1.0; n], classes)?;
    nfe.add(n as u64);
    z.axpy(-1.0, &u)
}

/// Average of the instantaneous velocity along the Euler path from `t` down
/// to `r` in `n_quad` steps, starting from `z_start` at time `t`.
pub fn mean_velocity_quadrature_oracle<F: VelocityField + ?Sized>(
    field: &F,
    z_start: &Tensor,
    r: f64,
    t: f64,
    n_quad: usize,
    classes: Classes<'_>,
    nfe: &NfeCounter,
) -> Result<Tensor> {
    if !(r < t) || n_quad < 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature needs r < t and n_quad ≥ 2, got r={r} t={t} n={n_quad}"
        )));
    }
    let h = (t - r) / n_quad as f64;
    let mut state = z_start.clone();
    let mut sum = Tensor::zeros(z_start.shape());
    for k in 0..n_quad {
        let tau = t - (t - r) * k as f64 / n_quad as f64;
        let v = field.velocity(&state, tau, classes)?;
        nfe.add(state.rows() as u64);
        sum = sum.axpy(1.0, &v)?;
        state = state.axpy(-h, &v)?;
        state.ensure_finite("quadrature state")?;
    }
    Ok(sum.scale(1.0 / n_quad as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    fn random_net(seed: u64) -> MeanFlowModel {
        MeanFlowModel::init(&NetSpec { hidden: vec![8, 8], activation: Activation::Tanh }, 2, 0, &mut seeded(seed))
            .unwrap()
    }

    #[test]
    fn constant_model_target_is_velocity() {
        let m = MeanFlowModel::constant(&[1.0, 2.0]);
        let z = Tensor::matrix(2, 2, vec![0.5, 0.5, -1.0, 3.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![4.0, -1.0, 0.25, 2.0]).unwrap();
        let tgt = meanflow_target(&m, &z, &[0.1, 0.0], &[0.9, 1.0], &v, None).unwrap();
        assert_eq!(tgt, v);
    }

    #[test]
    fn linear_model_target_by_hand() {
        // u = A z + b_r r + b_t t + b, so du/dt along (v, 0, 1) is A v + b_t.
        let a = [1.0, 2.0, -1.0, 0.5];
        let m = MeanFlowModel::linear(&a, &[3.0, 3.0], &[0.5, -2.0], &[0.1, 0.2]).unwrap();
        let z = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let v = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let (r, t) = (0.25, 0.75);
        let jvp = [1.0 * 2.0 + 2.0 * 1.0 + 0.5, -2.0 + 0.5 - 2.0];
        let want = [2.0 - 0.5 * jvp[0], 1.0 - 0.5 * jvp[1]];
        let got = meanflow_target(&m, &z, &[r], &[t], &v, None).unwrap();
        for (g, w) in got.values().iter().zip(want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn bad_time_order_rejected() {
        let m = MeanFlowModel::constant(&[0.0]);
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(meanflow_target(&m, &z, &[0.6], &[0.5], &z, None).is_err());
    }

    #[test]
    fn adaptive_loss_hand_values() {
        let pred = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let tgt = Tensor::zeros(&[1, 3]);
        let l = adaptive_loss(&pred, &tgt, 0.5, 1.0).unwrap();
        assert_eq!(l.errors, vec![3.0]);
        assert_eq!(l.weights, vec![0.5]);
        assert_eq!(l.loss, 1.5);
        let mse = adaptive_loss(&pred, &tgt, 0.0, 1e-3).unwrap();
        assert_eq!(mse.loss, 3.0);
        assert_eq!(adaptive_loss(&pred, &pred, 0.5, 1e-3).unwrap().loss, 0.0);
        assert!(adaptive_loss(&pred, &tgt, -1.0, 1e-3).is_err());
    }

    #[test]
    fn adaptive_loss_gradient_matches_finite_difference_with_frozen_weight() {
        let pred = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let tgt = Tensor::matrix(2, 2, vec![0.0, 0.5, 1.0, 1.0]).unwrap();
        let l = adaptive_loss(&pred, &tgt, 0.5, 1e-3).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut bumped = pred.clone();
            bumped.values_mut()[k] += h;
            let row = k / 2;
            let e: f64 = bumped.row(row).iter().zip(tgt.row(row)).map(|(a, b)| (a - b).powi(2)).sum();
            let fd = (l.weights[row] * (e - l.errors[row])) / 2.0 / h;
            assert!((fd - l.grad.values()[k]).abs() < 1e-5, "{k}: {fd} vs {}", l.grad.values()[k]);
        }
    }

    #[test]
    fn stop_gradient_cached_and_recomputed_agree() {
        let m = random_net(11);
        let mut rng = seeded(12);
        let z = Tensor::new(vec![16, 2], (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let v = Tensor::new(vec![16, 2], (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let pairs: Vec<TimePair> = (0..16).map(|_| sample_time_pair(&TimeSamplerConfig::default(), &mut rng)).collect();
        let r: Vec<f64> = pairs.iter().map(|p| p.r).collect();
        let t: Vec<f64> = pairs.iter().map(|p| p.t).collect();
        let cfg = LossConfig::default();
        let target = meanflow_target(&m, &z, &r, &t, &v, None).unwrap();
        let (l1, g1) = meanflow_loss_gradients(&m, &z, &r, &t, &v, None, &cfg, None).unwrap();
        let (l2, g2) = meanflow_loss_gradients(&m, &z, &r, &t, &v, None, &cfg, Some(&target)).unwrap();
        assert!((l1 - l2).abs() <= 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_step_sample_of_constant_model() {
        let m = MeanFlowModel::constant(&[1.0, -1.0]);
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        let nfe = NfeCounter::new();
        let x = one_step_sample(&m, &z, None, &nfe).unwrap();
        assert_eq!(x.values(), &[-1.0, 1.0, 4.0, 6.0]);
        assert_eq!(nfe.get(), 2);
    }

    #[test]
    fn quadrature_oracle_constant_and_linear() {
        let nfe = NfeCounter::new();
        let c = FlowModel::constant(&[2.0, -3.0]);
        let z = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let u = mean_velocity_quadrature_oracle(&c, &z, 0.2, 0.7, 10, None, &nfe).unwrap();
        assert_eq!(u.values(), &[2.0, -3.0]);

        // v = z has z(τ) = z(1)·e^{τ−1}; its average over [0, 1] is z(1)(1 − 1/e).
        let lin = FlowModel::linear(&[1.0], &[0.0], &[0.0]).unwrap();
        let z = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let exact = 1.0 - (-1.0f64).exp();
        let err =
            |n| (mean_velocity_quadrature_oracle(&lin, &z, 0.0, 1.0, n, None, &nfe).unwrap().values()[0] - exact).abs();
        assert!(err(100) < 1.0 / 100.0);
        assert!(err(1000) < err(100) / 5.0);
        assert!(mean_velocity_quadrature_oracle(&lin, &z, 0.5, 0.5, 10, None, &nfe).is_err());
    }

    #[test]
    fn training_on_single_coupling_overfits() {
        use crate::rectflow::{Coupling, CouplingSet, Provenance};
        let set = CouplingSet::new(vec![Coupling::new(vec![1.0, -1.0], vec![0.5, 0.5], None)], Provenance::default());
        let cfg = MeanFlowTrainConfig { iters: 400, batch: 32, ..MeanFlowTrainConfig::default() };
        let spec = NetSpec { hidden: vec![16, 16], activation: Activation::Tanh };
        let (_, trace) = train_meanflow(&CouplingSource::Dataset(&set), &spec, &cfg, None, 1, None).unwrap();
        let (head, tail) = trace.head_tail_means(20);
        assert!(tail < 0.05 * head, "{head} -> {tail}");
    }

    #[test]
    fn flow_source_without_flow_rejected() {
        let task = crate::dist::ToyTask::imbalanced_toy();
        let cfg = MeanFlowTrainConfig { velocity_source: VelocitySource::Flow, ..MeanFlowTrainConfig::default() };
        let r = train_meanflow(&CouplingSource::Independent(&task), &NetSpec::default(), &cfg, None, 0, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn equal_times_return_velocity_bitwise(seed in 0u64..1000, t in 0.0f64..=1.0, vals in prop::array::uniform4(-1e3f64..1e3)) {
            let m = random_net(seed);
            let z = Tensor::matrix(1, 2, vals[..2].to_vec()).unwrap();
            let v = Tensor::matrix(1, 2, vals[2..].to_vec()).unwrap();
            let tgt = meanflow_target(&m, &z, &[t], &[t], &v, None).unwrap();
            prop_assert_eq!(tgt.values()[0].to_bits(), v.values()[0].to_bits());
            prop_assert_eq!(tgt.values()[1].to_bits(), v.values()[1].to_bits());
        }
    }
}
