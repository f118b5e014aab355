//! Rectified-flow velocity models: training on couplings, ODE integration,
//! reflow coupling generation and distance truncation.

mod coupling;
mod diagnostics;
mod ode;

pub use coupling::{
    generate_couplings, nearest_rank_percentile, truncate_by_distance, Coupling, CouplingBatch, CouplingSet,
    CouplingSource, Provenance, COUPLING_MAGIC, COUPLING_VERSION,
};
pub use diagnostics::{empirical_lipschitz, straightness_deviation, trajectory_deviation};
pub use ode::{integrate_ode, integrate_trajectory, Direction, Solver};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{assemble_input, Classes, NetSpec, VelocityField};
use crate::nn::{Activation, AdamConfig, AdamState, MlpModel};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::trace::{LossTrace, Snapshots};

/// Instantaneous velocity network `v(z_t, t [, class])`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    net: MlpModel,
    dim: usize,
    num_classes: usize,
}

impl FlowModel {
    pub fn new(net: MlpModel, dim: usize, num_classes: usize) -> Result<Self> {
        if net.input_dim() != dim + 1 + num_classes || net.output_dim() != dim {
            return Err(Error::Shape(format!(
                "flow net {:?} does not fit dim {dim} with {num_classes} classes",
                net.layer_sizes()
            )));
        }
        Ok(FlowModel { net, dim, num_classes })
    }

    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, dim: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        let sizes = spec.layer_sizes(dim + 1 + num_classes, dim);
        FlowModel::new(MlpModel::init(&sizes, spec.activation, rng)?, dim, num_classes)
    }

    /// `v ≡ c`: a single affine layer with zero weights and bias `c`.
    pub fn constant(c: &[f64]) -> Self {
        let d = c.len();
        let w = Tensor::zeros(&[d, d + 1]);
        let b = Tensor::new(vec![d], c.to_vec()).expect("nonempty velocity");
        let net = MlpModel::new(vec![d + 1, d], Activation::Tanh, vec![w], vec![b]).expect("consistent shapes");
        FlowModel { net, dim: d, num_classes: 0 }
    }

    /// `v(z, t) = A z + a t + b` with `A` given row-major as `d × d`.
    pub fn linear(state_weights: &[f64], time_weights: &[f64], bias: &[f64]) -> Result<Self> {
        let d = time_weights.len();
        if state_weights.len() != d * d || bias.len() != d {
            return Err(Error::Shape("linear field needs d×d, d and d coefficients".into()));
        }
        let mut w = Vec::with_capacity(d * (d + 1));
        for i in 0..d {
            w.extend_from_slice(&state_weights[i * d..(i + 1) * d]);
            w.push(time_weights[i]);
        }
        let net = MlpModel::new(
            vec![d + 1, d],
            Activation::Tanh,
            vec![Tensor::new(vec![d, d + 1], w)?],
            vec![Tensor::new(vec![d], bias.to_vec())?],
        )?;
        FlowModel::new(net, d, 0)
    }

    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Velocity with a per-row time.
    pub fn velocity_at(&self, z_t: &Tensor, t: &[f64], classes: Classes<'_>) -> Result<Tensor> {
        let input = assemble_input(z_t, &[t], classes, self.num_classes)?;
        self.net.forward(&input)
    }
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, state: &Tensor, t: f64, classes: Classes<'_>) -> Result<Tensor> {
        let times = vec![t; state.rows()];
        self.velocity_at(state, &times, classes)
    }
}

/// Training-time distribution of `t` for the flow regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowTimeSampling {
    #[default]
    Uniform,
    /// Density proportional to `exp(a t) + exp(−a t)` on `[0, 1]`.
    UShaped { a: f64 },
}

impl FlowTimeSampling {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let xi: f64 = rng.gen();
        match *self {
            FlowTimeSampling::Uniform => xi,
            FlowTimeSampling::UShaped { a } => crate::meanflow::u_shaped_inverse_cdf(xi, a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub iters: u64,
    pub batch: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub time: FlowTimeSampling,
    /// Fraction of rows trained without their class label.
    #[serde(default = "default_class_dropout")]
    pub class_dropout: f64,
}

fn default_class_dropout() -> f64 {
    0.1
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            iters: 10_000,
            batch: 1024,
            adam: AdamConfig::default(),
            time: FlowTimeSampling::Uniform,
            class_dropout: default_class_dropout(),
        }
    }
}

pub(crate) fn drop_classes<R: Rng + ?Sized>(
    classes: Option<&[usize]>,
    dropout: f64,
    rng: &mut R,
) -> Option<Vec<Option<usize>>> {
    classes.map(|c| c.iter().map(|&k| if rng.gen::<f64>() < dropout { None } else { Some(k) }).collect())
}

/// Regresses `v(z_t, t)` onto `z − x` along straight interpolations of the
/// couplings drawn from `source`.
pub fn train_rectified_flow(
    source: &CouplingSource<'_>,
    spec: &NetSpec,
    cfg: &FlowTrainConfig,
    seed: u64,
    mut snapshots: Option<Snapshots<'_, FlowModel>>,
) -> Result<(FlowModel, LossTrace)> {
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "flow training needs iters > 0 and batch > 0, got {} and {}",
            cfg.iters, cfg.batch
        )));
    }
    let d = source.dim();
    let mut model = FlowModel::init(spec, d, source.num_classes(), &mut stream(seed, "flow-init", 0))?;
    let mut adam = AdamState::new(cfg.adam, &model.net.parameters());
    let mut rng = stream(seed, "flow-batches", 0);
    let mut trace = LossTrace::default();
    let b = cfg.batch;

    for step in 1..=cfg.iters {
        let batch = source.draw(b, &mut rng)?;
        let times: Vec<f64> = (0..b).map(|_| cfg.time.sample(&mut rng)).collect();
        let classes = drop_classes(batch.classes.as_deref(), cfg.class_dropout, &mut rng);
        let z_t = batch.interpolate(&times)?;
        let target = batch.z.axpy(-1.0, &batch.x)?;

        let input = assemble_input(&z_t, &[&times], classes.as_deref(), model.num_classes)?;
        let (pred, cache) = model.net.forward_cached(&input)?;
        let mut upstream = pred.axpy(-1.0, &target)?;
        let loss = upstream.values().iter().map(|r| r * r).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("flow loss at step {step}")));
        }
        trace.push(loss);
        for g in upstream.values_mut() {
            *g *= 2.0 / b as f64;
        }
        let (grads, _) = model.net.backward(&cache, &upstream)?;
        model.net.apply_adam(&mut adam, &grads)?;
        Snapshots::maybe_fire(&mut snapshots, step, cfg.iters, &model)?;
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ToyTask;
    use crate::model::NfeCounter;

    #[test]
    fn constant_and_linear_fields_evaluate() {
        let c = FlowModel::constant(&[1.0, -1.0]);
        let z = Tensor::matrix(2, 2, vec![5.0, 5.0, -3.0, 0.0]).unwrap();
        let v = c.velocity(&z, 0.3, None).unwrap();
        assert_eq!(v.values(), &[1.0, -1.0, 1.0, -1.0]);

        let lin = FlowModel::linear(&[2.0, 0.0, 0.0, 1.0], &[1.0, 0.0], &[0.0, 0.5]).unwrap();
        let v = lin.velocity(&z, 0.5, None).unwrap();
        assert_eq!(v.values(), &[10.5, 5.5, -5.5, 0.5]);
    }

    #[test]
    fn zero_iterations_rejected() {
        let task = ToyTask::imbalanced_toy();
        let cfg = FlowTrainConfig { iters: 0, ..FlowTrainConfig::default() };
        let err = train_rectified_flow(&CouplingSource::Independent(&task), &NetSpec::default(), &cfg, 0, None);
        assert!(err.is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_reduces_loss() {
        let task = ToyTask::imbalanced_toy();
        let cfg = FlowTrainConfig { iters: 300, batch: 256, ..FlowTrainConfig::default() };
        let spec = NetSpec { hidden: vec![32, 32], activation: Activation::Tanh };
        let src = CouplingSource::Independent(&task);
        let (m1, t1) = train_rectified_flow(&src, &spec, &cfg, 5, None).unwrap();
        let (m2, t2) = train_rectified_flow(&src, &spec, &cfg, 5, None).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        let (head, tail) = t1.head_tail_means(50);
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        let nfe = NfeCounter::new();
        let z = task.sample_prior(8, &mut stream(1, "z", 0)).unwrap();
        let x = integrate_ode(&m1, &z, 20, Solver::Euler, Direction::NoiseToData, None, &nfe).unwrap();
        assert!(x.is_finite());
    }
}
