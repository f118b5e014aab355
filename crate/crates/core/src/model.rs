//! Network specs and input assembly shared by flow and mean-flow models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::Tensor;

/// Hidden-layer layout of a model; input and output widths come from the task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { hidden: vec![64, 64, 64], activation: Activation::Tanh }
    }
}

impl NetSpec {
    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// Per-row class labels; `None` rows are evaluated unconditionally.
pub type Classes<'a> = Option<&'a [Option<usize>]>;

/// Concatenates `[state, scalar columns..., one-hot(class)]` per row.
pub(crate) fn assemble_input(
    state: &Tensor,
    scalars: &[&[f64]],
    classes: Classes<'_>,
    num_classes: usize,
) -> Result<Tensor> {
    let n = state.rows();
    let d = state.cols();
    if scalars.iter().any(|s| s.len() != n) {
        return Err(Error::Shape("time column length differs from batch".into()));
    }
    if let Some(c) = classes {
        if c.len() != n {
            return Err(Error::Shape(format!("{} class labels for batch of {n}", c.len())));
        }
        if num_classes == 0 && c.iter().any(Option::is_some) {
            return Err(Error::Config("class label given to an unconditional model".into()));
        }
    }
    let width = d + scalars.len() + num_classes;
    let mut values = Vec::with_capacity(n * width);
    for i in 0..n {
        values.extend_from_slice(state.row(i));
        values.extend(scalars.iter().map(|s| s[i]));
        let start = values.len();
        values.resize(start + num_classes, 0.0);
        if let Some(Some(k)) = classes.map(|c| c[i]) {
            if k >= num_classes {
                return Err(Error::InvalidArgument(format!("class {k} out of range {num_classes}")));
            }
            values[start + k] = 1.0;
        }
    }
    Tensor::new(vec![n, width], values)
}

/// Tangent matching [`assemble_input`]: `[state_tangent, scalar tangents..., 0...]`.
pub(crate) fn assemble_tangent(state_tangent: &Tensor, scalar_tangents: &[f64], num_classes: usize) -> Result<Tensor> {
    let n = state_tangent.rows();
    let d = state_tangent.cols();
    let width = d + scalar_tangents.len() + num_classes;
    let mut values = Vec::with_capacity(n * width);
    for i in 0..n {
        values.extend_from_slice(state_tangent.row(i));
        values.extend_from_slice(scalar_tangents);
        values.resize(values.len() + num_classes, 0.0);
    }
    Tensor::new(vec![n, width], values)
}

/// A time-dependent vector field that can drive the ODE integrators.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Velocity at every row of `state` at the shared time `t`.
    fn velocity(&self, state: &Tensor, t: f64, classes: Classes<'_>) -> Result<Tensor>;
}

/// Shared counter of per-sample network evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter(std::sync::atomic::AtomicU64);

impl NfeCounter {
    pub fn new() -> Self {
        NfeCounter::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, std::sync::atomic::Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(std::sync::atomic::Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembles_state_times_and_one_hot() {
        let z = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = [0.5, 0.25];
        let classes = [Some(1), None];
        let x = assemble_input(&z, &[&t], Some(&classes), 3).unwrap();
        assert_eq!(x.shape(), &[2, 6]);
        assert_eq!(x.row(0), &[1.0, 2.0, 0.5, 0.0, 1.0, 0.0]);
        assert_eq!(x.row(1), &[3.0, 4.0, 0.25, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_class_for_unconditional_model() {
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(assemble_input(&z, &[&[0.0]], Some(&[Some(0)]), 0).is_err());
    }
}
