use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classes, NfeCounter, VelocityField};
use crate::tensor::Tensor;

/// Fixed-step ODE method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        }
    }

    /// Field evaluations per step.
    pub fn evals_per_step(self) -> u64 {
        match self {
            Solver::Euler => 1,
            Solver::Heun => 2,
        }
    }
}

/// Integration direction; `t = 0` is data and `t = 1` is noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NoiseToData,
    DataToNoise,
}

/// Drives the fixed-step loop, handing every intermediate state to `visit`
/// (step index starting at 1).
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_with<F: VelocityField + ?Sized>(
    field: &F,
    start: &Tensor,
    steps: usize,
    solver: Solver,
    direction: Direction,
    classes: Classes<'_>,
    nfe: &NfeCounter,
    mut visit: impl FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ODE step count must be at least 1".into()));
    }
    if start.cols() != field.dim() {
        return Err(Error::Shape(format!("state width {} vs field dimension {}", start.cols(), field.dim())));
    }
    let n = start.rows() as u64;
    let h = 1.0 / steps as f64;
    // Noise-to-data walks t from 1 down to 0, so the displacement is −h·v.
    let (sign, time_at): (f64, Box<dyn Fn(usize) -> f64>) = match direction {
        Direction::NoiseToData => (-1.0, Box::new(move |k| 1.0 - k as f64 / steps as f64)),
        Direction::DataToNoise => (1.0, Box::new(move |k| k as f64 / steps as f64)),
    };
    let mut state = start.clone();
    for k in 0..steps {
        let t0 = time_at(k);
        let t1 = time_at(k + 1);
        let v0 = field.velocity(&state, t0, classes)?;
        nfe.add(n);
        state = match solver {
            Solver::Euler => state.axpy(sign * h, &v0)?,
            Solver::Heun => {
                let predicted = state.axpy(sign * h, &v0)?;
                let v1 = field.velocity(&predicted, t1, classes)?;
                nfe.add(n);
                let mut next = state;
                for ((s, a), b) in next.values_mut().iter_mut().zip(v0.values()).zip(v1.values()) {
                    *s += sign * 0.5 * h * (a + b);
                }
                next
            }
        };
        visit(k + 1, &state)?;
    }
    Ok(state)
}

/// Integrates `dz/dt = v(z, t)` across `[0, 1]` in `steps` fixed steps.
///
/// Aborts on the first step that produces a non-finite state.
pub fn integrate_ode<F: VelocityField + ?Sized>(
    field: &F,
    z: &Tensor,
    steps: usize,
    solver: Solver,
    direction: Direction,
    classes: Classes<'_>,
    nfe: &NfeCounter,
) -> Result<Tensor> {
    integrate_with(field, z, steps, solver, direction, classes, nfe, |k, s| {
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("ODE state at step {k} of {steps}")))
        }
    })
}

/// Like [`integrate_ode`] but also returns every state, starting point first.
pub fn integrate_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    z: &Tensor,
    steps: usize,
    solver: Solver,
    direction: Direction,
    classes: Classes<'_>,
    nfe: &NfeCounter,
) -> Result<Vec<Tensor>> {
    let mut states = vec![z.clone()];
    integrate_with(field, z, steps, solver, direction, classes, nfe, |k, s| {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("ODE state at step {k} of {steps}")));
        }
        states.push(s.clone());
        Ok(())
    })?;
    Ok(states)
}
