use rand::Rng;

use crate::dist::euclidean;
use crate::error::{Error, Result};
use crate::model::{Classes, NfeCounter, VelocityField};
use crate::rectflow::coupling::CouplingSet;
use crate::rectflow::ode::{integrate_trajectory, Direction, Solver};
use crate::tensor::Tensor;

/// Largest `‖x′ − x″‖ / ‖z′ − z″‖` over `n_pairs` random pairs of couplings.
/// Pairs whose noise points nearly coincide are skipped.
pub fn empirical_lipschitz<R: Rng + ?Sized>(set: &CouplingSet, n_pairs: usize, rng: &mut R) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two couplings".into()));
    }
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&set.couplings[i], &set.couplings[j]);
        let dz = euclidean(&a.z, &b.z);
        if dz < 1e-12 {
            continue;
        }
        best = best.max(euclidean(&a.x, &b.x) / dz);
    }
    Ok(best)
}

/// Mean perpendicular distance of the interior states from the chord joining
/// the first and last, divided by the chord length. Zero for a degenerate chord.
pub fn trajectory_deviation(states: &[&[f64]]) -> f64 {
    if states.len() < 3 {
        return 0.0;
    }
    let (start, end) = (states[0], states[states.len() - 1]);
    let chord: Vec<f64> = end.iter().zip(start).map(|(e, s)| e - s).collect();
    let len = chord.iter().map(|c| c * c).sum::<f64>().sqrt();
    if len < 1e-12 {
        return 0.0;
    }
    let unit: Vec<f64> = chord.iter().map(|c| c / len).collect();
    let interior = &states[1..states.len() - 1];
    let total: f64 = interior
        .iter()
        .map(|p| {
            let rel: Vec<f64> = p.iter().zip(start).map(|(a, b)| a - b).collect();
            let along: f64 = rel.iter().zip(&unit).map(|(r, u)| r * u).sum();
            rel.iter().zip(&unit).map(|(r, u)| (r - along * u).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    total / interior.len() as f64 / len
}

/// Average [`trajectory_deviation`] of the Euler paths from each row of `z`
/// (at `t = 1`) down to `t = 0`.
pub fn straightness_deviation<F: VelocityField + ?Sized>(
    field: &F,
    z: &Tensor,
    steps: usize,
    classes: Classes<'_>,
    nfe: &NfeCounter,
) -> Result<f64> {
    if steps < 2 {
        return Err(Error::InvalidArgument("straightness needs at least 2 steps".into()));
    }
    let states = integrate_trajectory(field, z, steps, Solver::Euler, Direction::NoiseToData, classes, nfe)?;
    Ok(mean_row_deviation(&states))
}

pub(crate) fn mean_row_deviation(states: &[Tensor]) -> f64 {
    let n = states[0].rows();
    let total: f64 = (0..n)
        .map(|i| {
            let path: Vec<&[f64]> = states.iter().map(|s| s.row(i)).collect();
            trajectory_deviation(&path)
        })
        .sum();
    total / n as f64
}
