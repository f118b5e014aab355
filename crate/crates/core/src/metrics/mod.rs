//! Sample-quality scalars, (t, r) loss heatmaps, distance/error histograms,
//! FLOP accounting and report/figure export.

mod budget;
mod heatmap;
mod histogram;
mod report;
pub mod svg;

pub use budget::{
    flops_estimate, sample_flops, train_flops, BudgetLedger, FlopsBreakdown, PassCounts, Phase, PhaseCounts,
    FLOW_STEP_COST, GUIDED_EXTRA_FORWARDS, MEANFLOW_STEP_COST,
};
pub use heatmap::{loss_heatmap, Heatmap, HeatmapCell};
pub use histogram::{distance_error_histogram, histogram_from_errors, DistanceHistogram, HistogramBin};
pub use report::{EvalMetrics, EvalReport};

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::dist::GaussianMixture;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Angle in `[0, π]` between two vectors.
pub fn angular_error(u: &[f64], reference: &[f64]) -> Result<f64> {
    if u.len() != reference.len() {
        return Err(Error::Shape(format!("angle between {}- and {}-vectors", u.len(), reference.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nr = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nr < 1e-12 {
        return Err(Error::UndefinedAngle);
    }
    let dot: f64 = u.iter().zip(reference).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nr)).clamp(-1.0, 1.0).acos())
}

/// Fraction of rows whose target log-density is below `threshold`.
pub fn outlier_rate(samples: &Tensor, target: &GaussianMixture, threshold: f64) -> f64 {
    if samples.rows() == 0 {
        return 0.0;
    }
    let below = samples.iter_rows().filter(|x| target.log_density(x) < threshold).count();
    below as f64 / samples.rows() as f64
}

/// `2 E‖A − B‖ − E‖A − A′‖ − E‖B − B′‖` over all pairs (diagonal included).
///
/// With `max_points`, larger sets are first reduced to a seeded random subset
/// of that size.
pub fn energy_distance<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, max_points: Option<usize>, rng: &mut R) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("energy distance of an empty set".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("point sets of width {} and {}", a.cols(), b.cols())));
    }
    let a = subsample(a, max_points, rng)?;
    let b = subsample(b, max_points, rng)?;
    let ab = mean_pair_distance(&a, &b);
    let aa = mean_pair_distance(&a, &a);
    let bb = mean_pair_distance(&b, &b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

fn subsample<R: Rng + ?Sized>(x: &Tensor, max_points: Option<usize>, rng: &mut R) -> Result<Tensor> {
    match max_points {
        Some(m) if x.rows() > m => {
            let mut idx = sample_indices(rng, x.rows(), m).into_vec();
            idx.sort_unstable();
            let values = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            Tensor::new(vec![m, x.cols()], values)
        }
        _ => Ok(x.clone()),
    }
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for p in a.iter_rows() {
        let mut row = 0.0;
        for q in b.iter_rows() {
            row += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
        total += row;
    }
    total / (a.rows() as f64 * b.rows() as f64)
}
