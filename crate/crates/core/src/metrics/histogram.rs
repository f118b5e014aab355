use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanflow::MeanFlowModel;
use crate::metrics::angular_error;
use crate::rectflow::{nearest_rank_percentile, CouplingSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// Mean angular error in radians; NaN for empty bins.
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub bins: Vec<HistogramBin>,
    pub p90_distance: f64,
    /// Mean error of the couplings in the lowest and highest distance deciles.
    pub bottom_decile_error: f64,
    pub top_decile_error: f64,
    /// Couplings skipped because the angle was undefined.
    pub skipped: u64,
}

/// Bins couplings by `‖x − z‖` and reports, per bin, the mean angle between
/// `u(z, 0, 1)` and `z − x`.
pub fn distance_error_histogram(model: &MeanFlowModel, set: &CouplingSet, n_bins: usize) -> Result<DistanceHistogram> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("histogram of an empty coupling set".into()));
    }
    let batch = set.head_batch(set.len())?;
    let n = set.len();
    let labels: Option<Vec<Option<usize>>> = batch.classes.as_ref().map(|c| c.iter().map(|&k| Some(k)).collect());
    let u = model.mean_velocity(&batch.z, &vec![0.0; n], &vec![1.0; n], labels.as_deref())?;
    let mut distances = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    let mut skipped = 0;
    for (i, c) in set.couplings.iter().enumerate() {
        let disp: Vec<f64> = c.z.iter().zip(&c.x).map(|(z, x)| z - x).collect();
        match angular_error(u.row(i), &disp) {
            Ok(a) => {
                distances.push(c.distance);
                errors.push(a);
            }
            Err(Error::UndefinedAngle) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut hist = histogram_from_errors(&distances, &errors, n_bins)?;
    hist.skipped = skipped;
    Ok(hist)
}

/// Equal-width distance bins between the smallest and largest distance.
pub fn histogram_from_errors(distances: &[f64], errors: &[f64], n_bins: usize) -> Result<DistanceHistogram> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if distances.len() != errors.len() || distances.is_empty() {
        return Err(Error::InvalidArgument("distances and errors must be non-empty and equally long".into()));
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0u64; n_bins];
    for (&d, &e) in distances.iter().zip(errors) {
        let k = (((d - lo) / width) as usize).min(n_bins - 1);
        sums[k] += e;
        counts[k] += 1;
    }
    let bins = (0..n_bins)
        .map(|k| HistogramBin {
            lo: lo + k as f64 * width,
            hi: lo + (k + 1) as f64 * width,
            count: counts[k],
            mean_error: if counts[k] == 0 { f64::NAN } else { sums[k] / counts[k] as f64 },
        })
        .collect();

    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let decile = (distances.len() / 10).max(1);
    let mean_of = |idx: &[usize]| idx.iter().map(|&i| errors[i]).sum::<f64>() / idx.len() as f64;
    Ok(DistanceHistogram {
        bins,
        p90_distance: nearest_rank_percentile(distances, 90.0)?,
        bottom_decile_error: mean_of(&order[..decile]),
        top_decile_error: mean_of(&order[order.len() - decile..]),
        skipped: 0,
    })
}

impl DistanceHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance_lo,distance_hi,count,mean_angular_error,above_p90\n");
        for b in &self.bins {
            let err = if b.count == 0 { String::new() } else { format!("{:?}", b.mean_error) };
            out += &format!("{:?},{:?},{},{err},{}\n", b.lo, b.hi, b.count, u8::from(b.lo >= self.p90_distance));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rectflow::{Coupling, Provenance};

    #[test]
    fn errors_proportional_to_distance_give_monotone_bins() {
        let distances: Vec<f64> = (0..1000).map(|i| 1.0 + (i as f64 * 0.618).fract() * 9.0).collect();
        let errors: Vec<f64> = distances.iter().map(|d| 0.05 * d).collect();
        let h = histogram_from_errors(&distances, &errors, 10).unwrap();
        for w in h.bins.windows(2) {
            assert!(w[1].mean_error > w[0].mean_error);
        }
        // Direct per-bin averages.
        let top = h.bins.last().unwrap().hi;
        for b in &h.bins {
            let inside: Vec<f64> = distances
                .iter()
                .zip(&errors)
                .filter(|(d, _)| **d >= b.lo && (**d < b.hi || b.hi == top))
                .map(|(_, e)| *e)
                .collect();
            let direct = inside.iter().sum::<f64>() / inside.len() as f64;
            assert!((direct - b.mean_error).abs() < 1e-12);
        }
        assert!(h.top_decile_error > h.bottom_decile_error);
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<u64>(), 1000);
    }

    #[test]
    fn perfect_model_on_straight_couplings() {
        let c = [2.0, 1.0];
        let couplings = (0..50)
            .map(|i| {
                let x = vec![i as f64, 0.5 * i as f64];
                Coupling::new(x.clone(), vec![x[0] + c[0] * (1.0 + i as f64), x[1] + c[1] * (1.0 + i as f64)], None)
            })
            .collect();
        let set = CouplingSet::new(couplings, Provenance::default());
        let h = distance_error_histogram(&MeanFlowModel::constant(&c), &set, 5).unwrap();
        assert!(h.bins.iter().filter(|b| b.count > 0).all(|b| b.mean_error < 1e-7));
        assert!(h.to_csv().starts_with("distance_lo"));
    }

    #[test]
    fn too_few_bins_rejected() {
        assert!(histogram_from_errors(&[1.0], &[0.0], 1).is_err());
    }
}
