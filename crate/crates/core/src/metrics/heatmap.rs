use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanflow::{target_and_prediction, MeanFlowModel};
use crate::rectflow::{drop_classes, CouplingSource};

const BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub t_index: usize,
    pub r_index: usize,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

/// Mean and spread of the mean-flow regression error over a `(t, r)` grid.
/// Only cells with `r_index ≤ t_index` can receive samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid_n: usize,
    /// Row-major over `(t_index, r_index)`.
    pub cells: Vec<HeatmapCell>,
}

/// Draws `n_samples` uniform pairs `r ≤ t` with couplings from `source` and
/// bins `‖u(z_t, r, t) − u_tgt‖²` into a `grid_n × grid_n` grid.
pub fn loss_heatmap<R: Rng + ?Sized>(
    model: &MeanFlowModel,
    source: &CouplingSource<'_>,
    grid_n: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Heatmap> {
    if grid_n < 2 {
        return Err(Error::InvalidArgument(format!("heatmap grid must be at least 2, got {grid_n}")));
    }
    let mut sum = vec![0.0; grid_n * grid_n];
    let mut sum_sq = vec![0.0; grid_n * grid_n];
    let mut count = vec![0u64; grid_n * grid_n];
    let bin = |x: f64| ((x * grid_n as f64) as usize).min(grid_n - 1);
    let mut done = 0;
    while done < n_samples {
        let b = BATCH.min(n_samples - done);
        let batch = source.draw(b, rng)?;
        let (mut r, mut t) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for _ in 0..b {
            let (p, q): (f64, f64) = (rng.gen(), rng.gen());
            r.push(p.min(q));
            t.push(p.max(q));
        }
        // Evaluate conditional models on their labels; no dropout.
        let classes = drop_classes(batch.classes.as_deref(), 0.0, rng);
        let z_t = batch.interpolate(&t)?;
        let v = batch.z.axpy(-1.0, &batch.x)?;
        let (target, pred) = target_and_prediction(model, &z_t, &r, &t, &v, classes.as_deref())?;
        for i in 0..b {
            let e: f64 = pred.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
            let k = bin(t[i]) * grid_n + bin(r[i]);
            sum[k] += e;
            sum_sq[k] += e * e;
            count[k] += 1;
        }
        done += b;
    }
    let cells = (0..grid_n * grid_n)
        .map(|k| {
            let n = count[k];
            let (mean, std) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let m = sum[k] / n as f64;
                (m, (sum_sq[k] / n as f64 - m * m).max(0.0).sqrt())
            };
            HeatmapCell { t_index: k / grid_n, r_index: k % grid_n, count: n, mean, std }
        })
        .collect();
    Ok(Heatmap { grid_n, cells })
}

impl Heatmap {
    pub fn cell(&self, t_index: usize, r_index: usize) -> &HeatmapCell {
        &self.cells[t_index * self.grid_n + r_index]
    }

    fn edges(&self, index: usize) -> (f64, f64) {
        let h = 1.0 / self.grid_n as f64;
        (index as f64 * h, (index + 1) as f64 * h)
    }

    pub fn occupied(&self) -> impl Iterator<Item = &HeatmapCell> {
        self.cells.iter().filter(|c| c.count > 0)
    }

    /// Median over occupied cells of the per-cell mean loss.
    pub fn median_cell_mean(&self) -> f64 {
        let mut means: Vec<f64> = self.occupied().map(|c| c.mean).collect();
        if means.is_empty() {
            return f64::NAN;
        }
        means.sort_by(f64::total_cmp);
        let n = means.len();
        if n % 2 == 1 {
            means[n / 2]
        } else {
            0.5 * (means[n / 2 - 1] + means[n / 2])
        }
    }

    /// Sample-weighted mean loss over cells lying entirely in
    /// `t ≥ t_min`, `r ≤ r_max`.
    pub fn region_mean(&self, t_min: f64, r_max: f64) -> f64 {
        let eps = 1e-12;
        let (mut total, mut n) = (0.0, 0u64);
        for c in self.occupied() {
            let (t_lo, _) = self.edges(c.t_index);
            let (_, r_hi) = self.edges(c.r_index);
            if t_lo >= t_min - eps && r_hi <= r_max + eps {
                total += c.mean * c.count as f64;
                n += c.count;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            total / n as f64
        }
    }

    /// One row per cell; empty cells have blank statistics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_lo,t_hi,r_lo,r_hi,count,mean_loss,std_loss\n");
        for c in &self.cells {
            let (t_lo, t_hi) = self.edges(c.t_index);
            let (r_lo, r_hi) = self.edges(c.r_index);
            let stats = if c.count == 0 { ",".to_string() } else { format!("{:?},{:?}", c.mean, c.std) };
            out += &format!("{t_lo:?},{t_hi:?},{r_lo:?},{r_hi:?},{},{stats}\n", c.count);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ToyTask;
    use crate::rectflow::{Coupling, CouplingSet, Provenance};
    use crate::rng::seeded;

    #[test]
    fn constant_model_matches_analytic_expectation() {
        // u ≡ 0 gives target z − x; on the toy E‖z − x‖² = 12² + 0.4² + 6 + 5.84 = 156.
        let task = ToyTask::imbalanced_toy();
        let model = MeanFlowModel::constant(&[0.0, 0.0]);
        let h = loss_heatmap(&model, &CouplingSource::Independent(&task), 4, 200_000, &mut seeded(0)).unwrap();
        let total: f64 = h.occupied().map(|c| c.mean * c.count as f64).sum::<f64>() / 200_000.0;
        assert!((total - 156.0).abs() < 0.5, "{total}");
        for c in h.occupied() {
            assert!(c.r_index <= c.t_index);
            assert!((c.mean - 156.0).abs() < 3.0, "{c:?}");
        }
        // Direct average for the (3, 0) cell from an independent draw.
        let mut rng = seeded(9);
        let (x, _) = task.sample_data(50_000, &mut rng).unwrap();
        let z = task.sample_prior(50_000, &mut rng).unwrap();
        let direct = z.axpy(-1.0, &x).unwrap().values().iter().map(|v| v * v).sum::<f64>() / 50_000.0;
        assert!((h.cell(3, 0).mean - direct).abs() < 3.0);
    }

    #[test]
    fn exact_model_on_straight_couplings_is_zero() {
        let c = [1.5, -0.5];
        let couplings = (0..64)
            .map(|i| {
                let x = vec![i as f64 * 0.1, -(i as f64) * 0.05];
                let z = vec![x[0] + c[0], x[1] + c[1]];
                Coupling::new(x, z, None)
            })
            .collect();
        let set = CouplingSet::new(couplings, Provenance::default());
        let model = MeanFlowModel::constant(&c);
        let h = loss_heatmap(&model, &CouplingSource::Dataset(&set), 5, 5000, &mut seeded(1)).unwrap();
        assert!(h.occupied().all(|cell| cell.mean < 1e-24));
        assert_eq!(h.occupied().map(|c| c.count).sum::<u64>(), 5000);
        assert!(h.to_csv().lines().count() == 26);
    }

    #[test]
    fn region_and_median_helpers() {
        let mut cells = Vec::new();
        for t in 0..2 {
            for r in 0..2 {
                let count = u64::from(r <= t);
                cells.push(HeatmapCell { t_index: t, r_index: r, count, mean: (t * 2 + r) as f64, std: 0.0 });
            }
        }
        let h = Heatmap { grid_n: 2, cells };
        assert_eq!(h.median_cell_mean(), 2.0);
        assert_eq!(h.region_mean(0.5, 0.5), 2.0);
        assert!(loss_heatmap(
            &MeanFlowModel::constant(&[0.0]),
            &CouplingSource::Independent(&ToyTask::single_gaussian(vec![0.0], 1.0).unwrap()),
            1,
            10,
            &mut seeded(0)
        )
        .is_err());
    }
}
