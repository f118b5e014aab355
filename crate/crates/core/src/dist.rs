//! Isotropic Gaussian mixtures, the toy transport tasks built from them, and
//! the closed-form marginal velocity for Gaussian data under a standard
//! normal prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weighted mixture of isotropic Gaussians in `d` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.weights, raw.means, raw.scales)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(gm: GaussianMixture) -> Self {
        RawMixture { weights: gm.weights, means: gm.means, scales: gm.scales }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, scales: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != scales.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching weights/means/scales, got {}/{}/{}",
                weights.len(),
                means.len(),
                scales.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("mixture means must share a positive dimension".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("mixture scales must be positive".into()));
        }
        Ok(GaussianMixture { weights, means, scales })
    }

    /// All components share one standard deviation.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        let scales = vec![scale; weights.len()];
        GaussianMixture::new(weights, means, scales)
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard_normal(d: usize) -> Self {
        GaussianMixture { weights: vec![1.0], means: vec![vec![0.0; d]], scales: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Draws one point into `out`, returning its component index.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        let k = self.pick_component(rng);
        let s = self.scales[k];
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            let e: f64 = rng.sample(StandardNormal);
            *o = m + s * e;
        }
        k
    }

    /// `n` draws as an `(n, d)` tensor.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        self.sample_labeled(n, rng).map(|(x, _)| x)
    }

    /// `n` draws plus the component index of each.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        let d = self.dim();
        let mut values = vec![0.0; n * d];
        let labels = values.chunks_exact_mut(d).map(|row| self.sample_into(rng, row)).collect();
        Ok((Tensor::new(vec![n, d], values)?, labels))
    }

    /// Log of the mixture density, via log-sum-exp over components.
    pub fn log_density(&self, point: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), s)| {
                let sq: f64 = point.iter().zip(m).map(|(p, mu)| (p - mu) * (p - mu)).sum();
                w.ln() - 0.5 * sq / (s * s) - d * (s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Log-density at distance `k` standard deviations from the closest mean,
    /// along the direction that maximizes distance to the other means.
    ///
    /// Evaluated on a ring of directions around every component; the maximum
    /// over the ring is the contour value, so points below it are farther
    /// than `k` sigma from every mean.
    pub fn sigma_contour_log_density(&self, k: f64) -> f64 {
        let d = self.dim();
        let mut best = f64::NEG_INFINITY;
        let n_dirs = 360;
        for (m, s) in self.means.iter().zip(&self.scales) {
            for j in 0..n_dirs {
                let mut p = m.clone();
                if d == 1 {
                    p[0] += if j % 2 == 0 { k * s } else { -k * s };
                } else {
                    let a = 2.0 * std::f64::consts::PI * j as f64 / n_dirs as f64;
                    p[0] += k * s * a.cos();
                    p[1] += k * s * a.sin();
                }
                let nearest = self
                    .means
                    .iter()
                    .zip(&self.scales)
                    .map(|(mm, ss)| euclidean(&p, mm) / ss)
                    .fold(f64::INFINITY, f64::min);
                if nearest + 1e-9 >= k {
                    best = best.max(self.log_density(&p));
                }
            }
        }
        best
    }

    /// Weighted mean of component means.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `E[z − x | z_t]` for `x ~ N(mu, sigma² I)`, `z ~ N(0, I)` independent and
/// `z_t = (1 − t) x + t z`.
pub fn gaussian_velocity_oracle(mu: &[f64], sigma: f64, t: f64, z_t: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    if mu.len() != z_t.len() {
        return Err(Error::Shape(format!("mu has {} dims, z_t has {}", mu.len(), z_t.len())));
    }
    let s2 = sigma * sigma;
    let var = (1.0 - t) * (1.0 - t) * s2 + t * t;
    if var < 1e-12 {
        return Err(Error::Degenerate(format!("interpolant variance {var:e} at t = {t}, sigma = {sigma}")));
    }
    let gain = (t - (1.0 - t) * s2) / var;
    Ok(mu.iter().zip(z_t).map(|(m, z)| -m + gain * (z - (1.0 - t) * m)).collect())
}

/// A transport problem: data distribution, prior, optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub source: GaussianMixture,
    pub target: GaussianMixture,
    /// Prior is `source` when set, `N(0, I)` otherwise.
    pub prior_is_source: bool,
    /// Class of each target component; enables conditional models.
    #[serde(default)]
    pub class_labels: Option<Vec<usize>>,
}

impl ToyTask {
    pub fn new(
        source: GaussianMixture,
        target: GaussianMixture,
        prior_is_source: bool,
        class_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let task = ToyTask { source, target, prior_is_source, class_labels };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.dim() != self.target.dim() {
            return Err(Error::InvalidArgument(format!(
                "source dim {} != target dim {}",
                self.source.dim(),
                self.target.dim()
            )));
        }
        if let Some(labels) = &self.class_labels {
            if labels.len() != self.target.num_components() {
                return Err(Error::InvalidArgument(format!(
                    "{} class labels for {} target components",
                    labels.len(),
                    self.target.num_components()
                )));
            }
        }
        Ok(())
    }

    /// Balanced source at (−6, ±2), target at (6, ±2) with weight 0.4 on the
    /// upper mode and 0.6 on the lower, unit scale, source used as prior.
    pub fn imbalanced_toy() -> Self {
        let source = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-6.0, 2.0], vec![-6.0, -2.0]], 1.0).unwrap();
        let target = GaussianMixture::isotropic(vec![0.4, 0.6], vec![vec![6.0, 2.0], vec![6.0, -2.0]], 1.0).unwrap();
        ToyTask { source, target, prior_is_source: true, class_labels: None }
    }

    /// Same geometry with class = target component index.
    pub fn imbalanced_toy_conditional() -> Self {
        ToyTask { class_labels: Some(vec![0, 1]), ..ToyTask::imbalanced_toy() }
    }

    /// Single Gaussian data `N(mu, sigma² I)` against a standard normal prior.
    pub fn single_gaussian(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        let d = mu.len();
        let target = GaussianMixture::isotropic(vec![1.0], vec![mu], sigma)?;
        ToyTask::new(GaussianMixture::standard_normal(d), target, false, None)
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Number of classes, zero for unconditional tasks.
    pub fn num_classes(&self) -> usize {
        self.class_labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1)).unwrap_or(0)
    }

    pub fn prior(&self) -> GaussianMixture {
        if self.prior_is_source {
            self.source.clone()
        } else {
            GaussianMixture::standard_normal(self.dim())
        }
    }

    /// Draws `n` data points and, for conditional tasks, their classes.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Option<Vec<usize>>)> {
        let (x, comps) = self.target.sample_labeled(n, rng)?;
        let classes = self.class_labels.as_ref().map(|labels| comps.iter().map(|&k| labels[k]).collect());
        Ok((x, classes))
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if self.prior_is_source {
            self.source.sample(n, rng)
        } else {
            GaussianMixture::standard_normal(self.dim()).sample(n, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn rejects_bad_weights() {
        assert!(GaussianMixture::isotropic(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GaussianMixture::isotropic(vec![1.5, -0.5], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GaussianMixture::isotropic(vec![1.0], vec![vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn degenerate_mixture_samples_at_mean() {
        let gm = GaussianMixture::isotropic(vec![1.0], vec![vec![3.0, -1.0]], 1e-9).unwrap();
        let x = gm.sample(100, &mut seeded(0)).unwrap();
        for row in x.iter_rows() {
            assert!((row[0] - 3.0).abs() < 1e-7 && (row[1] + 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let gm = GaussianMixture::isotropic(vec![0.6, 0.4], vec![vec![0.0], vec![10.0]], 1.0).unwrap();
        let (_, labels) = gm.sample_labeled(100_000, &mut seeded(1)).unwrap();
        let frac = labels.iter().filter(|&&k| k == 0).count() as f64 / 1e5;
        assert!((frac - 0.6).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let gm = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![2.0, 1.0]], 1.0).unwrap();
        let n = 50_000;
        let x = gm.sample(n, &mut seeded(2)).unwrap();
        let want = gm.mean();
        for j in 0..2 {
            let col: Vec<f64> = x.iter_rows().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - want[j]).abs() <= 3.0 * se, "dim {j}: {m} vs {}", want[j]);
        }
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let gm = GaussianMixture::standard_normal(2);
        let want = -(2.0 * std::f64::consts::PI).ln();
        assert!((gm.log_density(&[0.0, 0.0]) - want).abs() < 1e-14);
    }

    #[test]
    fn midpoint_density_matches_direct_sum() {
        let gm = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-1.0, 0.0], vec![1.0, 0.0]], 0.7).unwrap();
        let p = [0.0, 0.0];
        let s2 = 0.49;
        let one = (-1.0f64 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2);
        let direct: f64 = (0.5 * one + 0.5 * one).ln();
        assert!((gm.log_density(&p) - direct).abs() < 1e-13);
    }

    #[test]
    fn far_point_has_finite_very_negative_log_density() {
        let gm = ToyTask::imbalanced_toy().target;
        let v = gm.log_density(&[1e4, -1e4]);
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn density_integrates_to_one() {
        let gm = ToyTask::imbalanced_toy().target;
        let (lo_x, hi_x, lo_y, hi_y) = (-2.0, 14.0, -10.0, 10.0);
        let h = 0.05;
        let nx = ((hi_x - lo_x) / h) as usize;
        let ny = ((hi_y - lo_y) / h) as usize;
        let mut total = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                let p = [lo_x + (i as f64 + 0.5) * h, lo_y + (j as f64 + 0.5) * h];
                total += gm.log_density(&p).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn velocity_oracle_endpoints() {
        let mu = [2.0, -1.0];
        let z = [0.3, 0.7];
        let at1 = gaussian_velocity_oracle(&mu, 1.5, 1.0, &z).unwrap();
        assert!((at1[0] - (0.3 - 2.0)).abs() < 1e-15 && (at1[1] - (0.7 + 1.0)).abs() < 1e-15);
        let at0 = gaussian_velocity_oracle(&mu, 1.5, 0.0, &z).unwrap();
        assert!((at0[0] + 0.3).abs() < 1e-15 && (at0[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn velocity_oracle_is_affine_in_state() {
        let mu = [2.0, 0.0];
        let t = 0.37;
        let a = [0.5, -1.0];
        let b = [3.0, 2.0];
        let f = |p: &[f64]| gaussian_velocity_oracle(&mu, 0.8, t, p).unwrap();
        let (fa, fb) = (f(&a), f(&b));
        let lam = 0.3;
        let mix = [lam * a[0] + (1.0 - lam) * b[0], lam * a[1] + (1.0 - lam) * b[1]];
        let fm = f(&mix);
        for j in 0..2 {
            assert!((fm[j] - (lam * fa[j] + (1.0 - lam) * fb[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_oracle_degenerate_input() {
        let err = gaussian_velocity_oracle(&[1.0], 0.0, 0.0, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn contour_is_below_density_at_means() {
        let gm = ToyTask::imbalanced_toy().target;
        let c = gm.sigma_contour_log_density(4.0);
        for m in gm.means() {
            assert!(gm.log_density(m) > c);
        }
        // 10 sigma away from every mean is below the 4 sigma contour.
        assert!(gm.log_density(&[6.0, 13.0]) < c);
    }
}
