use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse CDF of the density `∝ exp(a u) + exp(−a u)` on `[0, 1]`,
/// whose CDF is `sinh(a u) / sinh(a)`.
pub fn u_shaped_inverse_cdf(xi: f64, a: f64) -> f64 {
    ((xi * a.sinh()).asinh() / a).clamp(0.0, 1.0)
}

/// CDF matching [`u_shaped_inverse_cdf`].
pub fn u_shaped_cdf(u: f64, a: f64) -> f64 {
    (a * u.clamp(0.0, 1.0)).sinh() / a.sinh()
}

/// Distribution of `(r, t)` pairs for mean-flow training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSamplerConfig {
    /// Draw `t` from the U-shaped law; uniform otherwise.
    pub u_shape: bool,
    pub u_shape_a: f64,
    /// Draw `t − r` as `sigmoid(N(mean, std))`; uniform otherwise.
    pub logit_normal_interval: bool,
    pub interval_mean: f64,
    pub interval_std: f64,
    pub ratio_r_neq_t: f64,
    /// Set `r = 0` whenever `t > avoid_t_hi` and `r < avoid_r_lo`.
    pub avoid_region: bool,
    pub avoid_t_hi: f64,
    pub avoid_r_lo: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        TimeSamplerConfig {
            u_shape: true,
            u_shape_a: 4.0,
            logit_normal_interval: true,
            interval_mean: -0.8,
            interval_std: 1.0,
            ratio_r_neq_t: 0.25,
            avoid_region: true,
            avoid_t_hi: 0.95,
            avoid_r_lo: 0.4,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_r_neq_t) {
            return Err(Error::Config(format!("ratio_r_neq_t {} outside [0, 1]", self.ratio_r_neq_t)));
        }
        if !(self.u_shape_a > 0.0) {
            return Err(Error::Config(format!("u_shape_a must be positive, got {}", self.u_shape_a)));
        }
        if !(self.interval_std >= 0.0) || !self.interval_mean.is_finite() {
            return Err(Error::Config("interval mean/std must be finite, std ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeBranch {
    Equal,
    Interval,
}

/// One draw together with how it was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    pub r: f64,
    pub t: f64,
    pub branch: TimeBranch,
    /// `t − Δ` fell below zero and `r` was clamped to 0.
    pub clamped: bool,
    /// The avoidance rule moved `r` to 0.
    pub avoided: bool,
}

/// Draws `(r, t)` with `0 ≤ r ≤ t ≤ 1`. Always consumes three random numbers
/// (four with the logit-normal interval), independent of the branch taken.
pub fn sample_time_pair<R: Rng + ?Sized>(cfg: &TimeSamplerConfig, rng: &mut R) -> TimePair {
    let xi: f64 = rng.gen();
    let t = if cfg.u_shape { u_shaped_inverse_cdf(xi, cfg.u_shape_a) } else { xi };
    let branch_draw: f64 = rng.gen();
    let delta = if cfg.logit_normal_interval {
        let n: f64 = rng.sample(StandardNormal);
        sigmoid(cfg.interval_mean + cfg.interval_std * n)
    } else {
        rng.gen()
    };
    if branch_draw >= cfg.ratio_r_neq_t {
        return TimePair { r: t, t, branch: TimeBranch::Equal, clamped: false, avoided: false };
    }
    let clamped = t - delta < 0.0;
    let mut r = (t - delta).max(0.0);
    let mut avoided = false;
    if cfg.avoid_region && t > cfg.avoid_t_hi && r < cfg.avoid_r_lo && r > 0.0 {
        r = 0.0;
        avoided = true;
    }
    TimePair { r, t, branch: TimeBranch::Interval, clamped, avoided }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn median_of_u_shape_matches_quadrature() {
        let t = u_shaped_inverse_cdf(0.5, 4.0);
        assert!((t - 0.8263).abs() < 1e-3, "{t}");
        // Simpson's rule on the unnormalized density.
        let dens = |u: f64| (4.0 * u).exp() + (-4.0 * u).exp();
        let simpson = |hi: f64| {
            let n = 2000;
            let h = hi / n as f64;
            (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    w * dens(i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        assert!((simpson(t) / simpson(1.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_ratio_always_equal() {
        let cfg = TimeSamplerConfig { ratio_r_neq_t: 0.0, ..TimeSamplerConfig::default() };
        let mut rng = seeded(3);
        for _ in 0..10_000 {
            let p = sample_time_pair(&cfg, &mut rng);
            assert_eq!(p.r, p.t);
        }
    }

    #[test]
    fn avoidance_rewrites_forbidden_pairs() {
        let mut rng = seeded(4);
        let cfg = TimeSamplerConfig::default();
        let mut avoided = 0;
        for _ in 0..200_000 {
            let p = sample_time_pair(&cfg, &mut rng);
            assert!(0.0 <= p.r && p.r <= p.t && p.t <= 1.0);
            assert!(!(p.t > 0.95 && p.r > 0.0 && p.r < 0.4));
            avoided += usize::from(p.avoided);
        }
        assert!(avoided > 0);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(TimeSamplerConfig { ratio_r_neq_t: 1.5, ..Default::default() }.validate().is_err());
        assert!(TimeSamplerConfig { u_shape_a: 0.0, ..Default::default() }.validate().is_err());
    }
}
