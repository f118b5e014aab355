use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanflow::MeanFlowModel;
use crate::rectflow::FlowModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaRule {
    /// Plain guidance: `κ = 0`, `ω = ω′`.
    #[default]
    Zero,
    /// `κ = min(max(1, ω′ − 1), 0.99)`, `ω = ω′ / (1 − κ)`.
    Clamped,
}

/// Guidance used in the second half of conditional mean-flow training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgConfig {
    pub omega_prime_range: (f64, f64),
    pub kappa_rule: KappaRule,
    /// Fraction of iterations trained on the unguided flow first.
    pub stage_split: f64,
}

impl Default for CfgConfig {
    fn default() -> Self {
        CfgConfig { omega_prime_range: (1.0, 3.0), kappa_rule: KappaRule::Zero, stage_split: 0.5 }
    }
}

pub(crate) const KAPPA_CAP: f64 = 0.99;

impl CfgConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.omega_prime_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("omega_prime_range ({lo}, {hi}) must satisfy 1 ≤ lo ≤ hi")));
        }
        if !(0.0..=1.0).contains(&self.stage_split) {
            return Err(Error::Config(format!("stage_split {} outside [0, 1]", self.stage_split)));
        }
        Ok(())
    }

    /// `(ω, κ)` for an effective scale `ω′`.
    pub fn resolve(&self, omega_prime: f64) -> (f64, f64) {
        match self.kappa_rule {
            KappaRule::Zero => (omega_prime, 0.0),
            KappaRule::Clamped => {
                let kappa = (omega_prime - 1.0).max(1.0).min(KAPPA_CAP);
                (omega_prime / (1.0 - kappa), kappa)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let (lo, hi) = self.omega_prime_range;
        let xi: f64 = rng.gen();
        self.resolve(lo + (hi - lo) * xi)
    }
}

/// `ω·v(z_t, t | c) + κ·u(z_t, t, t | c) + (1 − ω + κ)·u(z_t, t, t)`.
pub fn cfg_velocity(
    flow: &FlowModel,
    mf: &MeanFlowModel,
    z_t: &Tensor,
    t: &[f64],
    classes: &[usize],
    omega: f64,
    kappa: f64,
) -> Result<Tensor> {
    let n = z_t.rows();
    let omegas = vec![omega; n];
    let kappas = vec![kappa; n];
    let labels: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
    cfg_mix(flow, mf, z_t, t, &labels, &omegas, &kappas)
}

/// Per-row guided velocity; rows without a class get the plain flow velocity.
pub(crate) fn cfg_mix(
    flow: &FlowModel,
    mf: &MeanFlowModel,
    z_t: &Tensor,
    t: &[f64],
    classes: &[Option<usize>],
    omegas: &[f64],
    kappas: &[f64],
) -> Result<Tensor> {
    if mf.num_classes() == 0 || flow.num_classes() == 0 {
        return Err(Error::Config("guidance needs class-conditional flow and mean-flow models".into()));
    }
    if classes.len() != z_t.rows() {
        return Err(Error::Shape("one class per row required".into()));
    }
    let cond = flow.velocity_at(z_t, t, Some(classes))?;
    let u_cond = mf.mean_velocity(z_t, t, t, Some(classes))?;
    let none = vec![None; classes.len()];
    let u_uncond = mf.mean_velocity(z_t, t, t, Some(&none))?;
    let d = z_t.cols();
    let mut out = cond.clone();
    for (i, row) in out.values_mut().chunks_exact_mut(d).enumerate() {
        if classes[i].is_none() {
            continue;
        }
        let (w, k) = (omegas[i], kappas[i]);
        let (a, b, c) = (cond.row(i), u_cond.row(i), u_uncond.row(i));
        for j in 0..d {
            row[j] = w * a[j] + k * b[j] + (1.0 - w + k) * c[j];
        }
    }
    Ok(out)
}
