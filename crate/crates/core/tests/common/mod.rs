//! Independent reference computations shared by the integration tests and
//! the acceptance harness.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

use remeanflow::{Activation, MlpModel, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a − b|` relative to the larger magnitude, with an absolute floor for
/// entries that are zero up to rounding.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-4 {
        (a - b).abs() / 1e-4
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(vec![rows, cols], values).unwrap()
}

/// A random MLP with 1–3 hidden layers of width 2–12.
pub fn random_net<R: Rng>(rng: &mut R) -> MlpModel {
    let depth = rng.gen_range(1..=3);
    let mut sizes = vec![rng.gen_range(1..=5)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..=12));
    }
    sizes.push(rng.gen_range(1..=4));
    let act = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Silu };
    MlpModel::init(&sizes, act, rng).unwrap()
}

/// Largest relative errors of the JVP against a central difference along
/// the tangent, and of reverse-mode parameter and input gradients against
/// central differences of `⟨upstream, f(x)⟩`.
pub struct FdReport {
    pub jvp: f64,
    pub param_grad: f64,
    pub input_grad: f64,
    /// `‖J(a·u + b·w) − a·Ju − b·Jw‖∞`.
    pub linearity: f64,
}

pub fn fd_check<R: Rng>(net: &MlpModel, rng: &mut R) -> FdReport {
    let batch = rng.gen_range(1..=4);
    let n_in = net.input_dim();
    let x = random_tensor(batch, n_in, rng);
    let u = random_tensor(batch, n_in, rng);
    let w = random_tensor(batch, n_in, rng);
    let up = random_tensor(batch, net.output_dim(), rng);

    let (_, ju, _) = net.jvp_cached(&x, &u).unwrap();
    let plus = net.forward(&x.axpy(FD_STEP, &u).unwrap()).unwrap();
    let minus = net.forward(&x.axpy(-FD_STEP, &u).unwrap()).unwrap();
    let jvp = ju
        .values()
        .iter()
        .zip(plus.values().iter().zip(minus.values()))
        .map(|(a, (p, m))| rel_err(*a, (p - m) / (2.0 * FD_STEP)))
        .fold(0.0, f64::max);

    let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let combo = u.scale(a).axpy(b, &w).unwrap();
    let (_, jc, _) = net.jvp_cached(&x, &combo).unwrap();
    let (_, jw, _) = net.jvp_cached(&x, &w).unwrap();
    let linearity = jc
        .values()
        .iter()
        .zip(ju.values().iter().zip(jw.values()))
        .map(|(c, (p, q))| (c - a * p - b * q).abs())
        .fold(0.0, f64::max);

    let objective = |m: &MlpModel, input: &Tensor| -> f64 {
        m.forward(input).unwrap().values().iter().zip(up.values()).map(|(f, g)| f * g).sum()
    };
    let (grads, dx) = net.gradients(&x, &up).unwrap();
    let flat = grads.flatten();
    let mut param_grad: f64 = 0.0;
    let mut probe = net.clone();
    let mut k = 0;
    let n_slices = probe.parameters_mut().len();
    for s in 0..n_slices {
        let len = probe.parameters_mut()[s].len();
        for i in 0..len {
            let orig = probe.parameters_mut()[s][i];
            probe.parameters_mut()[s][i] = orig + FD_STEP;
            let fp = objective(&probe, &x);
            probe.parameters_mut()[s][i] = orig - FD_STEP;
            let fm = objective(&probe, &x);
            probe.parameters_mut()[s][i] = orig;
            param_grad = param_grad.max(rel_err(flat[k], (fp - fm) / (2.0 * FD_STEP)));
            k += 1;
        }
    }
    let mut input_grad: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.values_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.values_mut()[i] -= FD_STEP;
        let fd = (objective(net, &xp) - objective(net, &xm)) / (2.0 * FD_STEP);
        input_grad = input_grad.max(rel_err(dx.values()[i], fd));
    }
    FdReport { jvp, param_grad, input_grad, linearity }
}

/// Self-normalized importance-sampling estimate of `E[z − x | z_t]` for
/// `x ~ N(mu, sigma² I)`, `z ~ N(0, I)`: draws `x` from its prior and
/// weights by the density of `z = (z_t − (1 − t) x) / t`.
pub fn importance_velocity<R: Rng>(mu: &[f64], sigma: f64, t: f64, z_t: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let d = mu.len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..n {
        for (xi, m) in x.iter_mut().zip(mu) {
            *xi = m + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let z: Vec<f64> = z_t.iter().zip(&x).map(|(zt, xi)| (zt - (1.0 - t) * xi) / t).collect();
        let w = (-0.5 * z.iter().map(|v| v * v).sum::<f64>()).exp();
        for j in 0..d {
            num[j] += w * (z[j] - x[j]);
        }
        den += w;
    }
    num.iter().map(|v| v / den).collect()
}

/// Energy distance over all ordered pairs, written with explicit loops.
pub fn brute_energy(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mean = |p: &[[f64; 2]], q: &[[f64; 2]]| {
        let mut s = 0.0;
        for u in p {
            for v in q {
                s += ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
            }
        }
        s / (p.len() * q.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

/// Values kept by nearest-rank truncation, by full sort: the threshold is
/// the `ceil((100 − k) n / 100)`-th smallest value.
pub fn full_sort_keep(values: &[f64], k: f64) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = (((100.0 - k) * n as f64) / 100.0).ceil().max(1.0) as usize;
    let threshold = sorted[rank - 1];
    values.iter().copied().filter(|v| *v <= threshold).collect()
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at 1% significance.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// CDF of the density `∝ cosh(a u)` on `[0, 1]`, written out directly.
pub fn cosh_density_cdf(u: f64, a: f64) -> f64 {
    (a * u).sinh() / a.sinh()
}
