use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_ab, gemm_abt, gemm_atb, Tensor};

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // exp-based form; saturates cleanly to ±1 and is much cheaper than libm tanh.
            Activation::Tanh => 1.0 - 2.0 / ((2.0 * z).exp() + 1.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Fully connected network: affine layers with `activation` between them.
///
/// `weights[i]` has shape `(layer_sizes[i + 1], layer_sizes[i])` and
/// `biases[i]` has shape `(layer_sizes[i + 1],)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// Per-layer intermediates of a batched forward pass, consumed by
/// [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    preacts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// Parameter gradients, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl MlpGrads {
    /// Flat views in the same order as [`MlpModel::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.values(), b.values()]).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl MlpModel {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Shape(format!(
                "{n_layers} layers need {n_layers} weights and biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (fan_in, fan_out) = (layer_sizes[i], layer_sizes[i + 1]);
            if w.shape() != [fan_out, fan_in] || b.shape() != [fan_out] {
                return Err(Error::Shape(format!(
                    "layer {i}: weight {:?} / bias {:?}, expected [{fan_out}, {fan_in}] / [{fan_out}]",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(MlpModel { layer_sizes, weights, biases, activation })
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            weights.push(Tensor::new(vec![fan_out, fan_in], values)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        MlpModel::new(layer_sizes.to_vec(), activation, weights, biases)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>() + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    /// Multiply-adds of one forward pass for a single input row, times two.
    pub fn flops_per_forward(&self) -> f64 {
        self.layer_sizes.windows(2).map(|p| 2.0 * (p[0] * p[1]) as f64 + p[1] as f64).sum()
    }

    /// Mutable flat parameter views: `w0, b0, w1, b1, ...`.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.values_mut(), b.values_mut()])
            .collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.values(), b.values()]).collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        if input.shape().len() != 2 {
            return Err(Error::Shape(format!("expected a 2-D input, got {:?}", input.shape())));
        }
        if input.cols() != self.input_dim() {
            return Err(Error::Dimension { layer: 0, expected: self.input_dim(), got: input.cols() });
        }
        Ok(input.rows())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_cached(input).map(|(out, _)| out)
    }

    /// Forward pass that also keeps what [`MlpModel::backward`] needs.
    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let batch = self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut preacts = Vec::with_capacity(self.num_layers() - 1);
        let mut current = input.values().to_vec();
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut z = vec![0.0; batch * fan_out];
            gemm_abt(batch, fan_in, fan_out, &current, w.values(), &mut z);
            for row in z.chunks_exact_mut(fan_out) {
                for (zi, bi) in row.iter_mut().zip(b.values()) {
                    *zi += bi;
                }
            }
            inputs.push(current);
            if l == last {
                current = z;
            } else {
                let act = self.activation;
                current = z.iter().map(|&v| act.apply(v)).collect();
                preacts.push(z);
            }
        }
        let out = Tensor::new(vec![batch, self.output_dim()], current)?;
        Ok((out, ForwardCache { batch, inputs, preacts }))
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ output)` with respect to all
    /// parameters and to the input that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<(MlpGrads, Tensor)> {
        let batch = cache.batch;
        if upstream.shape() != [batch, self.output_dim()] {
            return Err(Error::Shape(format!(
                "upstream {:?}, expected [{batch}, {}]",
                upstream.shape(),
                self.output_dim()
            )));
        }
        let n = self.num_layers();
        let mut dw = vec![Tensor::zeros(&[1]); n];
        let mut db = vec![Tensor::zeros(&[1]); n];
        let mut delta = upstream.values().to_vec();
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut gw = vec![0.0; fan_out * fan_in];
            gemm_atb(fan_out, batch, fan_in, &delta, &cache.inputs[l], &mut gw);
            let mut gb = vec![0.0; fan_out];
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            dw[l] = Tensor::new(vec![fan_out, fan_in], gw)?;
            db[l] = Tensor::new(vec![fan_out], gb)?;

            let mut prev = vec![0.0; batch * fan_in];
            gemm_ab(batch, fan_out, fan_in, &delta, self.weights[l].values(), &mut prev);
            if l > 0 {
                let act = self.activation;
                let z = &cache.preacts[l - 1];
                let a = &cache.inputs[l];
                for ((p, &zi), &ai) in prev.iter_mut().zip(z).zip(a) {
                    *p *= act.derivative(zi, ai);
                }
            }
            delta = prev;
        }
        let input_grad = Tensor::new(vec![batch, self.input_dim()], delta)?;
        Ok((MlpGrads { weights: dw, biases: db }, input_grad))
    }

    /// Convenience wrapper: forward with cache, then backward.
    pub fn gradients(&self, input: &Tensor, upstream: &Tensor) -> Result<(MlpGrads, Tensor)> {
        let (_, cache) = self.forward_cached(input)?;
        self.backward(&cache, upstream)
    }

    /// Forward-mode pass: returns `(f(x), J_f(x) · v)` and the primal cache.
    ///
    /// Primal and tangent rows are stacked so each layer costs one GEMM.
    pub fn jvp_cached(&self, primal: &Tensor, tangent: &Tensor) -> Result<(Tensor, Tensor, ForwardCache)> {
        let batch = self.check_input(primal)?;
        if tangent.shape() != primal.shape() {
            return Err(Error::Shape(format!("tangent {:?} vs primal {:?}", tangent.shape(), primal.shape())));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut preacts = Vec::with_capacity(self.num_layers() - 1);
        let mut stacked = Vec::with_capacity(2 * primal.len());
        stacked.extend_from_slice(primal.values());
        stacked.extend_from_slice(tangent.values());
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut z = vec![0.0; 2 * batch * fan_out];
            gemm_abt(2 * batch, fan_in, fan_out, &stacked, w.values(), &mut z);
            let split = batch * fan_out;
            for row in z[..split].chunks_exact_mut(fan_out) {
                for (zi, bi) in row.iter_mut().zip(b.values()) {
                    *zi += bi;
                }
            }
            inputs.push(stacked[..batch * fan_in].to_vec());
            if l < last {
                let act = self.activation;
                let (zp, zt) = z.split_at_mut(split);
                let zp_saved = zp.to_vec();
                for (p, t) in zp.iter_mut().zip(zt.iter_mut()) {
                    let pre = *p;
                    let a = act.apply(pre);
                    *t *= act.derivative(pre, a);
                    *p = a;
                }
                preacts.push(zp_saved);
            }
            stacked = z;
        }
        let out_dim = self.output_dim();
        let tangent_out = stacked.split_off(batch * out_dim);
        let primal_out = Tensor::new(vec![batch, out_dim], stacked)?;
        let tangent_out = Tensor::new(vec![batch, out_dim], tangent_out)?;
        Ok((primal_out, tangent_out, ForwardCache { batch, inputs, preacts }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> MlpModel {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        MlpModel::new(vec![2, 2], Activation::Tanh, vec![w], vec![Tensor::zeros(&[2])]).unwrap()
    }

    /// Independent per-row forward pass with explicit loops.
    fn reference_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, (w, b)) in model.weights().iter().zip(model.biases()).enumerate() {
            let out = w.shape()[0];
            let inp = w.shape()[1];
            let mut next = vec![0.0; out];
            for i in 0..out {
                let mut acc = b.values()[i];
                for j in 0..inp {
                    acc += w.values()[i * inp + j] * h[j];
                }
                next[i] = if l + 1 < model.num_layers() { acc.tanh() } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn identity_network_passes_input_through() {
        let x = Tensor::matrix(1, 2, vec![0.3, -1.7]).unwrap();
        assert_eq!(identity_net().forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let net = MlpModel::new(vec![3, 2], Activation::Tanh, vec![w], vec![b]).unwrap();
        let x = Tensor::matrix(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        for row in y.iter_rows() {
            assert_eq!(row, &[0.5, -2.0]);
        }
    }

    #[test]
    fn seeded_net_matches_reference_forward_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpModel::init(&[2, 16, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let got = net.forward(&x).unwrap();
        let want = reference_forward(&net, &[0.0, 0.0]);
        for (g, w) in got.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
        // With zero biases the origin maps to the origin.
        assert!(want.iter().all(|v| *v == 0.0));
        let x = Tensor::matrix(1, 2, vec![0.4, -1.1]).unwrap();
        let got = net.forward(&x).unwrap();
        let want = reference_forward(&net, &[0.4, -1.1]);
        for (g, w) in got.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-14, "{g} vs {w}");
        }
    }

    #[test]
    fn input_width_mismatch_names_layer() {
        let err = identity_net().forward(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension { layer: 0, expected: 2, got: 3 }));
    }

    #[test]
    fn constructor_rejects_incompatible_layers() {
        let w = Tensor::zeros(&[3, 2]);
        let err = MlpModel::new(vec![2, 2], Activation::Tanh, vec![w], vec![Tensor::zeros(&[2])]);
        assert!(err.is_err());
    }

    #[test]
    fn linear_backward_matches_closed_form() {
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let net = MlpModel::new(vec![3, 2], Activation::Tanh, vec![w.clone()], vec![Tensor::zeros(&[2])]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.2, -0.4, 1.5]).unwrap();
        let g = Tensor::matrix(1, 2, vec![0.7, -1.3]).unwrap();
        let (grads, dx) = net.gradients(&x, &g).unwrap();
        // dW = g xᵀ
        for i in 0..2 {
            for j in 0..3 {
                let want = g.values()[i] * x.values()[j];
                assert!((grads.weights[0].values()[i * 3 + j] - want).abs() < 1e-15);
            }
        }
        // dx = Wᵀ g
        for j in 0..3 {
            let want: f64 = (0..2).map(|i| w.values()[i * 3 + j] * g.values()[i]).sum();
            assert!((dx.values()[j] - want).abs() < 1e-15);
        }
        assert_eq!(grads.biases[0].values(), g.values());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpModel::init(&[2, 8, 8, 2], Activation::Silu, &mut rng).unwrap();
        let x = Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let (grads, dx) = net.gradients(&x, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(grads.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_jvp_is_weight_times_tangent() {
        let w = Tensor::matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let net = MlpModel::new(vec![2, 2], Activation::Tanh, vec![w], vec![Tensor::filled(&[2], 1.0)]).unwrap();
        let x = Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap();
        let v = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let (_, t, _) = net.jvp_cached(&x, &v).unwrap();
        assert_eq!(t.values(), &[0.0, 6.5]);
    }

    #[test]
    fn jvp_cache_reproduces_forward_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MlpModel::init(&[3, 10, 10, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let v = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let (y_jvp, _, cache_jvp) = net.jvp_cached(&x, &v).unwrap();
        let (y, cache) = net.forward_cached(&x).unwrap();
        for (a, b) in y_jvp.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-13);
        }
        let up = Tensor::filled(&[5, 2], 0.25);
        let (g1, _) = net.backward(&cache_jvp, &up).unwrap();
        let (g2, _) = net.backward(&cache, &up).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
