use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::tensor::Tensor;

/// A primal value paired with a tangent of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(Error::Shape(format!("dual parts differ: {:?} vs {:?}", primal.shape(), tangent.shape())));
        }
        Ok(DualTensor { primal, tangent })
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.primal, self.tangent)
    }
}

impl MlpModel {
    /// Pushes a dual input through the network: the primal is the ordinary
    /// forward output, the tangent is the Jacobian applied to the input tangent.
    pub fn jvp(&self, input: &DualTensor) -> Result<DualTensor> {
        let (p, t, _) = self.jvp_cached(input.primal(), input.tangent())?;
        DualTensor::new(p, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dual_rejects_shape_mismatch() {
        assert!(DualTensor::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn zero_tangent_gives_zero_output_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpModel::init(&[4, 12, 3], Activation::Silu, &mut rng).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 0.0, 0.5]).unwrap();
        let out = net.jvp(&DualTensor::new(x.clone(), Tensor::zeros(&[2, 4])).unwrap()).unwrap();
        assert!(out.tangent().values().iter().all(|v| *v == 0.0));
        assert_eq!(out.primal(), &net.forward(&x).unwrap());
    }
}
