//! Dense MLPs with reverse-mode gradients, forward-mode JVPs and Adam.

mod adam;
mod jvp;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use jvp::DualTensor;
pub use mlp::{Activation, ForwardCache, MlpGrads, MlpModel};

use crate::error::Result;

impl MlpModel {
    /// Applies one Adam update from `grads` to this model's parameters.
    pub fn apply_adam(&mut self, adam: &mut AdamState, grads: &MlpGrads) -> Result<()> {
        let g = grads.slices();
        adam.step(&mut self.parameters_mut(), &g)
    }
}
