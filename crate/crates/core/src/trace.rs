use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn push(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Means over consecutive non-overlapping windows of `window` steps.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        self.losses
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }

    /// Mean loss of the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        let n = self.losses.len();
        (mean(&self.losses[..w.min(n)]), mean(&self.losses[n.saturating_sub(w)..]))
    }
}

/// Periodic hook into a training loop; `callback(step, model)` runs after
/// every `every`-th completed step.
pub struct Snapshots<'a, M> {
    pub every: u64,
    pub callback: &'a mut dyn FnMut(u64, &M) -> Result<()>,
}

impl<M> Snapshots<'_, M> {
    pub(crate) fn maybe_fire(this: &mut Option<Snapshots<'_, M>>, step: u64, total: u64, model: &M) -> Result<()> {
        if let Some(s) = this {
            if s.every > 0 && (step.is_multiple_of(s.every) || step == total) {
                (s.callback)(step, model)?;
            }
        }
        Ok(())
    }
}
