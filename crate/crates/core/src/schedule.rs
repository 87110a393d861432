//! Ramp schedule for the adversarial weight.

use serde::{Deserialize, Serialize};

/// Adversarial weight schedule over epochs.
///
/// The implemented form is `gamma = xi * (2 / (1 + exp(-kappa * p)) - 1)`
/// with `p = epoch / max_epoch`: zero at the start, approaching `xi` from
/// below, never negative. The `literal` flag switches to
/// `(2 * xi) / (1 + exp(-kappa * p)) - 1`, which is negative everywhere for
/// small `xi`; it exists so the two forms can be compared, not for training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub xi: f64,
    pub kappa: f64,
    pub max_epoch: usize,
    pub literal: bool,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule { xi: 0.1, kappa: 3.0, max_epoch: 1, literal: false }
    }
}

impl GammaSchedule {
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        let p = epoch as f64 / self.max_epoch.max(1) as f64;
        let logistic = 2.0 / (1.0 + (-self.kappa * p).exp());
        if self.literal {
            self.xi * logistic - 1.0
        } else {
            self.xi * (logistic - 1.0)
        }
    }
}
