use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of `ids`, then zeroes every gradient
    /// in the store. Parameters outside `ids` keep their values and moments.
    pub fn step<T: Scalar>(&self, store: &mut ParameterStore<T>, ids: &[ParamId]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for &id in ids {
            let slot = store.slot_mut(id);
            slot.steps += 1;
            let t = slot.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let n = slot.value.len();
            for i in 0..n {
                let g = slot.grad.data()[i];
                let m = b1 * slot.m.data()[i] + (T::one() - b1) * g;
                let v = b2 * slot.v.data()[i] + (T::one() - b2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
                slot.value.data_mut()[i] -= update;
            }
        }
        store.zero_grads();
        Ok(())
    }
}
