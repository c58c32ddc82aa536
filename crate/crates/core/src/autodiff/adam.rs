use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates this parameter has received; drives bias correction.
    pub updates: u64,
}

/// Optimizer state for Adam with bias correction.
///
/// Parameters that are skipped on a step (frozen, or excluded by the caller)
/// keep their moments untouched, and their bias correction counts only the
/// steps on which they were actually updated.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.moments.get(id.0).and_then(|m| m.as_ref())
    }

    /// Restore saved state (checkpoint loading).
    pub fn restore(config: AdamConfig, step: u64, moments: Vec<Option<Moments<T>>>) -> Self {
        AdamState { config, step, moments }
    }

    pub fn all_moments(&self) -> &[Option<Moments<T>>] {
        &self.moments
    }

    /// One optimizer step over the trainable parameters accepted by
    /// `select`. Returns the ids that were updated.
    pub fn step_selected(
        &mut self,
        store: &mut ParamStore<T>,
        lr: f64,
        mut select: impl FnMut(ParamId) -> bool,
    ) -> Result<Vec<ParamId>> {
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for id in store.ids() {
            if let Some(m) = &self.moments[id.0] {
                let n = store.get(id).tensor.numel();
                if m.m.len() != n || m.v.len() != n {
                    return Err(Error::shape(format!(
                        "adam moments for {} hold {} values, parameter holds {n}",
                        store.get(id).name,
                        m.m.len()
                    )));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let eps = T::from_f64(self.config.eps);
        let mut updated = Vec::new();
        for idx in 0..store.len() {
            let id = ParamId(idx);
            let p = store.get_mut(id);
            if !p.trainable || !select(id) {
                continue;
            }
            let n = p.tensor.numel();
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                updates: 0,
            });
            mom.updates += 1;
            let t = mom.updates as i32;
            let c1 = T::from_f64(1.0 - b1.powi(t));
            let c2 = T::from_f64(1.0 - b2.powi(t));
            let lr_t = T::from_f64(lr);
            let (values, grads) = p.tensor.value_and_grad_mut();
            for i in 0..n {
                let g = grads[i];
                mom.m[i] = tb1 * mom.m[i] + ob1 * g;
                mom.v[i] = tb2 * mom.v[i] + ob2 * g * g;
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                values[i] = values[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            updated.push(id);
        }
        Ok(updated)
    }
}

/// Adam step over every trainable parameter of `store`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<Vec<ParamId>> {
    state.step_selected(store, lr, |_| true)
}
