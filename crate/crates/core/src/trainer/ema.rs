use crate::autodiff::{ParamId, ParameterStore};
use crate::error::{Error, Result};

/// One EMA step: `decay * shadow + (1 - decay) * value`.
#[inline]
pub fn ema_blend(shadow: f64, value: f64, decay: f64) -> f64 {
    decay * shadow + (1.0 - decay) * value
}

/// Exponential moving average of a set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    params: Vec<ParamId>,
    shadow: Vec<Vec<f64>>,
}

impl EmaShadow {
    /// Starts as an exact copy of the tracked parameters.
    pub fn new(store: &ParameterStore, params: Vec<ParamId>) -> Self {
        let shadow = params.iter().map(|&id| store.values(id).to_vec()).collect();
        Self { params, shadow }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.shadow[i]
    }

    pub fn set_values(&mut self, i: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.shadow[i].len() {
            return Err(Error::ShapeMismatch {
                op: "ema restore",
                lhs: vec![values.len()],
                rhs: vec![self.shadow[i].len()],
            });
        }
        self.shadow[i] = values;
        Ok(())
    }

    /// Before `start_iter` the shadow copies the parameters; afterwards it
    /// blends them in with weight `1 - decay`.
    pub fn update(&mut self, store: &ParameterStore, iteration: u64, start_iter: u64, decay: f64) {
        for (s, &id) in self.shadow.iter_mut().zip(&self.params) {
            let cur = store.values(id);
            if iteration < start_iter {
                s.copy_from_slice(cur);
            } else {
                s.iter_mut().zip(cur).for_each(|(a, &b)| *a = ema_blend(*a, b, decay));
            }
        }
    }

    /// A copy of `store` with the tracked parameters replaced by the shadow.
    pub fn apply_to(&self, store: &ParameterStore) -> ParameterStore {
        let mut out = store.clone();
        for (s, &id) in self.shadow.iter().zip(&self.params) {
            out.values_mut(id).copy_from_slice(s);
        }
        out
    }
}
