use crate::autodiff::{ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, params: Vec<ParamId>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            params,
            v: m.clone(),
            m,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// First and second moments of the `i`-th parameter.
    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Replaces the moments of the `i`-th parameter (checkpoint restore).
    pub fn set_moments(&mut self, i: usize, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let len = self.m[i].len();
        if m.len() != len || v.len() != len {
            return Err(Error::ShapeMismatch {
                op: "adam moments",
                lhs: vec![m.len(), v.len()],
                rhs: vec![len, len],
            });
        }
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidArgument("adam second moment must be >= 0".into()));
        }
        self.m[i] = m;
        self.v[i] = v;
        Ok(())
    }

    /// Moments reshaped like their parameters.
    pub fn moment_tensors(&self, store: &ParameterStore, i: usize) -> Result<(Tensor, Tensor)> {
        let shape = store.value(self.params[i]).shape().to_vec();
        Ok((
            Tensor::new(shape.clone(), self.m[i].clone())?,
            Tensor::new(shape, self.v[i].clone())?,
        ))
    }

    /// One bias-corrected Adam step at rate `lr` using the gradients in
    /// `store`. Every listed parameter must carry a gradient; the step is
    /// all-or-nothing.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(Error::MissingGradient(store.get(id).name.clone()));
        }
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (i, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let grad = p.grad.as_deref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.version += 1;
        }
        Ok(())
    }
}
