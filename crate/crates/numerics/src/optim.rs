//! Adam with bias correction.

use crate::array::NdArray;
use crate::error::{NumericsError, Result};
use crate::layer::{ParamId, ParamStore};
use crate::tape::Gradients;

/// Moment accumulators and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimState {
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    step: u64,
    lrs: Vec<f32>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimState {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros = || (0..store.len()).map(|i| NdArray::zeros(store.get(i).shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, lrs: vec![lr; store.len()], beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Overrides the learning rate of selected tensors.
    pub fn set_lr(&mut self, ids: impl IntoIterator<Item = ParamId>, lr: f32) {
        for id in ids {
            self.lrs[id] = lr;
        }
    }

    pub fn set_all_lr(&mut self, lr: f32) {
        self.lrs.fill(lr);
    }

    pub fn lr(&self, id: ParamId) -> f32 {
        self.lrs[id]
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &NdArray {
        &self.m[id]
    }

    pub fn second_moment(&self, id: ParamId) -> &NdArray {
        &self.v[id]
    }

    /// One Adam update of `params` against `grads`.
    pub fn optim_step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "optim_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (i, g) in grads.iter().enumerate() {
            g.ensure_shape("optim_step", params.get(i).shape())?;
            g.ensure_finite("optim_step")?;
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let lr = self.lrs[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
