//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one flat parameter buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update of `param` in place. `t` is the 1-based step count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![param.len()],
            right: vec![grad.len(), state.m.len(), state.v.len()],
        });
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            moments: store
                .iter()
                .map(|(_, p)| Moments::zeros(p.value.numel()))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.moments.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![store.len()],
                right: vec![grads.len(), self.moments.len()],
            });
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (id, grad) in ids.into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(id);
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            adam_update(
                param.data_mut(),
                grad.data(),
                &mut self.moments[id.index()],
                self.step,
                self.lr,
            )?;
        }
        Ok(())
    }
}
