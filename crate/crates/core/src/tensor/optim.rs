//! Adam with bias correction.

use super::param::ParamStore;
use super::Precision;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Defaults: beta = (0.9, 0.999), eps = 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        Adam::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently in the store.
    ///
    /// Parameters whose index is flagged in `frozen` keep their value and
    /// their moment estimates untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, frozen: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let precision = store.precision();
        for pid in 0..store.len() {
            if frozen.get(pid).copied().unwrap_or(false) {
                continue;
            }
            let p = store.param_mut(pid);
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let next = p.data[i] - lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = match precision {
                    Precision::F32 => next as f32 as f64,
                    Precision::F64 => next,
                };
            }
        }
    }
}
