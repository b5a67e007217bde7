//! Adam with decoupled weight decay, over flat parameter-group vectors.

use crate::pipeline::ModelParams;
use crate::tape::{Grads, Var};
use crate::tensor::Tensor;

/// Gradient accumulator aligned with `ModelParams::groups` order.
pub struct GradStore {
    pub g: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(model: &ModelParams) -> Self {
        GradStore {
            g: model
                .groups()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Adds the tape's leaf gradients. Parameters untouched by the loss
    /// contribute nothing.
    pub fn accumulate(&mut self, grads: &mut Grads, vars: &[Var]) {
        assert_eq!(vars.len(), self.g.len(), "var registry vs group count");
        for (slot, &v) in self.g.iter_mut().zip(vars) {
            if let Some(t) = grads.take(v) {
                debug_assert_eq!(t.shape(), slot.shape());
                for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.g
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self
            .g
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for t in &mut self.g {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }
}

pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(model: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = model
            .groups()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Weight decay is decoupled: p -= lr * wd * p, so lr = 0
    /// leaves parameters bitwise unchanged no matter the decay.
    pub fn step(&mut self, model: &mut ModelParams, grads: &GradStore, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((slot, (_, p)), (m, v)) in grads
            .g
            .iter()
            .zip(model.groups_mut())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = slot.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * pd[i]);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
