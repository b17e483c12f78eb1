//! Adam over a fixed list of parameter slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with independent moment estimates and step counts per slot. A slot
/// without a gradient in a step is left untouched, including its count.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: Vec<SlotState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, slots: Vec<&mut [f64]>, grads: &[Option<&[f64]>]) -> Result<()> {
        if slots.len() != grads.len() {
            return Err(Error::shape(
                "adam",
                format!("{} slots, {} gradients", slots.len(), grads.len()),
            ));
        }
        if self.state.len() < slots.len() {
            self.state.resize_with(slots.len(), SlotState::default);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        for ((param, grad), st) in slots.into_iter().zip(grads).zip(&mut self.state) {
            let Some(grad) = grad else { continue };
            if grad.len() != param.len() {
                return Err(Error::shape("adam", "gradient length differs from parameter"));
            }
            if st.m.len() != param.len() {
                st.m = vec![0.0; param.len()];
                st.v = vec![0.0; param.len()];
                st.t = 0;
            }
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for k in 0..param.len() {
                let g = grad[k];
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g;
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                let m_hat = st.m[k] / c1;
                let v_hat = st.v[k] / c2;
                param[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Forgets all moment estimates.
    pub fn reset(&mut self) {
        self.state.clear();
    }
}
