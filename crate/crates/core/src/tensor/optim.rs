use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{NpaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        OptimState {
            step_count: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            config,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        AdamW {
            state: OptimState::new(config, params),
        }
    }

    pub fn from_state(state: OptimState) -> Self {
        AdamW { state }
    }

    /// One update. `names` is only used to report a missing gradient.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
        names: &[String],
    ) -> Result<()> {
        let st = &mut self.state;
        if params.len() != st.first_moment.len() {
            return Err(NpaError::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                st.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match grads.get(i).and_then(Option::as_ref) {
                None => {
                    let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                    return Err(NpaError::MissingGrad(name));
                }
                Some(g) if g.shape() != p.shape() || st.first_moment[i].shape() != p.shape() => {
                    return Err(NpaError::shape("adamw_step", p.shape(), g.shape()));
                }
                Some(_) => {}
            }
        }

        st.step_count += 1;
        let cfg = st.config;
        let t = st.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above");
            let m = st.first_moment[i].data_mut();
            let v = st.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}
