use serde::{Deserialize, Serialize};

use super::{MlpGrads, MlpParams, NnError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only (not biases).
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }
}

/// Adam with bias correction. First and second moments mirror the parameter
/// shapes of the network they optimize.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState {
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update in place. Rejects non-finite gradients without touching
    /// parameters or optimizer state.
    pub fn step(
        &mut self,
        params: &mut MlpParams,
        grads: &MlpGrads,
        hyper: &AdamHyper,
    ) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient {
                context: "adam step".to_string(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.m.layers[l];
            let v = &mut self.v.layers[l];
            for ((w, &gw), (mw, vw)) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.d_weight.data())
                .zip(m.d_weight.data_mut().iter_mut().zip(v.d_weight.data_mut()))
            {
                *mw = hyper.beta1 * *mw + (1.0 - hyper.beta1) * gw;
                *vw = hyper.beta2 * *vw + (1.0 - hyper.beta2) * gw * gw;
                let m_hat = *mw / bc1;
                let v_hat = *vw / bc2;
                *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
                *w -= hyper.lr * hyper.weight_decay * *w;
            }
            for ((b, &gb), (mb, vb)) in layer
                .bias
                .iter_mut()
                .zip(&g.d_bias)
                .zip(m.d_bias.iter_mut().zip(v.d_bias.iter_mut()))
            {
                *mb = hyper.beta1 * *mb + (1.0 - hyper.beta1) * gb;
                *vb = hyper.beta2 * *vb + (1.0 - hyper.beta2) * gb * gb;
                let m_hat = *mb / bc1;
                let v_hat = *vb / bc2;
                *b -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        Ok(())
    }
}
