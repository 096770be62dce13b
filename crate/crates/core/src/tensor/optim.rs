use serde::{Deserialize, Serialize};

use super::{shape_err, ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Momentum buffers, one per parameter tensor, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    frozen: Vec<bool>,
}

impl OptimState {
    pub fn new<T: Scalar>(config: SgdConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            frozen: vec![false; params.len()],
        }
    }

    /// State for a store; its buffers are left untouched by [`sgd_step`].
    pub fn for_store<T: Scalar>(config: SgdConfig, store: &ParamStore<T>) -> Self {
        let mut s = Self::new(config, store.tensors());
        s.frozen = store.trainable_mask().iter().map(|t| !t).collect();
        s
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// Classic momentum with weight decay folded into the gradient:
/// `v = momentum·v + (g + wd·p)`, then `p -= lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<f64>],
    state: &mut OptimState,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(shape_err(
            "sgd_step",
            format!(
                "{} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.numel() != g.len() || p.numel() != v.len() {
            return Err(shape_err(
                "sgd_step",
                format!("param {:?} with {} grads", p.shape, g.len()),
            ));
        }
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = state.config;
    for (((p, g), v), _) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.velocity)
        .zip(&state.frozen)
        .filter(|(_, frozen)| !**frozen)
    {
        for ((pv, &gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let w = pv.widen();
            *vv = momentum * *vv + gv + weight_decay * w;
            *pv = T::of(w - lr * *vv);
        }
    }
    Ok(())
}
