//! Stochastic gradient descent with Nesterov momentum.

use crate::model::ModelParameters;

/// Optimizer state: one velocity per parameter plus the current learning
/// rate (the schedule halves it on plateaus).
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(n_params: usize, lr: f64, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; n_params],
            lr,
            momentum,
        }
    }
}

/// One Nesterov update:
///
/// ```text
/// v ← μ·v + g
/// θ ← θ − lr·(g + μ·v)
/// ```
pub fn sgd_step(params: &mut ModelParameters, grads: &[f64], state: &mut SgdState) {
    debug_assert_eq!(params.data.len(), grads.len());
    debug_assert_eq!(params.data.len(), state.velocity.len());
    let mu = state.momentum;
    let lr = state.lr;
    for ((theta, &g), v) in params
        .data
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        *v = mu * *v + g;
        *theta -= lr * (g + mu * *v);
    }
}
