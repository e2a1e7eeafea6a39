use serde::{Deserialize, Serialize};

use super::ParameterSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `<= 0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Clips the global gradient norm, then applies Adam with decoupled weight decay
/// to every parameter. Gradients are cleared afterwards.
pub fn optimizer_step(params: &mut ParameterSet, config: &OptimizerConfig) -> StepReport {
    optimizer_step_filtered(params, config, |_| true)
}

/// Like [`optimizer_step`] but only parameters whose name passes `filter` are
/// touched (their gradients also define the clipping norm); the rest keep
/// their values and optimizer moments.
pub fn optimizer_step_filtered(
    params: &mut ParameterSet,
    config: &OptimizerConfig,
    filter: impl Fn(&str) -> bool,
) -> StepReport {
    assert!(config.learning_rate > 0.0, "learning rate must be positive");
    let grad_norm = params
        .iter()
        .filter(|p| filter(&p.name))
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    let clip_scale = if config.clip_norm > 0.0 && grad_norm > config.clip_norm {
        config.clip_norm / grad_norm
    } else {
        1.0
    };
    for p in params.iter_mut() {
        if !filter(&p.name) {
            continue;
        }
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let decay = config.learning_rate * config.weight_decay;
        let grad = p.grad.take();
        let n = p.value.len();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g.data()[i]) * clip_scale;
            let m = &mut p.first_moment.data_mut()[i];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            let m_hat = *m / bc1;
            let v = &mut p.second_moment.data_mut()[i];
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let v_hat = *v / bc2;
            let w = &mut p.value.data_mut()[i];
            *w -= decay * *w;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    StepReport {
        grad_norm,
        clip_scale,
    }
}
