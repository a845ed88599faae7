use crate::error::{LlipError, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

use super::TrainConfig;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Moments {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()));
        }
        Moments { m: m.clone(), v: m }
    }
}

/// Matrices decay; vectors (biases, gains, loss scalars) do not.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One AdamW update of a single tensor. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: usize,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = f64::from(grad[i]);
        let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
        let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        let p = f64::from(param[i]);
        param[i] = (p - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * p)) as f32;
    }
}

/// Applies AdamW to every parameter. `grads` follows the store order. A
/// non-finite gradient aborts before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grads: &[Vec<f32>],
    moments: &mut Moments,
    step: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(LlipError::Contract("optimizer steps count from 1".into()));
    }
    if grads.len() != params.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(LlipError::Dimension(format!(
            "{} parameters, {} gradients, {}/{} moments",
            params.len(),
            grads.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(LlipError::Dimension(format!(
                "gradient of `{}` has {} entries, parameter has {}",
                name,
                g.len(),
                p.numel()
            )));
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(LlipError::Numeric(format!(
                "gradient of `{}` (entry {}) at step {}: {}",
                name, bad, step, g[bad]
            )));
        }
    }
    let ms = moments.m.iter_mut();
    let vs = moments.v.iter_mut();
    for ((((_, p), g), (_, m)), (_, v)) in params.iter_mut().zip(grads).zip(ms).zip(vs) {
        let decay = decays(p.shape());
        adamw_update(p.data_mut(), g, m.data_mut(), v.data_mut(), step, lr, cfg, decay);
    }
    Ok(())
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `cfg.steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr_peak;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.steps {
        return 0.0;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}
