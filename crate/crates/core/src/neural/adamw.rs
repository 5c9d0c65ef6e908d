use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::RamParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: RamParams,
    pub v: RamParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &RamParams) -> Self {
        AdamWState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// p ← p·(1 − lr·wd) − lr · m̂ / (sqrt(v̂) + eps)
/// ```
///
/// where `m̂`, `v̂` are bias-corrected moments.
pub fn adamw_step(
    params: &mut RamParams,
    grads: &RamParams,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.dims != params.dims || state.m.dims != params.dims || state.v.dims != params.dims {
        return Err(Error::dims(
            "adamw_step",
            format!("{:?}", params.dims),
            format!("{:?}", grads.dims),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;

    let p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let m_tensors = state.m.tensors_mut();
    let v_tensors = state.v.tensors_mut();
    for (((p, g), m), v) in p_tensors
        .into_iter()
        .zip(g_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        let (p, g, m, v) = (p.1, g.1, m.1, v.1);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::RamDims;

    fn dims() -> RamDims {
        RamDims { input_dim: 1, model_dim: 2, heads: 1, ffn_dim: 2 }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = RamParams::init(dims(), 1).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut s, 0.1, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = RamParams::zeros(dims());
        p.human_proj.bias[0] = 1.0;
        let mut g = p.zeros_like();
        g.human_proj.bias[0] = 1.0;
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &g, &mut s, 0.1, &cfg).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.human_proj.bias[0] - expected).abs() < 1e-15);
        assert!((p.human_proj.bias[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_alone_is_geometric() {
        let mut p = RamParams::zeros(dims());
        p.query.weight[(0, 0)] = 2.0;
        let g = p.zeros_like();
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        let (lr, steps) = (0.05, 7);
        for _ in 0..steps {
            adamw_step(&mut p, &g, &mut s, lr, &cfg).unwrap();
        }
        let want = 2.0 * (1.0 - lr * cfg.weight_decay).powi(steps);
        assert!((p.query.weight[(0, 0)] - want).abs() < 1e-14);
    }
}
