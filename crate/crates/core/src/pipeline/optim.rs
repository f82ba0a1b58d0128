//! Adam with decoupled weight decay and a warmup/linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, TcdError};
use crate::transformer::ParamStore;

/// Linear ramp `0 → peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * (step as f64 / warmup as f64);
    }
    peak * ((total - step) as f64 / (total - warmup) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and per-parameter update counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && self.steps.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.value.shape() == m.shape() && p.value.shape() == v.shape())
    }
}

/// One Adam update. Parameters that are frozen or received no gradient are
/// left untouched. Weight decay `lr·wd·p` applies to weight matrices only.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(TcdError::Contract("optimizer state does not match parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(TcdError::dim("adam_step", p.value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(TcdError::Numeric(format!("non-finite gradient for {}", p.name)));
            }
        }
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if !p.trainable {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let wd = if p.decays() { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &gk), mk), vk) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let update = (*mk / c1) / ((*vk / c2).sqrt() + cfg.eps);
            *w -= lr * (update + wd * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ParamKind;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-4, 100, 1000), 0.0);
        assert_eq!(lr_at(100, 1e-4, 100, 1000), 1e-4);
        assert_abs_diff_eq!(lr_at(550, 1e-4, 100, 1000), 5e-5, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(50, 1e-4, 100, 1000), 5e-5, epsilon = 1e-18);
        assert_eq!(lr_at(1000, 1e-4, 100, 1000), 0.0);
        assert_eq!(lr_at(0, 1e-4, 0, 10), 1e-4);
    }

    fn store(w: f64, b: f64) -> ParamStore {
        let mut ps = ParamStore::default();
        ps.push("w", Tensor::scalar(w), ParamKind::Weight);
        ps.push("b", Tensor::scalar(b), ParamKind::Bias);
        ps
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut ps = store(2.0, 3.0);
        let mut st = AdamState::new(&ps);
        let g = vec![Some(Tensor::scalar(0.0)), Some(Tensor::scalar(0.0))];
        adam_step(&mut ps, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_abs_diff_eq!(ps.iter().next().unwrap().value.item(), 2.0 - 0.1 * 0.01 * 2.0, epsilon = 1e-15);
        assert_eq!(ps.iter().nth(1).unwrap().value.item(), 3.0);
    }

    #[test]
    fn scalar_hand_computation() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (lr, g, p0) = (0.01, 0.5, 1.0);
        let mut ps = store(p0, 0.0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[Some(Tensor::scalar(g)), None], &mut st, &cfg, lr).unwrap();
        // one step: m̂ = g, v̂ = g², update = g/(|g|+eps)
        let expected = p0 - lr * g / (g.abs() + 1e-8);
        assert_abs_diff_eq!(ps.iter().next().unwrap().value.item(), expected, epsilon = 1e-15);
        adam_step(&mut ps, &[Some(Tensor::scalar(g)), None], &mut st, &cfg, lr).unwrap();
        let m = 0.9 * 0.1 * g + 0.1 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let second = expected - lr * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert_abs_diff_eq!(ps.iter().next().unwrap().value.item(), second, epsilon = 1e-15);
        assert_eq!(st.steps, vec![2, 0]);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let (mut a, mut b) = (store(1.5, -0.5), store(1.5, -0.5));
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        let g = vec![Some(Tensor::scalar(0.3)), Some(Tensor::scalar(-0.7))];
        for _ in 0..5 {
            adam_step(&mut a, &g, &mut sa, &AdamConfig::default(), 1e-3).unwrap();
            adam_step(&mut b, &g, &mut sb, &AdamConfig::default(), 1e-3).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn nan_gradient_rejected_without_partial_update() {
        let mut ps = store(1.0, 1.0);
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let g = vec![Some(Tensor::scalar(1.0)), Some(Tensor::scalar(f64::NAN))];
        let err = adam_step(&mut ps, &g, &mut st, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(matches!(err, TcdError::Numeric(_)));
        assert_eq!(ps, before);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut ps = store(1.0, 1.0);
        ps.freeze_all();
        let mut st = AdamState::new(&ps);
        let g = vec![Some(Tensor::scalar(1.0)), Some(Tensor::scalar(1.0))];
        adam_step(&mut ps, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert!(ps.iter().all(|p| p.value.item() == 1.0));
    }
}
