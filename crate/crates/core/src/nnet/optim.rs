//! LAMB optimizer and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::weights::Weights;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-6,
        }
    }
}

/// One LAMB update of every parameter, in place.
///
/// Per parameter tensor: bias-corrected Adam moments give the direction
/// `r = m_hat / (sqrt(v_hat) + eps) + wd * w`, which is rescaled by the trust
/// ratio `|w| / |r|` (1 when either norm is zero).
pub fn lamb_step<T: Real>(
    weights: &mut Weights<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    cfg: &LambConfig,
) -> Result<()> {
    for (name, p) in weights.params() {
        match grads.get(name) {
            Some(g) if g.shape() == p.value.shape() => {}
            Some(g) => {
                return Err(invalid(format!(
                    "gradient of {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.value.shape()
                )))
            }
            None => return Err(invalid(format!("missing gradient for {name}"))),
        }
    }
    weights.step += 1;
    let t = weights.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));

    for (name, p) in weights.params_mut() {
        let g = grads[name].data();
        let mut update = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let m = b1 * p.m.data()[i] + (T::one() - b1) * g[i];
            let v = b2 * p.v.data()[i] + (T::one() - b2) * g[i] * g[i];
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m.as_f64() / bc1;
            let v_hat = v.as_f64() / bc2;
            let w = p.value.data()[i].as_f64();
            update.push(m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
        }
        let w_norm = p.value.norm();
        let r_norm = update.iter().map(|r| r * r).sum::<f64>().sqrt();
        let ratio = if w_norm > 0.0 && r_norm > 0.0 {
            w_norm / r_norm
        } else {
            1.0
        };
        let scale = lr * ratio;
        for (w, r) in p.value.data_mut().iter_mut().zip(update) {
            *w = T::c(w.as_f64() - scale * r);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(name: &str, data: &[f64]) -> Weights<f64> {
        let mut w = Weights::new();
        w.insert(name, Tensor::new(&[data.len()], data.to_vec()).unwrap()).unwrap();
        w
    }

    fn grads(name: &str, data: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new(&[data.len()], data.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = one_param("a", &[0.5, -2.0]);
        let before = w.get("a").unwrap().clone();
        let cfg = LambConfig {
            weight_decay: 0.0,
            ..LambConfig::default()
        };
        lamb_step(&mut w, &grads("a", &[0.0, 0.0]), 0.1, &cfg).unwrap();
        assert_eq!(w.get("a").unwrap(), &before);
    }

    #[test]
    fn scalar_step_by_hand() {
        // m_hat = v_hat = 1, r = 1 / (1 + 1e-6), ratio * r = |w| = 1
        let mut w = one_param("a", &[1.0]);
        let cfg = LambConfig {
            weight_decay: 0.0,
            ..LambConfig::default()
        };
        lamb_step(&mut w, &grads("a", &[1.0]), 0.1, &cfg).unwrap();
        assert!((w.get("a").unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(w.step, 1);
    }

    #[test]
    fn trust_ratio_is_scale_invariant() {
        let mut w = Weights::new();
        w.insert("small", Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        w.insert("large", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        let mut g = grads("small", &[0.01, 0.02, -0.03]);
        g.insert("large".into(), Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap());
        let before_small = w.get("small").unwrap().clone();
        let before_large = w.get("large").unwrap().clone();
        let cfg = LambConfig {
            weight_decay: 0.0,
            ..LambConfig::default()
        };
        lamb_step(&mut w, &g, 0.05, &cfg).unwrap();
        let rel = |after: &Tensor<f64>, before: &Tensor<f64>| {
            let diff: f64 = after
                .data()
                .iter()
                .zip(before.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diff / before.norm()
        };
        let (rs, rl) = (rel(w.get("small").unwrap(), &before_small), rel(w.get("large").unwrap(), &before_large));
        assert!((rs - rl).abs() < 1e-9, "{rs} vs {rl}");
    }

    #[test]
    fn missing_or_misshaped_gradient_is_rejected() {
        let mut w = one_param("a", &[1.0]);
        assert!(lamb_step(&mut w, &BTreeMap::new(), 0.1, &LambConfig::default()).is_err());
        assert!(lamb_step(&mut w, &grads("a", &[1.0, 2.0]), 0.1, &LambConfig::default()).is_err());
        assert_eq!(w.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(2000, 2.4e-4, 2000, 100_000), 2.4e-4);
        assert_eq!(lr_at(0, 2.4e-4, 2000, 100_000), 0.0);
        assert!(lr_at(100_000, 2.4e-4, 2000, 100_000).abs() < 1e-12);
        assert!((lr_at(1000, 2.4e-4, 2000, 100_000) - 1.2e-4).abs() < 1e-18);
        let mid = lr_at(51_000, 1.0, 2000, 100_000);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_bounded(step in 0u64..10_000, warm in 0u64..500) {
            let lr = lr_at(step, 1e-3, warm, 10_000);
            proptest::prop_assert!((0.0..=1e-3).contains(&lr));
        }
    }
}
