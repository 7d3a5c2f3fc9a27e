use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update; returns the new parameters.
    pub fn step(&mut self, params: &[&Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            );
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err("adam_step", format!("param {:?} grad {:?}", p.shape(), g.shape()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = p.len();
            let (pd, gd) = (p.data(), g.data());
            let (md, vd) = (self.m[i].data(), self.v[i].data());
            let mut new_p = Vec::with_capacity(n);
            let mut new_m = Vec::with_capacity(n);
            let mut new_v = Vec::with_capacity(n);
            for j in 0..n {
                let gj = gd[j] + weight_decay * pd[j];
                let mj = beta1 * md[j] + (1.0 - beta1) * gj;
                let vj = beta2 * vd[j] + (1.0 - beta2) * gj * gj;
                new_p.push(pd[j] - lr * (mj / bc1) / ((vj / bc2).sqrt() + eps));
                new_m.push(mj);
                new_v.push(vj);
            }
            self.m[i] = Tensor::new(p.shape(), new_m)?;
            self.v[i] = Tensor::new(p.shape(), new_v)?;
            out.push(Tensor::new(p.shape(), new_p)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let out = st.step(&[&p], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(out[0], p);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::scalar(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[&p]);
        let out = st.step(&[&p], &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        assert!((1.0 - out[0].item().unwrap() - 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scripted_reference() {
        // scripted: g1 = 0.5, g2 = -0.25, lr = 0.01, p0 = 2
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.01);
        let mut p_ref: f64 = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.5), (2, -0.25)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamState::new(cfg, &[&p]);
        for g in [0.5, -0.25] {
            p = st.step(&[&p], &[Tensor::scalar(g)]).unwrap().remove(0);
        }
        assert!((p.item().unwrap() - p_ref).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(st.step(&[&p], &[Tensor::zeros(&[3])]).is_err());
    }
}
