//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetero_net::{ModelConfig, Params, TensorRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Params,
    v: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (eps, wd) = (self.eps as f32, self.weight_decay as f32);
        let grads = grads.tensors();
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] + wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            kind: "adam".into(),
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            step: self.step,
            m: self.m.to_records(),
            v: self.v.to_records(),
        }
    }

    pub fn from_state(cfg: &ModelConfig, s: &AdamState) -> Result<Self> {
        if s.kind != "adam" {
            return Err(Error::InvalidConfig(format!(
                "unknown optimizer {}",
                s.kind
            )));
        }
        Ok(Self {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
            step: s.step,
            m: Params::from_records(cfg, &s.m)?,
            v: Params::from_records(cfg, &s.v)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let cfg = ModelConfig {
            stem_channels: 2,
            trunk_channels: 2,
            head_channels: 2,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, &mut stream(0, Stream::Init)).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.5));
        let mut opt = Adam::new(&p, 1e-3, 0.0);
        opt.apply(&mut p, &g);
        for ((_, a), (_, b)) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((y - x - 1e-3).abs() < 1e-6);
            }
        }
        let restored = Adam::from_state(&cfg, &opt.state()).unwrap();
        assert_eq!(restored, opt);
    }
}
