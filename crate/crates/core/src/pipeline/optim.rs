//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Restores moments saved after `step` updates.
    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        params: &[Tensor],
    ) -> Result<Self> {
        let fits = |s: &[Tensor]| s.len() == params.len() && s.iter().zip(params).all(|(a, p)| a.shape() == p.shape());
        if !fits(&m) || !fits(&v) {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        Ok(Self { config, step, m, v })
    }

    /// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                let gd = gv as f64;
                let mn = c.beta1 * *mv as f64 + (1.0 - c.beta1) * gd;
                let vn = c.beta2 * *vv as f64 + (1.0 - c.beta2) * gd * gd;
                *mv = mn as f32;
                *vv = vn as f32;
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + c.eps) + c.weight_decay * *pv as f64;
                *pv = (*pv as f64 - c.lr * upd) as f32;
            }
        }
        Ok(())
    }
}
