//! Adam with per-group learning rates and weight decay.

use serde::{Deserialize, Serialize};

use crate::backbone::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_last: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the weights instead of adding `λθ` to the
    /// gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_last: 1e-4,
            lr_rest: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled: false,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::LastLayer => self.lr_last,
            ParamGroup::Rest => self.lr_rest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_last >= 0.0
            && self.lr_rest >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Moment buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Ok(OptimState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One Adam update. `grads` is aligned with `params.iter()`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.is_empty() {
            return Err(Error::shape("adam_step", "no gradients"));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients and {} buffers for {} parameters", grads.len(), self.m.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{}` is {:?}, gradient {:?}", p.name, p.tensor.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let lr = c.lr(p.group);
            let state = m.data_mut().iter_mut().zip(v.data_mut());
            for ((theta, &g), (mi, vi)) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(state) {
                let gi = if c.decoupled { g } else { g + c.weight_decay * *theta };
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mut update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                if c.decoupled {
                    update += c.weight_decay * *theta;
                }
                *theta -= lr * update;
            }
        }
        Ok(())
    }

    /// Named tensors for a CSNT container: `adam.step`, `adam.m.<param>`,
    /// `adam.v.<param>`.
    pub fn to_entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("adam.m.{}", p.name), m.clone()));
            out.push((format!("adam.v.{}", p.name), v.clone()));
        }
        out
    }

    pub fn from_entries(config: AdamConfig, params: &ParamStore, entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("optimizer state lacks `{name}`")))
        };
        let step = find("adam.step")?.item()?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Data(format!("bad optimizer step {step}")));
        }
        let mut state = OptimState::new(config, params)?;
        state.step = step as u64;
        for (i, p) in params.iter().enumerate() {
            for (buf, kind) in [(&mut state.m[i], "m"), (&mut state.v[i], "v")] {
                let t = find(&format!("adam.{kind}.{}", p.name))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::Data(format!("optimizer buffer for `{}` has wrong shape", p.name)));
                }
                *buf = t.clone();
            }
        }
        Ok(state)
    }
}
