//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("adam-lr-positive", format!("learning rate {} must be > 0", config.lr)));
        }
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect::<Vec<_>>()
        };
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One update. Fails without touching anything if a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::config(
                "adam-shapes",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for id in params.ids() {
            if let Some(pos) = grads.get(id).iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' at element {pos}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let step_size = T::c(c.lr / bc1);
        let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
        let eps = T::c(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
