//! Adam with bias correction over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Applies one update. Every gradient is checked for finiteness before
    /// anything is modified.
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &ParamStore<S>, lr: f64) -> Result<()> {
        if !params.matches_layout(grads) || !params.matches_layout(&self.m) || !params.matches_layout(&self.v) {
            return Err(Error::Contract("parameter, gradient and moment layouts differ".into()));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
        self.step += 1;
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let eps = S::lit(self.config.eps);
        let lr = S::lit(lr);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
