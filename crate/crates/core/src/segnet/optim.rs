use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{GradientSet, SegModel};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerStep {
    pub lr: f64,
}

/// Adam moments for one model. Moments are stored in the model's element
/// type; the update arithmetic runs in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &SegModel<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = model
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.data.len()])
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// Returns the updated model and advances the moment estimates.
    pub fn apply_update(
        &mut self,
        model: &SegModel<T>,
        grads: &GradientSet<T>,
        step: OptimizerStep,
    ) -> Result<SegModel<T>> {
        if grads.grads.len() != model.params().len()
            || grads
                .grads
                .iter()
                .zip(model.params())
                .any(|(g, p)| g.len() != p.data.len())
        {
            return Err(Error::Dimension("gradient set does not match model".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut next = model.clone();
        for (i, p) in next.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.grads[i]);
            for j in 0..p.data.len() {
                let gj = g[j].f64();
                let mj = beta1 * m[j].f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let upd = step.lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p.data[j] = T::of(p.data[j].f64() - upd);
            }
        }
        Ok(next)
    }
}
