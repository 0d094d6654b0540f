use std::collections::BTreeMap;

use super::{AutodiffError, Gradients, ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Strength `lambda` of the `lambda * ||theta||^2` penalty, applied as decoupled decay.
    pub weight_decay: f64,
}

impl AdamConfig {
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

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-4, 1e-5)
    }
}

/// Adam with decoupled weight decay.
///
/// After the moment update each parameter is multiplied by `1 - lr * 2 * lambda`,
/// which is a gradient step on `lambda * ||theta||^2`.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self, AutodiffError> {
        if !(config.lr > 0.0) {
            return Err(AutodiffError::Config(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if config.weight_decay < 0.0 {
            return Err(AutodiffError::Config(format!(
                "weight decay must be >= 0, got {}",
                config.weight_decay
            )));
        }
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every id in `trainable` that has a gradient. Fails before touching any
    /// parameter if a gradient holds a non-finite value.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, trainable: &[ParamId]) -> Result<(), AutodiffError> {
        for &id in trainable {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.value(id).shape() {
                    return Err(AutodiffError::Shape {
                        op: "adam_step",
                        detail: format!("param {} shape {:?} vs grad {:?}", id.0, store.value(id).shape(), g.shape()),
                    });
                }
                if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite {
                        param: id.0,
                        name: store.get(id).name.clone(),
                        index: pos,
                    });
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(1.0 - c.lr * 2.0 * c.weight_decay);

        for &id in trainable {
            let Some(g) = grads.get(id) else { continue };
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p[i] *= decay;
            }
        }
        Ok(())
    }
}
