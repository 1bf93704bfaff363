use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Bias-corrected Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Parameters without a gradient are treated as having a zero one.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State(format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len())));
        }
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = &store.get(id).grad {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient in '{}' at index {i}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let grad = t.grad.take();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![value]).unwrap());
        s
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut s = one_param(0.0);
        let id = s.ids().next().unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        opt.step(&mut s).unwrap();
        let delta = s.get(id).data()[0];
        assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut s = one_param(3.5);
        let id = s.ids().next().unwrap();
        let mut opt = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            s.zero_grads();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 3.5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = one_param(0.0);
        let id = s.ids().next().unwrap();
        s.get_mut(id).accumulate_grad(&[f64::NAN]);
        let err = AdamState::new(&s, AdamConfig::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("'p'"));
    }
}
