use crate::element::Element;
use crate::error::{Result, TapeError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over one [`ParamStore`]. Moments start at zero and
/// are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TapeError::InvalidArgument("adam: first and second moments disagree".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update. `grads` is in store order; every trainable parameter
    /// needs an entry, non-trainable ones are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TapeError::InvalidArgument(format!(
                "adam: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if p.trainable {
                match g {
                    None => return Err(TapeError::MissingGradient { name: p.name.clone() }),
                    Some(g) if g.shape() != p.tensor.shape() => {
                        return Err(TapeError::shape("adam_step", p.tensor.shape(), g.shape()))
                    }
                    Some(_) => {}
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            let Some(g) = g.as_ref().filter(|_| p.trainable) else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi.f64();
                let m1 = beta1 * mi.f64() + (1.0 - beta1) * gi;
                let v1 = beta2 * vi.f64() + (1.0 - beta2) * gi * gi;
                *mi = T::lit(m1);
                *vi = T::lit(v1);
                let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                *w = T::lit(w.f64() - update);
            }
        }
        Ok(())
    }
}
