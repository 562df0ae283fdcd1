use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::{Real, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction. Moment buffers follow the store's order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub params: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: AdamParams, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            params,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = T::from_f64_lossy(lr / bc1);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_towards_the_minimum_of_a_quadratic_bowl() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]), true);
        let loss = |s: &ParamStore<f64>| s.get(id).value.data().iter().map(|v| v * v).sum::<f64>();
        let mut adam = Adam::new(
            AdamParams { lr: 1e-2, beta1: 0.5, beta2: 0.999, eps: 1e-8 },
            &store,
        );
        let before = loss(&store);
        let grad = store.get(id).value.map(|v| 2.0 * v);
        adam.step(&mut store, &[grad]);
        assert!(loss(&store) < before);
    }
}
