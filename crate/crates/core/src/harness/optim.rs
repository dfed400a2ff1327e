use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Adam without weight decay. Moments are keyed by parameter name, so one
/// optimizer can drive several stores as long as their names are disjoint.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Advances the step counter once for a whole update.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates every trainable tensor that holds a gradient, then zeroes the gradients.
    /// Frozen tensors are never written.
    pub fn update(&mut self, store: &mut ParamStore<T>) {
        let t = self.t.max(1);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = T::from_f64_lossy(self.lr * c2.sqrt() / c1);
        let eps = T::from_f64_lossy(self.eps * c2.sqrt());
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        for (name, tensor) in store.iter_mut() {
            if !tensor.is_trainable() {
                continue;
            }
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                data[i] -= step * m[i] / (v[i].sqrt() + eps);
                grad[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap().with_trainable(true)).unwrap();
        store.insert("frozen", Tensor::<f64>::ones(&[1])).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.begin_step();
        opt.update(&mut store);
        let w = store.get("w").unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(store.get("frozen").unwrap().data(), &[1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::<f64>::new(&[1], vec![5.0]).unwrap().with_trainable(true)).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get("x").unwrap().data()[0];
            store.get_mut("x").unwrap().accumulate_grad(&[2.0 * (x - 2.0)]).unwrap();
            opt.begin_step();
            opt.update(&mut store);
        }
        assert!((store.get("x").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }
}
