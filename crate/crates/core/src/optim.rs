//! Adam over the trainable parameters of a [`ParamStore`].

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros: Vec<Vec<S>> = store.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from per-parameter gradients (indexed like the store).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps) = (S::one(), S::of(self.eps));
        let c1 = S::of(1.0 - self.beta1.powi(self.t));
        let c2 = S::of(1.0 - self.beta2.powi(self.t));
        let lr = S::of(self.lr);
        for (id, g) in grads.iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("adam", format!("gradient {:?} for {}", g.shape(), store.name(id))));
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(vec![0.3, -1.2]), true).unwrap();
        let before = store.get(0).clone();
        let mut adam = Adam::new(&store, 1e-2);
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(store.get(0), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(vec![1.0, 1.0]), true).unwrap();
        store.add("frozen", Tensor::vector(vec![5.0]), false).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::vector(vec![2.0, -0.5]), Tensor::vector(vec![1.0])]).unwrap();
        let w = store.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - 1.1).abs() < 1e-7);
        assert_eq!(store.get(1).data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::vector(vec![3.0]), true).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.get(0).data()[0];
            adam.step(&mut store, &[Tensor::vector(vec![2.0 * (x - 1.0)])]).unwrap();
        }
        assert!((store.get(0).data()[0] - 1.0).abs() < 1e-2);
    }
}
