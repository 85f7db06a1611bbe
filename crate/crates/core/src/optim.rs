//! First-order optimizers over flat parameter slices.

use crate::scalar::Scalar;

/// Adam with bias-corrected moments for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(eps),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Heavy-ball SGD: `u ← μu + g`, `θ ← θ − lr·u`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    lr: T,
    momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            velocity: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), self.velocity.len());
        for ((p, &g), u) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *u = self.momentum * *u + g;
            *p -= self.lr * *u;
        }
    }
}
