use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<S>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        check_len(store, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let step_size = S::lit(self.lr * bc2.sqrt() / bc1);
        let eps = S::lit(self.eps * bc2.sqrt());
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *pi -= step_size * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn update<S: Scalar>(&self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        check_len(store, grads)?;
        let lr = S::lit(self.lr);
        for (p, g) in store.tensors_mut().iter_mut().zip(grads) {
            for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                *pi -= lr * gi;
            }
        }
        Ok(())
    }
}

fn check_len<S: Scalar>(store: &ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
    if store.len() != grads.len() {
        return Err(TensorError::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::full(&[2], 1.0));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999);
        adam.update(&mut store, &[Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap()])
            .unwrap();
        let d = store.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::full(&[1], 4.0));
        let sgd = Sgd { lr: 0.25 };
        for _ in 0..50 {
            let g = store.tensors()[0].map(|x| 2.0 * x);
            sgd.update(&mut store, &[g]).unwrap();
        }
        assert!(store.tensors()[0].item().abs() < 1e-10);
    }
}
