//! Trainable parameters and the Adam update.

use std::borrow::BorrowMut;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let zeros = Tensor::zeros(tensor.shape());
        Self {
            name: name.into(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            tensor,
            step: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one bias-corrected Adam update to every parameter.
    ///
    /// Parameters without an entry in `grads` are updated with a zero
    /// gradient. Nothing is modified if any gradient is non-finite or
    /// mis-shaped.
    pub fn step<P: BorrowMut<Parameter>>(&self, params: &mut [P], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in params.iter() {
            let p = p.borrow();
            if let Some(g) = grads.get(&p.name) {
                if g.shape() != p.tensor.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient for {} has shape {:?}", p.name, g.shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        for p in params.iter_mut() {
            let p = p.borrow_mut();
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let grad = grads.get(&p.name);
            let w = p.tensor.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, g: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), g)])
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut p = vec![Parameter::new("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap())];
        let adam = Adam::new(0.1);
        adam.step(&mut p, &grads("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap()))
            .unwrap();
        let before = p[0].clone();
        adam.step(&mut p, &grads("w", Tensor::zeros(&[2]))).unwrap();
        // m decays by beta1; the bias-corrected update is still nonzero, so compare moments only
        for (a, b) in p[0].first_moment().data().iter().zip(before.first_moment().data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        for (a, b) in p[0].second_moment().data().iter().zip(before.second_moment().data()) {
            assert!((a - 0.999 * b).abs() < 1e-15);
        }
        assert_eq!(p[0].step(), 2);

        let mut fresh = vec![Parameter::new("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap())];
        adam.step(&mut fresh, &grads("w", Tensor::zeros(&[2]))).unwrap();
        assert_eq!(fresh[0].tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let g = Tensor::new(&[4], vec![0.3, -2.0, 1e-3, -50.0]).unwrap();
        let mut p = vec![Parameter::new("w", Tensor::zeros(&[4]))];
        let lr = 1e-4;
        Adam::new(lr).step(&mut p, &grads("w", g.clone())).unwrap();
        for (w, g) in p[0].tensor.data().iter().zip(g.data()) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15);
            assert!((w + lr * g.signum()).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn constant_gradient_does_not_grow_updates() {
        let mut p = vec![Parameter::new("w", Tensor::zeros(&[1]))];
        let adam = Adam::new(1e-3);
        let g = grads("w", Tensor::new(&[1], vec![0.7]).unwrap());
        let mut prev = 0.0;
        let mut last_delta = f64::INFINITY;
        for _ in 0..2 {
            adam.step(&mut p, &g).unwrap();
            let delta = (p[0].tensor.data()[0] - prev).abs();
            assert!(delta <= last_delta + 1e-12);
            last_delta = delta;
            prev = p[0].tensor.data()[0];
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = vec![
            Parameter::new("a", Tensor::full(&[1], 1.0)),
            Parameter::new("b", Tensor::full(&[1], 1.0)),
        ];
        let mut g = grads("a", Tensor::full(&[1], 1.0));
        g.insert("b".into(), Tensor::full(&[1], f64::NAN));
        let before = p.clone();
        assert!(Adam::new(0.1).step(&mut p, &g).is_err());
        assert_eq!(p, before);
    }
}
