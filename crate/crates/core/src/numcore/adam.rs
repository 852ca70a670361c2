use super::nn::Trainable;
use super::tape::Param;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update using the gradients stored in `params`. Moments are
    /// created lazily on the first call. Nothing is modified when a gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<S>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if self.first.is_empty() && self.step == 0 {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("state tracks {} tensors, got {}", self.first.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.shape() != self.first[i].shape() {
                return Err(Error::shape(format!("adam slot {i}"), "moment/parameter shape differs"));
            }
            if !p.grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter slot {i}")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let gk = g[k].to_f64_lossy();
                let mk = b1 * m[k].to_f64_lossy() + (1.0 - b1) * gk;
                let vk = b2 * v[k].to_f64_lossy() + (1.0 - b2) * gk * gk;
                m[k] = S::of(mk);
                v[k] = S::of(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                w[k] = w[k] - S::of(update);
            }
        }
        Ok(())
    }

    /// Steps every non-frozen parameter of `model`, then clears all gradients.
    pub fn step_model<M: Trainable<S> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let res = {
            let mut params = model.trainable_params_mut();
            self.step(&mut params, lr)
        };
        model.zero_grad();
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64], grad: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::row(vals));
        p.grad.fill(grad);
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(&[1.0, -2.0], 0.0);
        let mut st = AdamState::default();
        st.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 => delta = -lr * g / (|g| + eps)
        let mut p = param(&[0.5, 3.0, -1.0], 1.0);
        let mut st = AdamState::default();
        st.step(&mut [&mut p], 0.1).unwrap();
        for (after, before) in p.value.data().iter().zip([0.5, 3.0, -1.0]) {
            let expect = -0.1 * 1.0 / (1.0 + 1e-8);
            assert!((after - before - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = param(&[0.3, 0.7], 0.0);
            let mut st = AdamState::default();
            for k in 0..10 {
                p.grad.fill((k as f64).sin());
                st.step(&mut [&mut p], 0.01).unwrap();
            }
            p.value
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = param(&[1.0], f64::NAN);
        let mut st = AdamState::default();
        assert!(matches!(st.step(&mut [&mut p], 0.1), Err(Error::Numeric(_))));
        assert_eq!(p.value.data(), &[1.0]);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn bad_learning_rate() {
        let mut p = param(&[1.0], 1.0);
        assert!(AdamState::default().step(&mut [&mut p], 0.0).is_err());
    }
}
