use rand::Rng;

use super::model::{Denoiser, DiffusionModel, Parameterization};
use crate::error::{ensure, Result};
use crate::numcore::{Scalar, Tape, Tensor};

impl<S: Scalar, D: Denoiser<S>> DiffusionModel<S, D> {
    /// Weight of the step-`t` noise residual in the variational bound,
    /// `beta_t / (2 alpha_t (1 - alpha_bar_t))`.
    pub fn elbo_weight(&self, t: usize) -> S {
        let s = &self.schedule;
        let two = S::of(2.0);
        s.beta(t) / (two * s.alpha(t) * (S::one() - s.alpha_bar(t)))
    }

    /// Per-row residual `mean_j (eps - eps_hat)^2` at step `t` for given noise.
    /// Flow models report the velocity residual at `tau = 1 - t / T`.
    pub fn step_residual(
        &self,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        t: usize,
        noise: &Tensor<S>,
    ) -> Result<Vec<S>> {
        let tape = Tape::new();
        let c = cond.map(|c| tape.constant(c.clone()));
        let (pred, target) = if self.parameterization == Parameterization::Flow {
            let tau = S::one() - S::of(t as f64 / self.steps() as f64);
            let xt = x0.zip_map(noise, |x, n| (S::one() - tau) * n + tau * x);
            let v = self.predict_velocity(&tape, tape.constant(xt), &[tau], c)?.value();
            (v, x0.sub(noise))
        } else {
            let xt = self.schedule.q_sample(x0, &[t], noise)?;
            (self.predict_eps(&tape, tape.constant(xt), &[t], c)?.value(), noise.clone())
        };
        let d = S::of(x0.cols() as f64);
        let diff = pred.sub(&target);
        Ok((0..x0.rows())
            .map(|r| diff.row_slice(r).iter().map(|&v| v * v).sum::<S>() / d)
            .collect())
    }

    /// Likelihood score per row: negated Monte-Carlo estimate of the weighted
    /// denoising residual summed over all steps. Higher means more likely.
    /// Flow models weight every step by `1 / T`.
    pub fn elbo_proxy<R: Rng + ?Sized>(
        &self,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        mc_draws: usize,
        rng: &mut R,
    ) -> Result<Vec<S>> {
        ensure!(mc_draws >= 1, Contract, "elbo proxy needs at least one draw");
        self.check_batch(x0, cond)?;
        let mut acc = vec![S::zero(); x0.rows()];
        for _ in 0..mc_draws {
            for t in 1..=self.steps() {
                let noise = Tensor::randn(x0.shape(), 1.0, rng);
                let w = self.step_weight(t);
                for (a, r) in acc.iter_mut().zip(self.step_residual(x0, cond, t, &noise)?) {
                    *a = *a + w * r;
                }
            }
        }
        let k = S::of(mc_draws as f64);
        Ok(acc.into_iter().map(|a| -a / k).collect())
    }

    /// Batch-mean residual per step (index 0 is step 1), one draw each.
    pub fn elbo_terms<R: Rng + ?Sized>(
        &self,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        rng: &mut R,
    ) -> Result<Vec<S>> {
        self.check_batch(x0, cond)?;
        let n = S::of(x0.rows() as f64);
        (1..=self.steps())
            .map(|t| {
                let noise = Tensor::randn(x0.shape(), 1.0, rng);
                Ok(self.step_residual(x0, cond, t, &noise)?.into_iter().sum::<S>() / n)
            })
            .collect()
    }

    fn step_weight(&self, t: usize) -> S {
        if self.parameterization == Parameterization::Flow {
            S::one() / S::of(self.steps() as f64)
        } else {
            self.elbo_weight(t)
        }
    }
}
