use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numcore::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

/// Default linear-schedule endpoints.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
/// Offset of the cosine schedule and its per-step variance cap.
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

/// Variance schedule `beta_1..beta_T` with `alpha_t = 1 - beta_t` and
/// `alpha_bar_t = prod_{i<=t} alpha_i`. Steps are 1-based; `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    kind: ScheduleKind,
    betas: Vec<S>,
    alphas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        ensure!(steps >= 2, Contract, "a schedule needs at least 2 steps, got {steps}");
        let betas = match kind {
            ScheduleKind::Linear => linspace(LINEAR_BETA_START, LINEAR_BETA_END, steps),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, COSINE_MAX_BETA))
                    .collect()
            }
        };
        Self::build(kind, betas)
    }

    /// Linear schedule with explicit endpoints.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 2, Contract, "a schedule needs at least 2 steps, got {steps}");
        Self::build(ScheduleKind::Linear, linspace(beta_start, beta_end, steps))
    }

    /// Arbitrary betas, including single-step chains.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        ensure!(!betas.is_empty(), Contract, "empty beta sequence");
        Self::build(ScheduleKind::Linear, betas.to_vec())
    }

    pub(crate) fn build(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Contract(format!("beta {b} outside (0, 1)")));
        }
        let mut prod = 1.0;
        let mut alpha_bars = Vec::with_capacity(betas.len());
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(S::of(prod));
        }
        Ok(Self {
            kind,
            alphas: betas.iter().map(|&b| S::of(1.0 - b)).collect(),
            betas: betas.into_iter().map(S::of).collect(),
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> S {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[S] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bars
    }

    /// Signal-to-noise ratio `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> S {
        let ab = self.alpha_bar(t);
        ab / (S::one() - ab)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Contract,
            "step {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    /// Closed-form forward marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`;
    /// `t` is one step per row or a single shared step.
    pub fn q_sample(&self, x0: &Tensor<S>, t: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(
            x0.shape() == eps.shape(),
            Contract,
            "noise shape {:?} differs from sample shape {:?}",
            eps.shape(),
            x0.shape()
        );
        ensure!(
            t.len() == 1 || t.len() == x0.rows(),
            Contract,
            "{} steps for {} rows",
            t.len(),
            x0.rows()
        );
        for &s in t {
            self.check_step(s)?;
        }
        let cols = x0.cols();
        let mut out = x0.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let step = if t.len() == 1 { t[0] } else { t[k / cols] };
            let ab = self.alpha_bar(step);
            *v = ab.sqrt() * *v + (S::one() - ab).sqrt() * eps.data()[k];
        }
        Ok(out)
    }

    /// Uniform step draws in `[1, T]`.
    pub fn sample_steps<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(1..=self.steps())).collect()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_two_steps() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 2).unwrap();
        assert_eq!(s.betas(), &[1e-4, 2e-2]);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.979902).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn betas_in_open_unit_interval_and_alpha_bar_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::<f64>::new(kind, 32).unwrap();
            assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(1) < 1.0);
        }
    }

    #[test]
    fn cosine_reaches_noise() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 32).unwrap();
        assert!(s.alpha_bar(32) < 1e-3);
    }

    #[test]
    fn too_few_steps() {
        assert!(NoiseSchedule::<f64>::new(ScheduleKind::Linear, 1).is_err());
        assert!(NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 0).is_err());
        assert!(NoiseSchedule::<f64>::from_betas(&[0.5]).is_ok());
        assert!(NoiseSchedule::<f64>::from_betas(&[1.0]).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 32).unwrap();
        let x0 = Tensor::row(&[0.3, -1.2]);
        let out = s.q_sample(&x0, &[7], &Tensor::zeros(&[1, 2])).unwrap();
        let k = s.alpha_bar(7).sqrt();
        assert_eq!(out.data(), &[0.3 * k, -1.2 * k]);
    }

    #[test]
    fn q_sample_first_step_near_identity() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let out = s.q_sample(&x0, &[1], &eps).unwrap();
        let dev = out.sub(&x0).sq_norm().sqrt();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * eps.sq_norm().sqrt()
            + (1.0 - s.alpha_bar(1).sqrt()) * x0.sq_norm().sqrt();
        assert!(dev <= bound + 1e-12);
    }

    #[test]
    fn q_sample_rejects_bad_step() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Linear, 8).unwrap();
        let x = Tensor::zeros(&[1, 1]);
        assert!(s.q_sample(&x, &[0], &x).is_err());
        assert!(s.q_sample(&x, &[9], &x).is_err());
    }

    #[test]
    fn q_sample_marginal_variance() {
        // Monte-Carlo oracle: Var[x_t - sqrt(ab) x0] = 1 - ab.
        let s = NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let t = 12;
        let x0 = Tensor::full(&[n, 1], 0.7);
        let eps = Tensor::randn(&[n, 1], 1.0, &mut rng);
        let xt = s.q_sample(&x0, &[t], &eps).unwrap();
        let resid: Vec<f64> = xt.data().iter().map(|v| v - s.alpha_bar(t).sqrt() * 0.7).collect();
        let m = resid.iter().sum::<f64>() / n as f64;
        let var = resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha_bar(t);
        assert!((var / expect - 1.0).abs() < 0.02, "{var} vs {expect}");
    }
}
