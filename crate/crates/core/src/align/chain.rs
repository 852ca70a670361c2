//! The reverse process viewed as a multi-step stochastic policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionModel, Parameterization};
use crate::error::{ensure, Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Per-step credit weights over denoising steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KappaKind {
    /// `kappa_t = c^(T - t)`.
    Geometric { c: f64 },
    /// `kappa_t = max(0, cos(z_{t-1} - z_t, z_0 - z_T))`, computed once the
    /// chain has finished.
    Similarity,
}

impl Default for KappaKind {
    fn default() -> Self {
        KappaKind::Geometric { c: 0.95 }
    }
}

/// A recorded stochastic reverse chain.
#[derive(Clone, Debug)]
pub struct Chain {
    /// `latents[i]` holds `z_{T - i}`; the last entry is the sample.
    pub latents: Vec<Tensor<f64>>,
    /// Row log-densities of `z_t -> z_{t-1}` under the sampling model,
    /// indexed like `latents` by `T - t`.
    pub log_probs: Vec<Vec<f64>>,
    pub cond: Option<Tensor<f64>>,
}

impl Chain {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    /// `z_t`.
    pub fn z(&self, t: usize) -> &Tensor<f64> {
        &self.latents[self.steps() - t]
    }

    pub fn sample(&self) -> &Tensor<f64> {
        self.z(0)
    }

    /// Log-density of the transition out of step `t`.
    pub fn log_prob(&self, t: usize) -> &[f64] {
        &self.log_probs[self.steps() - t]
    }
}

/// Policy noise of the transition out of step `t`. Unlike plain sampling,
/// every step is stochastic, including `t = 1`.
pub fn policy_std<D: Denoiser<f64>>(model: &DiffusionModel<f64, D>, t: usize) -> f64 {
    model.schedule.beta(t).sqrt()
}

pub(crate) fn check_stochastic<D>(model: &DiffusionModel<f64, D>) -> Result<()> {
    ensure!(
        model.parameterization != Parameterization::Flow,
        Config,
        "policy-gradient alignment needs an epsilon or score model"
    );
    Ok(())
}

/// Row log-densities of `x` under `N(mean, sigma^2 I)`.
pub fn gaussian_log_prob(x: &Tensor<f64>, mean: &Tensor<f64>, sigma: f64) -> Vec<f64> {
    let d = x.cols() as f64;
    let c = -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    (0..x.rows())
        .map(|r| {
            let sq: f64 = x.row_slice(r).iter().zip(mean.row_slice(r)).map(|(a, b)| (a - b).powi(2)).sum();
            c - sq / (2.0 * sigma * sigma)
        })
        .collect()
}

/// [`gaussian_log_prob`] on the tape, as an `[n, 1]` column.
pub fn gaussian_log_prob_var<'t>(x: &Tensor<f64>, mean: Var<'t, f64>, sigma: f64) -> Var<'t, f64> {
    let d = x.cols() as f64;
    let c = -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    mean.tape()
        .constant(x.clone())
        .sub(mean)
        .square()
        .sum_cols()
        .scale(-1.0 / (2.0 * sigma * sigma))
        .offset(c)
}

/// Reverse-kernel mean on the tape. With `track = false` the noise estimate
/// enters as a constant (same value, no gradient to the network); otherwise
/// its gradient is weighted by `weight`.
pub fn mean_var<'t, D: Denoiser<f64>>(
    model: &DiffusionModel<f64, D>,
    tape: &'t Tape<f64>,
    z: Var<'t, f64>,
    t: usize,
    cond: Option<&Tensor<f64>>,
    track: bool,
    weight: f64,
) -> Result<Var<'t, f64>> {
    let eps = if track {
        let c = cond.map(|c| tape.constant(c.clone()));
        let e = model.predict_eps(tape, z, &[t], c)?;
        if weight == 1.0 {
            e
        } else {
            e.scale_grad(weight)
        }
    } else {
        tape.constant(model.eval_eps(&z.value(), t, cond)?)
    };
    let s = &model.schedule;
    let k = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    Ok(z.sub(eps.scale(k)).scale(1.0 / s.alpha(t).sqrt()))
}

/// Runs the stochastic chain from fresh noise and records every latent and
/// transition log-density.
pub fn record_chain<D: Denoiser<f64>, R: Rng + ?Sized>(
    model: &DiffusionModel<f64, D>,
    n: usize,
    cond: Option<&Tensor<f64>>,
    rng: &mut R,
) -> Result<Chain> {
    check_stochastic(model)?;
    ensure!(n >= 1, Contract, "chain needs at least one sample");
    let mut z = Tensor::randn(&[n, model.data_dim], 1.0, rng);
    model.check_batch(&z, cond)?;
    let mut latents = vec![z.clone()];
    let mut log_probs = Vec::with_capacity(model.steps());
    for t in (1..=model.steps()).rev() {
        let eps = model.eval_eps(&z, t, cond)?;
        let mean = model.reverse_mean(&z, &eps, t);
        let sd = policy_std(model, t);
        let noise = Tensor::randn(z.shape(), 1.0, rng);
        z = mean.zip_map(&noise, |m, e| m + sd * e);
        log_probs.push(gaussian_log_prob(&z, &mean, sd));
        latents.push(z.clone());
    }
    Ok(Chain {
        latents,
        log_probs,
        cond: cond.cloned(),
    })
}

/// `kappa_t` for `t = 1..=steps`, stored at index `t - 1`.
pub fn kappa_sequence(kind: &KappaKind, steps: usize, chain: Option<&Chain>) -> Result<Vec<f64>> {
    match *kind {
        KappaKind::Geometric { c } => Ok((1..=steps).map(|t| c.powi((steps - t) as i32)).collect()),
        KappaKind::Similarity => {
            let ch = chain.ok_or_else(|| Error::Contract("similarity credit needs a finished chain".into()))?;
            ensure!(ch.steps() == steps, Contract, "chain has {} steps, expected {steps}", ch.steps());
            let total = ch.sample().sub(ch.z(steps));
            Ok((1..=steps).map(|t| cosine(&ch.z(t - 1).sub(ch.z(t)), &total).max(0.0)).collect())
        }
    }
}

fn cosine(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.sq_norm().sqrt();
    let nb = b.sq_norm().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
