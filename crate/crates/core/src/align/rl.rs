use rand::Rng;
use serde::{Deserialize, Serialize};

use super::chain::{
    check_stochastic, gaussian_log_prob_var, kappa_sequence, mean_var, policy_std, record_chain, Chain, KappaKind,
};
use super::entropy_bonus;
use super::reward::SampleReward;
use crate::diffusion::{Denoiser, DiffusionModel};
use crate::error::{ensure, Error, Result};
use crate::numcore::{AdamState, Tape, Tensor, Trainable, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RlMethod {
    /// Score-function gradient over the recorded chain.
    #[default]
    Reinforce,
    /// Reparameterized gradient of a differentiable reward.
    QvPg,
}

impl std::str::FromStr for RlMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(RlMethod::Reinforce),
            "qv-pg" => Ok(RlMethod::QvPg),
            _ => Err(Error::Config(format!("unknown RL method `{s}`"))),
        }
    }
}

/// How far the policy may move from the reference model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DivergenceControl {
    /// Per-step probability ratio against the reference, clipped to `1 +- clip`.
    PpoClip { clip: f64 },
    /// Additive per-step KL penalty against the reference.
    Kl { coef: f64 },
}

impl Default for DivergenceControl {
    fn default() -> Self {
        DivergenceControl::Kl { coef: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlAlignConfig {
    pub method: RlMethod,
    /// Gradients flow through the last `truncation` denoising steps only.
    pub truncation: usize,
    /// When positive, the depth grows linearly from 1 to `truncation` over
    /// this many updates.
    pub truncation_ramp: usize,
    pub kappa: KappaKind,
    pub control: DivergenceControl,
    /// Chains per update (unconditional models).
    pub samples: usize,
    pub lr: f64,
    /// Optimizer steps per recorded batch (REINFORCE).
    pub inner_epochs: usize,
    /// Weight of the sample-dispersion bonus (QV-PG).
    pub entropy_coef: f64,
}

impl Default for RlAlignConfig {
    fn default() -> Self {
        Self {
            method: RlMethod::Reinforce,
            truncation: 4,
            truncation_ramp: 0,
            kappa: KappaKind::default(),
            control: DivergenceControl::default(),
            samples: 64,
            lr: 1e-3,
            inner_epochs: 1,
            entropy_coef: 0.0,
        }
    }
}

impl RlAlignConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        ensure!(
            (1..=steps).contains(&self.truncation),
            Config,
            "truncation depth {} outside [1, {steps}]",
            self.truncation
        );
        match self.control {
            DivergenceControl::PpoClip { clip } => ensure!(clip > 0.0, Config, "PPO clip must be positive"),
            DivergenceControl::Kl { coef } => ensure!(coef >= 0.0, Config, "KL coefficient must be non-negative"),
        }
        if let KappaKind::Geometric { c } = self.kappa {
            ensure!(c > 0.0 && c <= 1.0, Config, "geometric credit base {c} outside (0, 1]");
        }
        ensure!(self.samples >= 1, Config, "RL updates need at least one sample");
        ensure!(self.lr > 0.0, Config, "learning rate must be positive");
        ensure!(self.inner_epochs >= 1, Config, "at least one inner epoch");
        ensure!(self.entropy_coef >= 0.0, Config, "entropy coefficient must be non-negative");
        Ok(())
    }

    /// Truncation depth in effect at `update`.
    pub fn depth_at(&self, update: usize) -> usize {
        if self.truncation_ramp == 0 {
            self.truncation
        } else {
            let frac = (update as f64 / self.truncation_ramp as f64).min(1.0);
            (1.0 + frac * (self.truncation as f64 - 1.0)).round() as usize
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
    /// Mean per-step KL to the reference over tracked steps.
    pub kl: f64,
    /// Fraction of tracked (row, step) ratios outside the clip range.
    pub clip_fraction: f64,
}

/// Rewards minus their batch mean.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let m = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
    rewards.iter().map(|r| r - m).collect()
}

fn column(values: &[f64]) -> Tensor<f64> {
    Tensor::matrix(values.len(), 1, values.to_vec()).expect("column shape")
}

/// Policy-gradient surrogate over a recorded chain. Only the last `depth`
/// transitions (`t <= depth`) are differentiated; older ones contribute their
/// recorded values as constants. Returns the loss with the mean KL and clip
/// fraction over the tracked steps.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_loss<'t, D: Denoiser<f64>>(
    tape: &'t Tape<f64>,
    model: &DiffusionModel<f64, D>,
    reference: &DiffusionModel<f64, D>,
    chain: &Chain,
    advantages: &[f64],
    kappa: &[f64],
    depth: usize,
    control: DivergenceControl,
) -> Result<(Var<'t, f64>, f64, f64)> {
    let steps = chain.steps();
    let n = chain.sample().rows();
    ensure!(advantages.len() == n, Contract, "{} advantages for {n} chains", advantages.len());
    ensure!(kappa.len() == steps, Contract, "{} credit weights for {steps} steps", kappa.len());
    ensure!((1..=steps).contains(&depth), Contract, "truncation depth {depth} outside [1, {steps}]");
    let cond = chain.cond.as_ref();
    let inv_n = 1.0 / n as f64;
    let adv = column(advantages);

    let mut frozen = 0.0;
    for t in depth + 1..=steps {
        let lp = chain.log_prob(t);
        frozen += kappa[t - 1]
            * match control {
                DivergenceControl::Kl { .. } => lp.iter().zip(advantages).map(|(l, a)| l * a).sum::<f64>() * inv_n,
                DivergenceControl::PpoClip { .. } => advantages.iter().sum::<f64>() * inv_n,
            };
    }

    let mut loss: Option<Var<'t, f64>> = None;
    let (mut kl_total, mut clipped) = (0.0, 0usize);
    for t in 1..=depth {
        let zt = tape.constant(chain.z(t).clone());
        let mean = mean_var(model, tape, zt, t, cond, true, 1.0)?;
        let sd = policy_std(model, t);
        let logp = gaussian_log_prob_var(chain.z(t - 1), mean, sd);
        let eps_ref = reference.eval_eps(chain.z(t), t, cond)?;
        let mu_ref = reference.reverse_mean(chain.z(t), &eps_ref, t);
        let gap = mean.sub(tape.constant(mu_ref.clone())).square().sum().scale(inv_n / (2.0 * sd * sd));
        kl_total += gap.item();
        let term = match control {
            DivergenceControl::Kl { coef } => {
                let obj = logp.mul(tape.constant(adv.clone())).sum().scale(kappa[t - 1] * inv_n);
                obj.neg().add(gap.scale(coef))
            }
            DivergenceControl::PpoClip { clip } => {
                let ref_lp = super::chain::gaussian_log_prob(chain.z(t - 1), &mu_ref, sd);
                let ratio = logp.sub(tape.constant(column(&ref_lp))).exp();
                clipped += ratio.value().data().iter().filter(|r| (**r - 1.0).abs() > clip).count();
                let a = tape.constant(adv.clone());
                let surr = ratio.mul(a).min(ratio.clamp(1.0 - clip, 1.0 + clip).mul(a));
                surr.sum().scale(-kappa[t - 1] * inv_n)
            }
        };
        loss = Some(match loss {
            Some(l) => l.add(term),
            None => term,
        });
    }
    let loss = loss.expect("depth >= 1").offset(-frozen);
    Ok((loss, kl_total / depth as f64, clipped as f64 / (depth * n) as f64))
}

fn finite_rewards(r: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("reward returned {bad}")));
    }
    Ok(r)
}

/// One REINFORCE round: records chains with the current model, then takes
/// `inner_epochs` optimizer steps on the surrogate. `cond`, when given,
/// fixes one chain per condition row.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update<D, R>(
    model: &mut DiffusionModel<f64, D>,
    reference: &DiffusionModel<f64, D>,
    reward: &dyn SampleReward,
    cond: Option<&Tensor<f64>>,
    cfg: &RlAlignConfig,
    update: usize,
    opt: &mut AdamState<f64>,
    rng: &mut R,
) -> Result<RlStats>
where
    D: Denoiser<f64> + Trainable<f64>,
    R: Rng + ?Sized,
{
    cfg.validate(model.steps())?;
    check_stochastic(model)?;
    let n = cond.map_or(cfg.samples, |c| c.rows());
    let chain = record_chain(model, n, cond, rng)?;
    let rewards = finite_rewards(reward.reward(chain.sample(), cond)?)?;
    let adv = advantages(&rewards);
    let kappa = kappa_sequence(&cfg.kappa, model.steps(), Some(&chain))?;
    let depth = cfg.depth_at(update).min(model.steps());
    let mut stats = RlStats {
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        ..Default::default()
    };
    for _ in 0..cfg.inner_epochs {
        let tape = Tape::new();
        let (loss, kl, clip) = reinforce_loss(&tape, model, reference, &chain, &adv, &kappa, depth, cfg.control)?;
        stats.loss = loss.item();
        stats.kl = kl;
        stats.clip_fraction = clip;
        ensure!(stats.loss.is_finite(), Numeric, "REINFORCE loss is not finite");
        let g = tape.backward(loss)?;
        model.accumulate(&g);
        stats.grad_norm = model.grad_norm();
        opt.step_model(model, cfg.lr)?;
    }
    Ok(stats)
}

/// Fixed randomness of one reparameterized chain.
#[derive(Clone, Debug)]
pub struct ChainNoise {
    pub start: Tensor<f64>,
    /// Injected noise of the transition out of step `t`, at index `T - t`.
    pub steps: Vec<Tensor<f64>>,
}

impl ChainNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, dim: usize, steps: usize, rng: &mut R) -> Self {
        let start = Tensor::randn(&[n, dim], 1.0, rng);
        let steps = (0..steps).map(|_| Tensor::randn(&[n, dim], 1.0, rng)).collect();
        Self { start, steps }
    }
}

/// Reparameterized chain on the tape. Network outputs at steps older than
/// `depth` enter as constants, so the forward values do not depend on
/// `depth`; tracked step `t` weights its network gradient by `kappa[t - 1]`.
pub fn reparam_chain<'t, D: Denoiser<f64>>(
    tape: &'t Tape<f64>,
    model: &DiffusionModel<f64, D>,
    noise: &ChainNoise,
    cond: Option<&Tensor<f64>>,
    kappa: &[f64],
    depth: usize,
) -> Result<Var<'t, f64>> {
    check_stochastic(model)?;
    let steps = model.steps();
    ensure!(noise.steps.len() == steps, Contract, "noise for {} steps, model has {steps}", noise.steps.len());
    ensure!(kappa.len() == steps, Contract, "{} credit weights for {steps} steps", kappa.len());
    model.check_batch(&noise.start, cond)?;
    let mut z = tape.constant(noise.start.clone());
    for t in (1..=steps).rev() {
        let mean = mean_var(model, tape, z, t, cond, t <= depth, kappa[t - 1])?;
        let sd = policy_std(model, t);
        z = mean.add(tape.constant(noise.steps[steps - t].scale(sd)));
    }
    Ok(z)
}

/// Negative mean differentiable reward of reparameterized samples, minus the
/// optional dispersion bonus. Returns the loss and the sample values.
#[allow(clippy::too_many_arguments)]
pub fn qvpg_loss<'t, D: Denoiser<f64>>(
    tape: &'t Tape<f64>,
    model: &DiffusionModel<f64, D>,
    reward: &dyn SampleReward,
    noise: &ChainNoise,
    cond: Option<&Tensor<f64>>,
    kappa: &[f64],
    depth: usize,
    entropy_coef: f64,
) -> Result<(Var<'t, f64>, Tensor<f64>)> {
    let z = reparam_chain(tape, model, noise, cond, kappa, depth)?;
    let r = reward.reward_var(tape, z, cond)?;
    let mut loss = r.mean().neg();
    if entropy_coef != 0.0 {
        loss = loss.sub(entropy_bonus(z).scale(entropy_coef));
    }
    Ok((loss, z.value()))
}

/// One QV-PG step. The divergence control adds the per-step KL to the
/// reference along the tracked part of the chain (PPO clipping has no
/// ratio to clip here and only reports the KL).
#[allow(clippy::too_many_arguments)]
pub fn qvpg_update<D, R>(
    model: &mut DiffusionModel<f64, D>,
    reference: &DiffusionModel<f64, D>,
    reward: &dyn SampleReward,
    cond: Option<&Tensor<f64>>,
    cfg: &RlAlignConfig,
    update: usize,
    opt: &mut AdamState<f64>,
    rng: &mut R,
) -> Result<RlStats>
where
    D: Denoiser<f64> + Trainable<f64>,
    R: Rng + ?Sized,
{
    cfg.validate(model.steps())?;
    let n = cond.map_or(cfg.samples, |c| c.rows());
    let steps = model.steps();
    let noise = ChainNoise::draw(n, model.data_dim, steps, rng);
    let kappa = match cfg.kappa {
        // Credit from a value-only pass over the same noise.
        KappaKind::Similarity => kappa_sequence(&cfg.kappa, steps, Some(&replay_latents(model, &noise, cond)?))?,
        kind => kappa_sequence(&kind, steps, None)?,
    };
    let depth = cfg.depth_at(update).min(steps);
    let tape = Tape::new();
    let (mut loss, z0) = qvpg_loss(&tape, model, reward, &noise, cond, &kappa, depth, cfg.entropy_coef)?;
    let mean_reward = reward.reward(&z0, cond)?.iter().sum::<f64>() / n as f64;
    let mut kl = 0.0;
    if let DivergenceControl::Kl { coef } = cfg.control {
        if coef > 0.0 {
            let chain = replay_latents(model, &noise, cond)?;
            let inv_n = 1.0 / n as f64;
            for t in 1..=depth {
                let zt = tape.constant(chain.z(t).clone());
                let mean = mean_var(model, &tape, zt, t, cond, true, 1.0)?;
                let eps_ref = reference.eval_eps(chain.z(t), t, cond)?;
                let mu_ref = reference.reverse_mean(chain.z(t), &eps_ref, t);
                let sd = policy_std(model, t);
                let gap = mean.sub(tape.constant(mu_ref)).square().sum().scale(inv_n / (2.0 * sd * sd));
                kl += gap.item() / depth as f64;
                loss = loss.add(gap.scale(coef));
            }
        }
    }
    let loss_val = loss.item();
    ensure!(loss_val.is_finite(), Numeric, "QV-PG loss is not finite");
    let g = tape.backward(loss)?;
    model.accumulate(&g);
    let grad_norm = model.grad_norm();
    opt.step_model(model, cfg.lr)?;
    Ok(RlStats {
        loss: loss_val,
        mean_reward,
        grad_norm,
        kl,
        clip_fraction: 0.0,
    })
}

/// Latents of the reparameterized chain without a tape.
fn replay_latents<D: Denoiser<f64>>(
    model: &DiffusionModel<f64, D>,
    noise: &ChainNoise,
    cond: Option<&Tensor<f64>>,
) -> Result<Chain> {
    let steps = model.steps();
    let mut z = noise.start.clone();
    let mut latents = vec![z.clone()];
    for t in (1..=steps).rev() {
        let eps = model.eval_eps(&z, t, cond)?;
        let sd = policy_std(model, t);
        z = model
            .reverse_mean(&z, &eps, t)
            .zip_map(&noise.steps[steps - t], |m, e| m + sd * e);
        latents.push(z.clone());
    }
    Ok(Chain {
        latents,
        log_probs: vec![Vec::new(); steps],
        cond: cond.cloned(),
    })
}
