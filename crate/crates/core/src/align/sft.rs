use rand::Rng;
use serde::{Deserialize, Serialize};

use super::reward::SampleReward;
use crate::diffusion::{Denoiser, DiffusionModel, Sampler};
use crate::error::{ensure, Result};
use crate::numcore::{AdamState, Tape, Tensor, Trainable};

/// Which model generates the candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Synthesizer {
    Foundation,
    #[default]
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Share of likelihood-passing candidates kept, best reward first.
    pub winner_fraction: f64,
    /// Quantile of foundation likelihood scores on the offline data used as
    /// the filter threshold.
    pub threshold_quantile: f64,
    pub synthesizer: Synthesizer,
    pub rounds: usize,
    /// Candidates per round (unconditional models).
    pub samples: usize,
    /// Optimizer steps per round on the survivors.
    pub updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Monte-Carlo draws per likelihood score.
    pub mc_draws: usize,
    pub sampler: Sampler,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            winner_fraction: 0.25,
            threshold_quantile: 0.10,
            synthesizer: Synthesizer::Finetuned,
            rounds: 1,
            samples: 256,
            updates: 50,
            batch_size: 64,
            lr: 1e-4,
            mc_draws: 1,
            sampler: Sampler::Ddpm,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.winner_fraction > 0.0 && self.winner_fraction <= 1.0,
            Config,
            "winner fraction {} outside (0, 1]",
            self.winner_fraction
        );
        ensure!(
            (0.0..1.0).contains(&self.threshold_quantile),
            Config,
            "threshold quantile {} outside [0, 1)",
            self.threshold_quantile
        );
        ensure!(self.samples >= 1 && self.batch_size >= 1 && self.mc_draws >= 1, Config, "SFT sizes must be positive");
        ensure!(self.lr > 0.0, Config, "learning rate must be positive");
        Ok(())
    }
}

/// Lower empirical `q`-quantile of `values` (nearest rank).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).floor() as usize).min(v.len().saturating_sub(1));
    v[idx]
}

/// Foundation likelihood threshold: the `q`-quantile of the foundation's
/// likelihood proxy over the offline data.
pub fn likelihood_threshold<D: Denoiser<f64>, R: Rng + ?Sized>(
    foundation: &DiffusionModel<f64, D>,
    data: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
    q: f64,
    mc_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    ensure!(data.rows() > 0, Contract, "threshold needs data");
    Ok(quantile(&foundation.elbo_proxy(data, cond, mc_draws, rng)?, q))
}

/// Audit record of one SFT round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftStats {
    pub generated: usize,
    pub passed_likelihood: usize,
    pub winners: usize,
    pub updates: usize,
    pub loss: f64,
    /// Foundation likelihood scores of the samples trained on.
    pub winner_scores: Vec<f64>,
    pub warning: Option<String>,
}

/// One round: synthesize, filter by foundation likelihood, keep the best
/// `winner_fraction` by reward and fit the denoising loss on them.
/// `cond` fixes one candidate per condition row for conditional models.
#[allow(clippy::too_many_arguments)]
pub fn sft_round<D, R>(
    model: &mut DiffusionModel<f64, D>,
    foundation: &DiffusionModel<f64, D>,
    cond: Option<&Tensor<f64>>,
    reward: &dyn SampleReward,
    cfg: &SftConfig,
    threshold: f64,
    opt: &mut AdamState<f64>,
    rng: &mut R,
) -> Result<SftStats>
where
    D: Denoiser<f64> + Trainable<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let n = cond.map_or(cfg.samples, |c| c.rows());
    let pool = match cfg.synthesizer {
        Synthesizer::Foundation => foundation.sample(n, cond, &cfg.sampler, rng)?,
        Synthesizer::Finetuned => model.sample(n, cond, &cfg.sampler, rng)?,
    };
    let scores = foundation.elbo_proxy(&pool, cond, cfg.mc_draws, rng)?;
    let rewards = reward.reward(&pool, cond)?;
    let mut stats = SftStats {
        generated: n,
        ..Default::default()
    };
    let mut passed: Vec<usize> = (0..n).filter(|&i| scores[i] >= threshold).collect();
    stats.passed_likelihood = passed.len();
    if passed.is_empty() {
        stats.warning = Some(format!("SFT round skipped: none of {n} samples passed the likelihood threshold"));
        return Ok(stats);
    }
    passed.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
    let keep = ((cfg.winner_fraction * passed.len() as f64).ceil() as usize).clamp(1, passed.len());
    passed.truncate(keep);
    stats.winners = keep;
    stats.winner_scores = passed.iter().map(|&i| scores[i]).collect();
    let x = pool.select_rows(&passed);
    let c = cond.map(|c| c.select_rows(&passed));
    for _ in 0..cfg.updates {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..keep)).collect();
        let xb = x.select_rows(&idx);
        let cb = c.as_ref().map(|c| c.select_rows(&idx));
        let tape = Tape::new();
        let loss = model.ddpm_loss(&tape, &xb, cb.as_ref(), rng)?;
        stats.loss = loss.item();
        ensure!(stats.loss.is_finite(), Numeric, "SFT loss is not finite");
        let g = tape.backward(loss)?;
        model.accumulate(&g);
        opt.step_model(model, cfg.lr)?;
        stats.updates += 1;
    }
    Ok(stats)
}
