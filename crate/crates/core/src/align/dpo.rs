use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionModel, Parameterization};
use crate::error::{ensure, Result};
use crate::numcore::{AdamState, Tape, Tensor, Trainable, Var};

/// Per-step weight on the preference margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DpoWeighting {
    #[default]
    Constant,
    /// Signal-to-noise ratio `alpha_bar_t / (1 - alpha_bar_t)`.
    Snr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub temperature: f64,
    pub weighting: DpoWeighting,
    pub pairs_per_update: usize,
    pub lr: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            temperature: 1000.0,
            weighting: DpoWeighting::Constant,
            pairs_per_update: 64,
            lr: 1e-4,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.temperature > 0.0, Config, "DPO temperature must be positive");
        ensure!(self.pairs_per_update >= 1, Config, "DPO needs at least one pair per update");
        ensure!(self.lr > 0.0, Config, "learning rate must be positive");
        Ok(())
    }
}

/// A strictly ordered pair of samples sharing a condition.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub cond: Option<Vec<f64>>,
    /// `reward(winner) - reward(loser)`, always positive.
    pub gap: f64,
}

/// Pairs every sample in the top `fraction` of each group with every sample
/// in the bottom `fraction` (at least one each), keeping strictly ordered
/// pairs only. Groups are `group` consecutive rows sharing a condition.
pub fn make_preference_pairs(
    candidates: &Tensor<f64>,
    rewards: &[f64],
    group: usize,
    conds: Option<&Tensor<f64>>,
    fraction: f64,
) -> Result<Vec<PreferencePair>> {
    ensure!(group >= 2, Contract, "preference pairs need at least two candidates per condition");
    ensure!(rewards.len() == candidates.rows(), Contract, "{} rewards for {} candidates", rewards.len(), candidates.rows());
    ensure!(candidates.rows() % group == 0, Contract, "{} candidates do not split into groups of {group}", candidates.rows());
    ensure!(fraction > 0.0 && fraction <= 0.5, Contract, "pair fraction {fraction} outside (0, 0.5]");
    let k = ((fraction * group as f64).round() as usize).max(1);
    let mut out = Vec::new();
    for g in 0..candidates.rows() / group {
        let base = g * group;
        let mut order: Vec<usize> = (base..base + group).collect();
        order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
        let cond = conds.map(|c| c.row_vec(base));
        for &w in &order[..k] {
            for &l in &order[group - k..] {
                if rewards[w] > rewards[l] {
                    out.push(PreferencePair {
                        winner: candidates.row_vec(w),
                        loser: candidates.row_vec(l),
                        cond: cond.clone(),
                        gap: rewards[w] - rewards[l],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Shared randomness of a DPO batch: one step and one noise row per pair,
/// reused for winner and loser under both model and reference.
#[derive(Clone, Debug)]
pub struct DpoDraw {
    pub steps: Vec<usize>,
    pub noise: Tensor<f64>,
}

impl DpoDraw {
    pub fn draw<R: Rng + ?Sized, D>(model: &DiffusionModel<f64, D>, pairs: usize, rng: &mut R) -> Self {
        Self {
            steps: model.schedule.sample_steps(pairs, rng),
            noise: Tensor::randn(&[pairs, model.data_dim], 1.0, rng),
        }
    }
}

/// Row-mean squared denoising residual of `x0` at the given steps and noise,
/// as an `[n, 1]` column. Flow models use the velocity residual at
/// `tau = 1 - t / T`.
pub fn residual_var<'t, D: Denoiser<f64>>(
    tape: &'t Tape<f64>,
    model: &DiffusionModel<f64, D>,
    x0: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
    steps: &[usize],
    noise: &Tensor<f64>,
) -> Result<Var<'t, f64>> {
    model.check_batch(x0, cond)?;
    let c = cond.map(|c| tape.constant(c.clone()));
    let d = x0.cols() as f64;
    let (pred, target) = if model.parameterization == Parameterization::Flow {
        let big_t = model.steps() as f64;
        let taus: Vec<f64> = steps.iter().map(|&t| 1.0 - t as f64 / big_t).collect();
        let cols = x0.cols();
        let mut xt = x0.clone();
        for (k, v) in xt.data_mut().iter_mut().enumerate() {
            let u = taus[k / cols];
            *v = (1.0 - u) * noise.data()[k] + u * *v;
        }
        (model.predict_velocity(tape, tape.constant(xt), &taus, c)?, x0.sub(noise))
    } else {
        let xt = model.schedule.q_sample(x0, steps, noise)?;
        (model.predict_eps(tape, tape.constant(xt), steps, c)?, noise.clone())
    };
    Ok(pred.sub(tape.constant(target)).square().sum_cols().scale(1.0 / d))
}

fn stack(pairs: &[PreferencePair], pick: impl Fn(&PreferencePair) -> &Vec<f64>) -> Result<Tensor<f64>> {
    Tensor::from_rows(&pairs.iter().map(|p| pick(p).clone()).collect::<Vec<_>>())
}

/// Mean over pairs of `softplus(gamma * w_t * (F_w - F_l))` where
/// `F = residual(model) - residual(reference)`. Returns the loss and the
/// per-pair margins `F_w - F_l`.
pub fn dpo_loss<'t, D: Denoiser<f64>>(
    tape: &'t Tape<f64>,
    model: &DiffusionModel<f64, D>,
    reference: &DiffusionModel<f64, D>,
    pairs: &[PreferencePair],
    draw: &DpoDraw,
    cfg: &DpoConfig,
) -> Result<(Var<'t, f64>, Vec<f64>)> {
    ensure!(!pairs.is_empty(), Contract, "DPO needs at least one pair");
    ensure!(draw.steps.len() == pairs.len(), Contract, "{} draws for {} pairs", draw.steps.len(), pairs.len());
    let xw = stack(pairs, |p| &p.winner)?;
    let xl = stack(pairs, |p| &p.loser)?;
    let cond = if model.cond_dim > 0 {
        let rows: Option<Vec<Vec<f64>>> = pairs.iter().map(|p| p.cond.clone()).collect();
        Some(Tensor::from_rows(&rows.ok_or_else(|| {
            crate::error::Error::Contract("conditional model needs pair conditions".into())
        })?)?)
    } else {
        None
    };
    let c = cond.as_ref();
    let ref_tape = Tape::new();
    let ref_w = residual_var(&ref_tape, reference, &xw, c, &draw.steps, &draw.noise)?.value();
    let ref_l = residual_var(&ref_tape, reference, &xl, c, &draw.steps, &draw.noise)?.value();
    let fw = residual_var(tape, model, &xw, c, &draw.steps, &draw.noise)?.sub(tape.constant(ref_w));
    let fl = residual_var(tape, model, &xl, c, &draw.steps, &draw.noise)?.sub(tape.constant(ref_l));
    let margin = fw.sub(fl);
    let weights: Vec<f64> = draw
        .steps
        .iter()
        .map(|&t| {
            cfg.temperature
                * match cfg.weighting {
                    DpoWeighting::Constant => 1.0,
                    DpoWeighting::Snr => model.schedule.snr(t),
                }
        })
        .collect();
    let w = tape.constant(Tensor::matrix(pairs.len(), 1, weights)?);
    let loss = margin.mul(w).softplus().mean();
    Ok((loss, margin.value().into_data()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpoStats {
    pub loss: f64,
    /// Fraction of pairs whose winner already has the lower relative residual.
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// One DPO step on a random subset of `pairs`.
pub fn dpo_update<D, R>(
    model: &mut DiffusionModel<f64, D>,
    reference: &DiffusionModel<f64, D>,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    opt: &mut AdamState<f64>,
    rng: &mut R,
) -> Result<DpoStats>
where
    D: Denoiser<f64> + Trainable<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    ensure!(!pairs.is_empty(), Contract, "DPO needs at least one pair");
    let m = cfg.pairs_per_update.min(pairs.len());
    let batch: Vec<PreferencePair> = (0..m).map(|_| pairs[rng.random_range(0..pairs.len())].clone()).collect();
    let draw = DpoDraw::draw(model, m, rng);
    let tape = Tape::new();
    let (loss, margins) = dpo_loss(&tape, model, reference, &batch, &draw, cfg)?;
    let value = loss.item();
    ensure!(value.is_finite(), Numeric, "DPO loss is not finite");
    let g = tape.backward(loss)?;
    model.accumulate(&g);
    let grad_norm = model.grad_norm();
    opt.step_model(model, cfg.lr)?;
    Ok(DpoStats {
        loss: value,
        accuracy: margins.iter().filter(|&&v| v < 0.0).count() as f64 / m as f64,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_candidates_pair_up() {
        let c = Tensor::matrix(2, 1, vec![10.0, 20.0]).unwrap();
        let p = make_preference_pairs(&c, &[1.0, 2.0], 2, None, 0.25).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].winner, vec![20.0]);
        assert_eq!(p[0].gap, 1.0);
    }

    #[test]
    fn equal_rewards_give_no_pairs() {
        let c = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(make_preference_pairs(&c, &[0.5; 4], 4, None, 0.25).unwrap().is_empty());
    }
}
