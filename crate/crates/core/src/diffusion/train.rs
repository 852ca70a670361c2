use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Denoiser, DiffusionModel, LossDraw, Parameterization};
use crate::error::{ensure, Result};
use crate::numcore::{AdamState, Scalar, Tape, Tensor, Trainable, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            lr: 3e-4,
        }
    }
}

/// Draws of one masked loss evaluation: the regular draw plus the fresh
/// noise used to re-noise the known entries.
#[derive(Clone, Debug)]
pub struct MaskedDraw<S> {
    pub draw: LossDraw<S>,
    pub known_noise: Tensor<S>,
}

impl<S: Scalar, D: Denoiser<S>> DiffusionModel<S, D> {
    /// In-painting loss: known entries (`known[i] = true`) of the noised input
    /// are replaced by an independent forward-noising of their clean values,
    /// as the in-painting sampler does, and only hidden entries are scored.
    pub fn masked_loss<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<S>,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        known: &[bool],
        rng: &mut R,
    ) -> Result<(Var<'t, S>, MaskedDraw<S>)> {
        ensure!(
            known.len() == x0.len(),
            Contract,
            "mask has {} entries for a batch of {}",
            known.len(),
            x0.len()
        );
        let mut draw = self.draw_loss_inputs(x0, rng)?;
        let known_noise = Tensor::randn(x0.shape(), 1.0, rng);
        let renoised = if self.parameterization == Parameterization::Flow {
            let cols = x0.cols();
            let mut out = x0.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let u = draw.taus[k / cols];
                *v = (S::one() - u) * known_noise.data()[k] + u * *v;
            }
            out
        } else {
            self.schedule.q_sample(x0, &draw.steps, &known_noise)?
        };
        for (i, &m) in known.iter().enumerate() {
            if m {
                draw.noised.data_mut()[i] = renoised.data()[i];
            }
        }
        let weights = Tensor::new(
            x0.shape().to_vec(),
            known.iter().map(|&m| if m { S::zero() } else { S::one() }).collect(),
        )?;
        let loss = self.loss_with(tape, x0, cond, &draw, Some(&weights))?;
        Ok((loss, MaskedDraw { draw, known_noise }))
    }
}

impl<S: Scalar, D: Denoiser<S> + Trainable<S>> DiffusionModel<S, D> {
    /// Minibatch Adam training on the denoising loss; returns per-step losses.
    /// `mask_fn`, when given, produces the known-entry mask for each batch.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        data: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        cfg: &FitConfig,
        opt: &mut AdamState<S>,
        mut mask_fn: Option<&mut dyn FnMut(&Tensor<S>, &mut R) -> Vec<bool>>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        ensure!(data.rows() > 0, Contract, "empty training set");
        ensure!(cfg.batch_size > 0, Config, "batch size must be positive");
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.rows())).collect();
            let x0 = data.select_rows(&idx);
            let c = cond.map(|c| c.select_rows(&idx));
            let tape = Tape::new();
            let loss = match mask_fn.as_mut() {
                Some(f) => {
                    let mask = f(&x0, rng);
                    self.masked_loss(&tape, &x0, c.as_ref(), &mask, rng)?.0
                }
                None => self.ddpm_loss(&tape, &x0, c.as_ref(), rng)?,
            };
            let value = loss.item().to_f64_lossy();
            ensure!(value.is_finite(), Numeric, "training loss is not finite");
            let g = tape.backward(loss)?;
            self.accumulate(&g);
            opt.step_model(self, cfg.lr)?;
            losses.push(value);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_inputs_follow_forward_noising() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 16).unwrap();
        let m = DiffusionModel::<f64>::with_mlp(3, 0, &[8], 8, sched, Parameterization::Epsilon, &mut rng);
        let x0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let known: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let tape = Tape::new();
        let (_, md) = m.masked_loss(&tape, &x0, None, &known, &mut rng).unwrap();
        let direct_known = m.schedule.q_sample(&x0, &md.draw.steps, &md.known_noise).unwrap();
        let direct_hidden = m.schedule.q_sample(&x0, &md.draw.steps, &md.draw.noise).unwrap();
        for i in 0..12 {
            let expect = if known[i] { direct_known.data()[i] } else { direct_hidden.data()[i] };
            assert_eq!(md.draw.noised.data()[i], expect);
        }
    }

    #[test]
    fn fully_known_batch_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 16).unwrap();
        let m = DiffusionModel::<f64>::with_mlp(2, 0, &[8], 8, sched, Parameterization::Epsilon, &mut rng);
        let x0 = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let (loss, _) = m.masked_loss(&tape, &x0, None, &[true; 8], &mut rng).unwrap();
        assert_eq!(loss.item(), 0.0);
    }
}
