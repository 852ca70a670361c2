use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::numcore::{Mlp, MlpConfig, Param, Scalar, Tape, Tensor, Trainable, Var};

/// What the denoiser network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Injected noise `eps`.
    #[default]
    Epsilon,
    /// Score of the forward marginal, `-eps / sqrt(1 - alpha_bar_t)`.
    Score,
    /// Velocity `x0 - noise` of the straight noise-to-data path.
    Flow,
}

/// A network mapping `(x_t, t, condition)` to the parameterization target.
pub trait Denoiser<S: Scalar> {
    fn predict<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        t: &[S],
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>>;
}

impl<S: Scalar> Denoiser<S> for Mlp<S> {
    fn predict<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        t: &[S],
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        self.forward(tape, x, Some(t), cond)
    }
}

/// Closure-backed denoiser with no trainable state; used for analytic
/// oracles and fixed reference fields.
pub struct FnDenoiser<F>(pub F);

impl<S, F> Denoiser<S> for FnDenoiser<F>
where
    S: Scalar,
    F: Fn(&Tensor<S>, &[S], Option<&Tensor<S>>) -> Tensor<S>,
{
    fn predict<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        t: &[S],
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let c = cond.map(|c| c.value());
        Ok(tape.constant((self.0)(&x.value(), t, c.as_ref())))
    }
}

/// Denoiser plus schedule plus parameterization.
#[derive(Clone, Debug)]
pub struct DiffusionModel<S, D = Mlp<S>> {
    pub denoiser: D,
    pub schedule: NoiseSchedule<S>,
    pub parameterization: Parameterization,
    pub data_dim: usize,
    pub cond_dim: usize,
}

/// Random draws behind one evaluation of the training loss.
#[derive(Clone, Debug)]
pub struct LossDraw<S> {
    pub steps: Vec<usize>,
    /// Flow-path times in `[0, 1]` (flow models only).
    pub taus: Vec<S>,
    pub noise: Tensor<S>,
    /// The noised network input.
    pub noised: Tensor<S>,
}

impl<S: Scalar> DiffusionModel<S, Mlp<S>> {
    /// MLP denoiser sized for `data_dim` samples with a `cond_dim` condition.
    pub fn with_mlp<R: Rng + ?Sized>(
        data_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        time_embed_dim: usize,
        schedule: NoiseSchedule<S>,
        parameterization: Parameterization,
        rng: &mut R,
    ) -> Self {
        let cfg = MlpConfig::new(data_dim, hidden, data_dim)
            .with_time(time_embed_dim, schedule.steps() as f64)
            .with_cond(cond_dim);
        Self {
            denoiser: Mlp::new(cfg, rng),
            schedule,
            parameterization,
            data_dim,
            cond_dim,
        }
    }
}

impl<S: Scalar, D: Denoiser<S>> DiffusionModel<S, D> {
    pub fn new(
        denoiser: D,
        schedule: NoiseSchedule<S>,
        parameterization: Parameterization,
        data_dim: usize,
        cond_dim: usize,
    ) -> Self {
        Self {
            denoiser,
            schedule,
            parameterization,
            data_dim,
            cond_dim,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub(crate) fn check_batch(&self, x: &Tensor<S>, cond: Option<&Tensor<S>>) -> Result<()> {
        if x.cols() != self.data_dim {
            return Err(Error::shape(
                "diffusion sample",
                format!("expected {} columns, got {}", self.data_dim, x.cols()),
            ));
        }
        match (self.cond_dim, cond) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::shape("diffusion condition", "model is unconditional")),
            (_, None) => Err(Error::Contract("conditional model needs a condition".into())),
            (d, Some(c)) => {
                if c.cols() != d || c.rows() != x.rows() {
                    Err(Error::shape(
                        "diffusion condition",
                        format!("expected [{}, {d}], got {:?}", x.rows(), c.shape()),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Noise prediction at discrete steps for epsilon and score models.
    pub fn predict_eps<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        t: &[usize],
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let tv: Vec<S> = t.iter().map(|&s| S::of(s as f64)).collect();
        let out = self.denoiser.predict(tape, x, &tv, cond)?;
        match self.parameterization {
            Parameterization::Epsilon => Ok(out),
            Parameterization::Score => {
                let rows = x.rows();
                let scale: Vec<S> = (0..rows)
                    .map(|r| {
                        let s = if t.len() == 1 { t[0] } else { t[r] };
                        -(S::one() - self.schedule.alpha_bar(s)).sqrt()
                    })
                    .collect();
                let col = tape.constant(Tensor::matrix(rows, 1, scale)?);
                Ok(out.mul_col(col))
            }
            Parameterization::Flow => Err(Error::Config(
                "flow models predict velocities, not noise; use the flow sampler".into(),
            )),
        }
    }

    /// Velocity prediction of a flow model at path times `tau` (1 = data).
    pub fn predict_velocity<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        tau: &[S],
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        ensure!(
            self.parameterization == Parameterization::Flow,
            Config,
            "velocity prediction needs a flow model"
        );
        let big_t = S::of(self.steps() as f64);
        let tv: Vec<S> = tau.iter().map(|&u| (S::one() - u) * big_t).collect();
        self.denoiser.predict(tape, x, &tv, cond)
    }

    /// Training loss with explicit draws: mean over rows of the squared
    /// regression error summed over columns.
    ///
    /// Epsilon and score models compare in noise space, which for score
    /// models is score regression weighted by `1 - alpha_bar_t`. Flow models
    /// regress `x0 - noise` at `x_tau = (1 - tau) noise + tau x0`.
    pub fn loss_with<'t>(
        &self,
        tape: &'t Tape<S>,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        draw: &LossDraw<S>,
        weights: Option<&Tensor<S>>,
    ) -> Result<Var<'t, S>> {
        ensure!(x0.rows() > 0, Contract, "empty training batch");
        self.check_batch(x0, cond)?;
        let xt = tape.constant(draw.noised.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let (pred, target) = match self.parameterization {
            Parameterization::Flow => (
                self.predict_velocity(tape, xt, &draw.taus, c)?,
                x0.sub(&draw.noise),
            ),
            _ => (self.predict_eps(tape, xt, &draw.steps, c)?, draw.noise.clone()),
        };
        let mut err = pred.sub(tape.constant(target)).square();
        if let Some(w) = weights {
            err = err.mul(tape.constant(w.clone()));
        }
        Ok(err.sum().scale(S::one() / S::of(x0.rows() as f64)))
    }

    /// Draws steps (or flow times) and noise for a training batch.
    pub fn draw_loss_inputs<R: Rng + ?Sized>(&self, x0: &Tensor<S>, rng: &mut R) -> Result<LossDraw<S>> {
        let n = x0.rows();
        let noise = Tensor::randn(x0.shape(), 1.0, rng);
        if self.parameterization == Parameterization::Flow {
            let taus: Vec<S> = (0..n).map(|_| S::of(rng.random::<f64>())).collect();
            let cols = x0.cols();
            let mut noised = x0.clone();
            for (k, v) in noised.data_mut().iter_mut().enumerate() {
                let u = taus[k / cols];
                *v = (S::one() - u) * noise.data()[k] + u * *v;
            }
            return Ok(LossDraw {
                steps: Vec::new(),
                taus,
                noise,
                noised,
            });
        }
        let steps = self.schedule.sample_steps(n, rng);
        let noised = self.schedule.q_sample(x0, &steps, &noise)?;
        Ok(LossDraw {
            steps,
            taus: Vec::new(),
            noise,
            noised,
        })
    }

    /// Simplified denoising loss with `t ~ U[1, T]` and `eps ~ N(0, I)`.
    pub fn ddpm_loss<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<S>,
        x0: &Tensor<S>,
        cond: Option<&Tensor<S>>,
        rng: &mut R,
    ) -> Result<Var<'t, S>> {
        ensure!(x0.rows() > 0, Contract, "empty training batch");
        let draw = self.draw_loss_inputs(x0, rng)?;
        self.loss_with(tape, x0, cond, &draw, None)
    }
}

impl<S: Scalar, D: Trainable<S>> Trainable<S> for DiffusionModel<S, D> {
    fn params(&self) -> Vec<&Param<S>> {
        self.denoiser.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.denoiser.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::new(ScheduleKind::Cosine, 32).unwrap()
    }

    #[test]
    fn zero_denoiser_loss_is_data_dim() {
        let zero = FnDenoiser(|x: &Tensor<f64>, _: &[f64], _: Option<&Tensor<f64>>| Tensor::zeros(x.shape()));
        let m = DiffusionModel::new(zero, schedule(), Parameterization::Epsilon, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[20_000, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let loss = m.ddpm_loss(&tape, &x0, None, &mut rng).unwrap().item();
        // chi-square with 3 dof per row: sd of the mean = sqrt(6 / 20000) ~ 0.017
        assert!((loss - 3.0).abs() < 0.07, "{loss}");
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        // Point mass at x*: the true noise is recoverable from x_t and t.
        let sched = schedule();
        let target = 0.4;
        let s2 = sched.clone();
        let oracle = FnDenoiser(move |x: &Tensor<f64>, t: &[f64], _: Option<&Tensor<f64>>| {
            let cols = x.cols();
            let mut out = x.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                let ab = s2.alpha_bar(t[if t.len() == 1 { 0 } else { k / cols }] as usize);
                *v = (*v - ab.sqrt() * target) / (1.0 - ab).sqrt();
            }
            out
        });
        let m = DiffusionModel::new(oracle, sched, Parameterization::Epsilon, 2, 0);
        let tape = Tape::new();
        let x0 = Tensor::full(&[64, 2], target);
        let loss = m.ddpm_loss(&tape, &x0, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(loss.item() < 1e-20);
    }

    #[test]
    fn loss_nonnegative_and_empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DiffusionModel::<f64>::with_mlp(2, 0, &[8], 8, schedule(), Parameterization::Epsilon, &mut rng);
        let tape = Tape::new();
        for _ in 0..5 {
            let x0 = Tensor::randn(&[8, 2], 2.0, &mut rng);
            assert!(m.ddpm_loss(&tape, &x0, None, &mut rng).unwrap().item() >= 0.0);
        }
        let empty = Tensor::zeros(&[0, 2]);
        assert!(m.ddpm_loss(&tape, &empty, None, &mut rng).is_err());
    }

    #[test]
    fn flow_target_is_constant_velocity() {
        let m = DiffusionModel::<f64>::with_mlp(
            1,
            0,
            &[4],
            4,
            schedule(),
            Parameterization::Flow,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let x0 = Tensor::full(&[16, 1], 0.8);
        let draw = m.draw_loss_inputs(&x0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for r in 0..16 {
            let (tau, z, xt) = (draw.taus[r], draw.noise.at(r, 0), draw.noised.at(r, 0));
            // x_tau moves along x0 - noise at unit speed in tau
            assert!((xt - (z + tau * (0.8 - z))).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_loss_trains_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = NoiseSchedule::<f32>::new(ScheduleKind::Cosine, 16).unwrap();
        let mut m = DiffusionModel::<f32>::with_mlp(1, 0, &[32, 32], 8, sched, Parameterization::Epsilon, &mut rng);
        let mut opt = crate::numcore::AdamState::default();
        let data = Tensor::<f32>::full(&[128, 1], 0.5);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |m: &DiffusionModel<f32>, rng: &mut ChaCha8Rng| {
            let tape = Tape::new();
            m.ddpm_loss(&tape, &Tensor::full(&[2048, 1], 0.5), None, rng).unwrap().item()
        };
        let before = eval(&m, &mut eval_rng.clone());
        for _ in 0..300 {
            let tape = Tape::new();
            let loss = m.ddpm_loss(&tape, &data, None, &mut rng).unwrap();
            let g = tape.backward(loss).unwrap();
            m.accumulate(&g);
            opt.step_model(&mut m, 3e-3).unwrap();
        }
        let after = eval(&m, &mut eval_rng);
        assert!(after < before * 0.5, "{before} -> {after}");
    }
}
