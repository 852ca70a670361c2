//! What the stage runner aligns against: conditions, rewards, evaluation and
//! the offline data used for likelihood baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate_policy, EvalConfig, EvalStats};
use super::online::{online_inject, OnlineFinetuneConfig, ReplayBuffer};
use crate::align::{BumpReward, QLayout, QReward, SampleReward};
use crate::diffusion::{DiffusionModel, Sampler};
use crate::dmc::{ActionSelector, PolicyDmc};
use crate::envs::{BehaviorDensity, OfflineDataset, ToyField, ToyWorld2D};
use crate::error::{ensure, Result};
use crate::numcore::Tensor;
use crate::qvalue::{IqlConfig, QFunction};

pub trait AlignTask {
    fn name(&self) -> String;

    /// Conditions for `n` samples; `None` for unconditional models.
    fn conditions(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<Tensor<f64>>;

    fn reward(&self) -> Result<Box<dyn SampleReward + '_>>;

    /// Deterministic evaluation (fixed seeds) of `model`.
    fn evaluate(&self, model: &DiffusionModel<f64>) -> Result<EvalStats>;

    /// Offline samples and their conditions, for likelihood baselines.
    fn likelihood_data(&self) -> (Tensor<f64>, Option<Tensor<f64>>);

    /// Called after every evaluation; returns warnings to log.
    fn after_eval(&mut self, _model: &DiffusionModel<f64>, _step: u64, _rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        Ok(Vec::new())
    }
}

/// Unconditional 2-D toy world with one bump reward field.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub world: ToyWorld2D,
    pub field: ToyField,
    pub data: Tensor<f64>,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub sampler: Sampler,
}

impl ToyTask {
    pub fn new(world: ToyWorld2D, field: ToyField, data: Tensor<f64>, eval_seed: u64) -> Self {
        Self {
            world,
            field,
            data,
            eval_samples: 512,
            eval_seed,
            sampler: Sampler::Ddpm,
        }
    }

    pub fn rewards(&self, x: &Tensor<f64>) -> Vec<f64> {
        (0..x.rows()).map(|r| self.world.reward(self.field, [x.at(r, 0), x.at(r, 1)])).collect()
    }

    /// Mean over `batches` of the best reward within `k` samples.
    pub fn best_of(&self, model: &DiffusionModel<f64>, k: usize, batches: usize, seed: u64) -> Result<f64> {
        ensure!(k >= 1 && batches >= 1, Contract, "best-of needs positive sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = model.sample(k * batches, None, &self.sampler, &mut rng)?;
        let r = self.rewards(&x);
        Ok(r.chunks(k).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / batches as f64)
    }
}

impl AlignTask for ToyTask {
    fn name(&self) -> String {
        format!("toy-{}", self.field.name())
    }

    fn conditions(&self, _n: usize, _rng: &mut ChaCha8Rng) -> Option<Tensor<f64>> {
        None
    }

    fn reward(&self) -> Result<Box<dyn SampleReward + '_>> {
        Ok(Box::new(BumpReward(*self.world.bump(self.field))))
    }

    /// Mean and spread of the reward over a fixed-seed sample batch;
    /// coherency is the in-distribution fraction.
    fn evaluate(&self, model: &DiffusionModel<f64>) -> Result<EvalStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.eval_seed);
        let x = model.sample(self.eval_samples, None, &self.sampler, &mut rng)?;
        let inside = (0..x.rows())
            .filter(|&r| self.world.in_distribution([x.at(r, 0), x.at(r, 1)]))
            .count();
        Ok(EvalStats::from_returns(&self.rewards(&x), Some(inside as f64 / x.rows() as f64)))
    }

    fn likelihood_data(&self) -> (Tensor<f64>, Option<Tensor<f64>>) {
        (self.data.clone(), None)
    }
}

/// Online-injection state of a policy task.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub config: OnlineFinetuneConfig,
    pub buffer: ReplayBuffer,
    pub iql: IqlConfig,
    pub injections: usize,
}

/// Nav1D diffusion policy aligned against a trained Q.
#[derive(Clone, Debug)]
pub struct PolicyTask {
    pub dataset: OfflineDataset,
    pub q: QFunction,
    pub window: usize,
    pub chunk: usize,
    pub eval: EvalConfig,
    pub selector: ActionSelector,
    pub sampler: Sampler,
    pub density: BehaviorDensity,
    /// Encoded contexts and action chunks of the offline data.
    contexts: Tensor<f64>,
    actions: Tensor<f64>,
    /// Rows used for likelihood baselines.
    pub baseline_rows: usize,
    pub online: Option<OnlineState>,
}

impl PolicyTask {
    pub fn new(
        dataset: OfflineDataset,
        q: QFunction,
        template: &PolicyDmc,
        eval: EvalConfig,
        selector: ActionSelector,
        sampler: Sampler,
    ) -> Result<Self> {
        ensure!(q.obs_dim == template.obs_dim && q.act_dim == template.act_dim, Config, "Q does not match the policy's shapes");
        let (actions, contexts) = template.training_set(&dataset.episodes)?;
        let density = BehaviorDensity::fit(&dataset)?;
        let eval = eval.for_dataset(&dataset);
        Ok(Self {
            dataset,
            q,
            window: template.window,
            chunk: template.chunk,
            eval,
            selector,
            sampler,
            density,
            contexts,
            actions,
            baseline_rows: 1024,
            online: None,
        })
    }

    pub fn with_online(mut self, config: OnlineFinetuneConfig, iql: IqlConfig) -> Self {
        if config.enabled {
            self.online = Some(OnlineState {
                buffer: ReplayBuffer::new(config.buffer_cap),
                config,
                iql,
                injections: 0,
            });
        }
        self
    }

    pub fn policy(&self, model: &DiffusionModel<f64>) -> Result<PolicyDmc> {
        PolicyDmc::new(model.clone(), self.window, 2, 1, self.chunk)
    }
}

impl AlignTask for PolicyTask {
    fn name(&self) -> String {
        format!("nav1d-{:?}", self.dataset.coverage).to_lowercase()
    }

    fn conditions(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<Tensor<f64>> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.contexts.rows())).collect();
        Some(self.contexts.select_rows(&idx))
    }

    fn reward(&self) -> Result<Box<dyn SampleReward + '_>> {
        let layout = QLayout::PolicyChunk {
            window: self.window,
            obs_dim: 2,
            act_dim: 1,
        };
        Ok(Box::new(QReward::new(&self.q, layout)?.with_value_baseline()))
    }

    fn evaluate(&self, model: &DiffusionModel<f64>) -> Result<EvalStats> {
        let policy = self.policy(model)?;
        evaluate_policy(
            &policy,
            &self.dataset.world,
            &self.eval,
            &self.selector,
            Some(&self.q),
            &self.sampler,
            Some(&self.density),
        )
    }

    fn likelihood_data(&self) -> (Tensor<f64>, Option<Tensor<f64>>) {
        let n = self.actions.rows();
        let rows: Vec<usize> = if n <= self.baseline_rows {
            (0..n).collect()
        } else {
            (0..self.baseline_rows).map(|i| i * n / self.baseline_rows).collect()
        };
        (self.actions.select_rows(&rows), Some(self.contexts.select_rows(&rows)))
    }

    fn after_eval(&mut self, model: &DiffusionModel<f64>, step: u64, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        let Some(online) = self.online.as_mut() else {
            return Ok(Vec::new());
        };
        let policy = PolicyDmc::new(model.clone(), self.window, 2, 1, self.chunk)?;
        let report = online_inject(
            &policy,
            Some(&self.dataset.world),
            &mut online.buffer,
            &online.config,
            step,
            Some((&mut self.q, &online.iql)),
            &self.selector,
            &self.sampler,
            rng,
        )?;
        if report.transitions > 0 {
            online.injections += 1;
        }
        Ok(report.warning.into_iter().collect())
    }
}
