//! Run configuration file (TOML, one section per module; unknown keys are
//! rejected) and the model builders it drives.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::EvalConfig;
use super::online::OnlineFinetuneConfig;
use super::sequence::SequenceConfig;
use crate::cascade::CascadeConfig;
use crate::diffusion::{make_schedule, DiffusionModel, FitConfig, Parameterization, Sampler, ScheduleKind};
use crate::dmc::{ActionSelector, ContextWindow, PlannerDmc, PolicyDmc};
use crate::envs::{Coverage, Nav1DConfig, OfflineDataset, ToyField};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, Activation, Mlp, MlpConfig};
use crate::qvalue::IqlConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Nav1D diffusion policy aligned against Q.
    #[default]
    Policy,
    /// 2-D toy world with a bump reward.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub task: TaskKind,
    pub toy_field: ToyField,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Policy,
            toy_field: ToyField::Orange,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub coverage: Coverage,
    pub episodes: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            coverage: Coverage::Partial,
            episodes: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationSection {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub parameterization: Parameterization,
    pub activation: Activation,
    pub fit: FitConfig,
    pub sampler: Sampler,
}

impl Default for FoundationSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
            steps: 32,
            schedule: ScheduleKind::Cosine,
            parameterization: Parameterization::Epsilon,
            activation: Activation::default(),
            fit: FitConfig::default(),
            sampler: Sampler::Ddpm,
        }
    }
}

impl FoundationSection {
    /// Fresh, untrained model with this section's shape.
    pub fn build<R: Rng + ?Sized>(&self, data_dim: usize, cond_dim: usize, rng: &mut R) -> Result<DiffusionModel<f64>> {
        let schedule = make_schedule(self.schedule, self.steps)?;
        let cfg = MlpConfig::new(data_dim, &self.hidden, data_dim)
            .with_time(self.time_embed_dim, self.steps as f64)
            .with_cond(cond_dim)
            .with_activation(self.activation);
        Ok(DiffusionModel::new(
            Mlp::new(cfg, rng),
            schedule,
            self.parameterization,
            data_dim,
            cond_dim,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub window: usize,
    pub chunk: usize,
    pub selector: ActionSelector,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            window: 2,
            chunk: 1,
            selector: ActionSelector::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub horizon: usize,
    pub rollouts: usize,
    /// Probability of training a window with no revealed prefix.
    pub p_uncond: f64,
    pub fit: FitConfig,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            horizon: 4,
            rollouts: 8,
            p_uncond: 0.5,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub data_samples: usize,
    pub eval_samples: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            data_samples: 4096,
            eval_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub nav1d: Nav1DConfig,
    pub dataset: DatasetSection,
    pub foundation: FoundationSection,
    pub policy: PolicySection,
    pub planner: PlannerSection,
    pub qvalue: IqlConfig,
    pub align: SequenceConfig,
    pub online: OnlineFinetuneConfig,
    pub eval: EvalConfig,
    pub cascade: CascadeConfig,
    pub toy: ToySection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.align.validate(cfg.foundation.steps)?;
        cfg.qvalue.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn policy_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PolicyDmc> {
        let cond = ContextWindow::encoded_width(self.policy.window, 2);
        let model = self.foundation.build(self.policy.chunk, cond, rng)?;
        PolicyDmc::new(model, self.policy.window, 2, 1, self.policy.chunk)
    }

    pub fn planner_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PlannerDmc> {
        let dim = PlannerDmc::layout_dim(self.planner.horizon, 2, 1);
        PlannerDmc::new(self.foundation.build(dim, 0, rng)?, self.planner.horizon, 2, 1)
    }
}

/// Trains a policy foundation on the dataset's `(context, action chunk)` rows.
pub fn train_policy<R: Rng + ?Sized>(policy: &mut PolicyDmc, data: &OfflineDataset, fit: &FitConfig, rng: &mut R) -> Result<Vec<f64>> {
    let (x, c) = policy.training_set(&data.episodes)?;
    let mut opt = AdamState::default();
    policy.model.fit(&x, Some(&c), fit, &mut opt, None, rng)
}

/// Trains a planner foundation on trajectory windows with causal in-painting
/// masks.
pub fn train_planner<R: Rng + ?Sized>(
    planner: &mut PlannerDmc,
    data: &OfflineDataset,
    fit: &FitConfig,
    p_uncond: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let windows = planner.windows(&data.episodes)?;
    let shape = planner.clone();
    let mut mask_fn = |x0: &crate::numcore::Tensor<f64>, rng: &mut R| shape.causal_masks(x0.rows(), p_uncond, rng).0;
    let mut opt = AdamState::default();
    planner.model.fit(&windows, None, fit, &mut opt, Some(&mut mask_fn), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[run]\nseed = 1\nbogus_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }
}
