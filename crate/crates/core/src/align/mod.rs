//! Reward alignment of diffusion models: policy gradients over the denoising
//! chain (REINFORCE with clipping or KL control, and reparameterized QV-PG),
//! preference optimization, and filtered supervised fine-tuning.

pub mod chain;
pub mod dpo;
pub mod reward;
pub mod rl;
pub mod sft;

pub use chain::{kappa_sequence, record_chain, Chain, KappaKind};
pub use dpo::{dpo_loss, dpo_update, make_preference_pairs, DpoConfig, DpoDraw, DpoStats, DpoWeighting, PreferencePair};
pub use reward::{BumpReward, FnReward, QLayout, QReward, SampleReward};
pub use rl::{
    qvpg_loss, qvpg_update, reinforce_loss, reinforce_update, ChainNoise, DivergenceControl, RlAlignConfig, RlMethod,
    RlStats,
};
pub use sft::{likelihood_threshold, quantile, sft_round, SftConfig, SftStats, Synthesizer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionModel};
use crate::error::{ensure, Result};
use crate::numcore::{Tensor, Var};

/// Mean pairwise squared distance between rows, `2 / (n - 1) * sum ||x_i - mean||^2`.
pub fn entropy_bonus<'t>(x: Var<'t, f64>) -> Var<'t, f64> {
    let n = x.rows();
    assert!(n >= 2, "dispersion needs at least two samples");
    let centre = x.mean_rows().neg();
    x.add_row(centre).square().sum().scale(2.0 / (n as f64 - 1.0))
}

/// Allowed drift away from the foundation distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceBudget {
    /// Maximum drop of the mean foundation likelihood score below the
    /// offline-data baseline.
    pub delta: f64,
    /// Minimum coherency, where one is measured.
    pub coherency_floor: Option<f64>,
}

/// Data-side reference for divergence checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceBaseline {
    /// Mean foundation likelihood score of the offline data.
    pub mean: f64,
    /// Its `q`-quantile.
    pub low_quantile: f64,
}

impl DivergenceBaseline {
    pub fn measure<D: Denoiser<f64>, R: Rng + ?Sized>(
        foundation: &DiffusionModel<f64, D>,
        data: &Tensor<f64>,
        cond: Option<&Tensor<f64>>,
        q: f64,
        mc_draws: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(data.rows() > 0, Contract, "baseline needs data");
        let s = foundation.elbo_proxy(data, cond, mc_draws, rng)?;
        Ok(Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            low_quantile: quantile(&s, q),
        })
    }

    /// Budget allowing samples to sit, on average, as low as the data's
    /// low quantile: `delta = mean - low_quantile`.
    pub fn budget(&self, coherency_floor: Option<f64>) -> DivergenceBudget {
        DivergenceBudget {
            delta: self.mean - self.low_quantile,
            coherency_floor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceReport {
    /// `baseline - mean score of the samples`; positive means less likely.
    pub gap: f64,
    pub delta: f64,
    pub coherency: Option<f64>,
    pub coherency_floor: Option<f64>,
    pub pass: bool,
}

/// Scores `samples` under the foundation and compares against the budget.
#[allow(clippy::too_many_arguments)]
pub fn divergence_check<D: Denoiser<f64>, R: Rng + ?Sized>(
    foundation: &DiffusionModel<f64, D>,
    samples: &Tensor<f64>,
    cond: Option<&Tensor<f64>>,
    baseline: &DivergenceBaseline,
    budget: &DivergenceBudget,
    coherency: Option<f64>,
    mc_draws: usize,
    rng: &mut R,
) -> Result<DivergenceReport> {
    let s = foundation.elbo_proxy(samples, cond, mc_draws, rng)?;
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let gap = baseline.mean - mean;
    let coherent = match (coherency, budget.coherency_floor) {
        (Some(c), Some(f)) => c >= f,
        _ => true,
    };
    Ok(DivergenceReport {
        gap,
        delta: budget.delta,
        coherency,
        coherency_floor: budget.coherency_floor,
        pass: gap.is_finite() && gap <= budget.delta && coherent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;

    #[test]
    fn entropy_of_identical_rows_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        assert_eq!(entropy_bonus(x).item(), 0.0);
    }

    #[test]
    fn entropy_of_opposite_points() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap());
        assert_eq!(entropy_bonus(x).item(), 4.0);
    }
}
