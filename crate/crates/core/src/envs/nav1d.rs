use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Largest per-step move of the reward centers between consecutive steps.
pub const CENTER_STEP: f64 = 0.4;
pub const SIGMA_RANGE: (f64, f64) = (0.05, 0.3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Nav1DConfig {
    pub horizon: usize,
    pub step_size: f64,
    /// Start interval of the partial-coverage dataset.
    pub partial_start: (f64, f64),
    pub world_seed: u64,
}

impl Default for Nav1DConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            step_size: 0.25,
            partial_start: (-1.0, 0.0),
            world_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nav1DState {
    pub s: f64,
    pub t: usize,
}

/// Navigation on `[-1, 1]` with one Gaussian reward bump per step.
///
/// `centers[k]` and `widths[k]` describe the bump scored after step `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Nav1DWorld {
    config: Nav1DConfig,
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl Nav1DWorld {
    /// Draws reward centers from a bounded random walk and widths uniformly,
    /// both from `config.world_seed`.
    pub fn new(config: Nav1DConfig) -> Result<Self> {
        validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
        let mut centers = Vec::with_capacity(config.horizon);
        let mut mu: f64 = rng.random_range(-1.0..=1.0);
        for k in 0..config.horizon {
            if k > 0 {
                mu = (mu + rng.random_range(-CENTER_STEP..=CENTER_STEP)).clamp(-1.0, 1.0);
            }
            centers.push(mu);
        }
        let widths = (0..config.horizon)
            .map(|_| rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1))
            .collect();
        Ok(Self {
            config,
            centers,
            widths,
        })
    }

    pub fn from_parts(config: Nav1DConfig, centers: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        validate(&config)?;
        ensure!(
            centers.len() == config.horizon && widths.len() == config.horizon,
            Contract,
            "need {} centers and widths",
            config.horizon
        );
        ensure!(
            centers.iter().all(|m| (-1.0..=1.0).contains(m)),
            Contract,
            "reward centers must lie in [-1, 1]"
        );
        ensure!(widths.iter().all(|&w| w > 0.0), Contract, "reward widths must be positive");
        Ok(Self {
            config,
            centers,
            widths,
        })
    }

    pub fn config(&self) -> &Nav1DConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn step_size(&self) -> f64 {
        self.config.step_size
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn reset(&self, s: f64) -> Nav1DState {
        Nav1DState {
            s: s.clamp(-1.0, 1.0),
            t: 0,
        }
    }

    /// Deterministic transition `clip(s + step_size * a, -1, 1)`; the action is
    /// clipped to `[-1, 1]` first.
    pub fn transition(&self, s: f64, a: f64) -> f64 {
        (s + self.config.step_size * a.clamp(-1.0, 1.0)).clamp(-1.0, 1.0)
    }

    /// Peak-normalized Gaussian reward for landing at `s_next` after step `t_next`.
    pub fn reward(&self, t_next: usize, s_next: f64) -> f64 {
        let (mu, sigma) = (self.centers[t_next - 1], self.widths[t_next - 1]);
        (-(s_next - mu).powi(2) / (2.0 * sigma * sigma)).exp()
    }

    pub fn step(&self, state: Nav1DState, a: f64) -> Result<(Nav1DState, f64)> {
        ensure!(
            state.t < self.config.horizon,
            Contract,
            "episode already terminal at step {}",
            state.t
        );
        let s = self.transition(state.s, a);
        let next = Nav1DState { s, t: state.t + 1 };
        Ok((next, self.reward(next.t, s)))
    }

    /// Observation `(s, t / H)`.
    pub fn observe(&self, state: Nav1DState) -> [f64; 2] {
        [state.s, state.t as f64 / self.config.horizon as f64]
    }

    /// Recovers the step index from an observation's time channel.
    pub fn step_of(&self, obs_time: f64) -> usize {
        (obs_time * self.config.horizon as f64).round().max(0.0) as usize
    }

    /// Greedy one-step policy aiming at the next reward center.
    pub fn expert_action(&self, state: Nav1DState) -> f64 {
        let mu = self.centers[state.t.min(self.config.horizon - 1)];
        ((mu - state.s) / self.config.step_size).clamp(-1.0, 1.0)
    }

    /// Return of the optimal policy from `s0`, by dynamic programming over a
    /// state grid of `grid` points with linear interpolation.
    pub fn optimal_return(&self, s0: f64, grid: usize, action_grid: usize) -> f64 {
        let h = self.config.horizon;
        let xs: Vec<f64> = (0..grid).map(|i| -1.0 + 2.0 * i as f64 / (grid - 1) as f64).collect();
        let acts: Vec<f64> = (0..action_grid)
            .map(|i| -1.0 + 2.0 * i as f64 / (action_grid - 1) as f64)
            .collect();
        let interp = |v: &[f64], s: f64| {
            let u = (s + 1.0) / 2.0 * (grid - 1) as f64;
            let i = (u.floor() as usize).min(grid - 2);
            let w = u - i as f64;
            v[i] * (1.0 - w) + v[i + 1] * w
        };
        let mut value = vec![0.0; grid];
        let mut at_s0 = 0.0;
        for t in (0..h).rev() {
            let best = |s: f64| {
                acts.iter()
                    .map(|&a| {
                        let s2 = self.transition(s, a);
                        self.reward(t + 1, s2) + interp(&value, s2)
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            if t == 0 {
                at_s0 = best(s0);
            }
            value = xs.iter().map(|&s| best(s)).collect();
        }
        at_s0
    }
}

fn validate(c: &Nav1DConfig) -> Result<()> {
    ensure!(c.horizon >= 1, Config, "horizon must be at least 1");
    ensure!(
        c.step_size > 0.0 && c.step_size <= 1.0,
        Config,
        "step size {} outside (0, 1]",
        c.step_size
    );
    ensure!(
        c.partial_start.0 < c.partial_start.1
            && c.partial_start.0 >= -1.0
            && c.partial_start.1 <= 1.0,
        Config,
        "partial start interval must be a proper sub-interval of [-1, 1]"
    );
    Ok(())
}
