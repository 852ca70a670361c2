use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Sampler;
use crate::dmc::{build_context, ActionSelector, PlannerDmc, PolicyDmc};
use crate::envs::{coherency_planner, coherency_policy_with, BehaviorDensity, Coverage, Nav1DState, Nav1DWorld, OfflineDataset};
use crate::error::{ensure, Result};
use crate::qvalue::PairScorer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episode `i` starts from a state drawn with seed `seed_base + i`.
    pub seed_base: u64,
    /// Start interval; `None` means the start support of the dataset the
    /// task was built from (see [`EvalConfig::for_dataset`]), or `[-1, 1]`
    /// when no dataset is involved.
    pub starts: Option<[f64; 2]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 64,
            seed_base: 10_000,
            starts: None,
        }
    }
}

impl EvalConfig {
    /// Fills an unset start interval with the dataset's start support.
    pub fn for_dataset(mut self, data: &OfflineDataset) -> Self {
        if self.starts.is_none() {
            let (lo, hi) = match data.coverage {
                Coverage::Partial => data.world.config().partial_start,
                Coverage::Full | Coverage::Expert => (-1.0, 1.0),
            };
            self.starts = Some([lo, hi]);
        }
        self
    }

    pub fn start_interval(&self) -> [f64; 2] {
        self.starts.unwrap_or([-1.0, 1.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub start: f64,
    pub ret: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation of the episode returns.
    pub std: f64,
    pub coherency: Option<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalStats {
    pub fn from_returns(returns: &[f64], coherency: Option<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            coherency,
            episodes: Vec::new(),
        }
    }

    /// `std / |mean|`, or infinity for a zero mean.
    pub fn relative_std(&self) -> f64 {
        if self.mean == 0.0 {
            f64::INFINITY
        } else {
            self.std / self.mean.abs()
        }
    }
}

/// Start state of the episode with the given seed: uniform on `[lo, hi]`.
pub fn episode_start(seed: u64, [lo, hi]: [f64; 2]) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(lo..=hi)
}

/// Sampling randomness for evaluations, fixed per seed base so that two
/// models are compared on common noise.
pub fn eval_rng(cfg: &EvalConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed_base ^ 0x5eed_e7a1)
}

/// Runs all episodes in lockstep. `act` receives the current states and
/// each episode's observation history (newest last) and returns one action
/// per episode. Coherency scores the executed `(s, a)` pairs when a behavior
/// density is given.
pub fn evaluate_with(
    world: &Nav1DWorld,
    cfg: &EvalConfig,
    density: Option<&BehaviorDensity>,
    mut act: impl FnMut(&[Nav1DState], &[Vec<Vec<f64>>]) -> Result<Vec<f64>>,
) -> Result<EvalStats> {
    ensure!(cfg.episodes >= 1, Config, "evaluation needs at least one episode");
    let [lo, hi] = cfg.start_interval();
    ensure!(-1.0 <= lo && lo < hi && hi <= 1.0, Config, "evaluation start interval must lie in [-1, 1]");
    let seeds: Vec<u64> = (0..cfg.episodes as u64).map(|i| cfg.seed_base + i).collect();
    let starts: Vec<f64> = seeds.iter().map(|&s| episode_start(s, cfg.start_interval())).collect();
    let mut states: Vec<Nav1DState> = starts.iter().map(|&s| world.reset(s)).collect();
    let mut hist: Vec<Vec<Vec<f64>>> = states.iter().map(|&s| vec![world.observe(s).to_vec()]).collect();
    let mut returns = vec![0.0; cfg.episodes];
    let mut pairs = Vec::with_capacity(cfg.episodes * world.horizon());
    for _ in 0..world.horizon() {
        let actions = act(&states, &hist)?;
        ensure!(actions.len() == states.len(), Contract, "{} actions for {} episodes", actions.len(), states.len());
        for i in 0..states.len() {
            let a = actions[i].clamp(-1.0, 1.0);
            pairs.push((states[i].s, a));
            let (next, r) = world.step(states[i], a)?;
            returns[i] += r;
            states[i] = next;
            hist[i].push(world.observe(next).to_vec());
        }
    }
    let coherency = density.map(|d| coherency_policy_with(&pairs, d).score);
    let mut stats = EvalStats::from_returns(&returns, coherency);
    stats.episodes = seeds
        .iter()
        .zip(&starts)
        .zip(&returns)
        .map(|((&seed, &start), &ret)| EpisodeRecord { seed, start, ret })
        .collect();
    Ok(stats)
}

/// Policy evaluation: one batched sampler call per step across episodes.
pub fn evaluate_policy(
    policy: &PolicyDmc,
    world: &Nav1DWorld,
    cfg: &EvalConfig,
    selector: &ActionSelector,
    q: Option<&dyn PairScorer>,
    sampler: &Sampler,
    density: Option<&BehaviorDensity>,
) -> Result<EvalStats> {
    let mut rng = eval_rng(cfg);
    evaluate_with(world, cfg, density, |_, hist| {
        let ctx: Vec<_> = hist
            .iter()
            .map(|h| build_context(h, policy.window, policy.obs_dim))
            .collect();
        Ok(policy
            .act_batch(&ctx, selector, q, sampler, &mut rng)?
            .into_iter()
            .map(|a| a[0])
            .collect())
    })
}

/// Receding-horizon planner evaluation: re-plans at every step and executes
/// the chosen plan's first action. Coherency is the fraction of the chosen
/// plans' transitions consistent with the true dynamics within `tol`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_planner(
    planner: &PlannerDmc,
    world: &Nav1DWorld,
    cfg: &EvalConfig,
    rollouts: usize,
    q: Option<&dyn PairScorer>,
    sampler: &Sampler,
    tol: f64,
) -> Result<EvalStats> {
    let mut rng = eval_rng(cfg);
    let mut triplets = Vec::new();
    let mut stats = evaluate_with(world, cfg, None, |_, hist| {
        hist.iter()
            .map(|h| {
                let obs = h.last().expect("history holds the current observation");
                let plan = planner.plan(obs, rollouts, sampler, q, planner.horizon, None, &mut rng)?;
                triplets.extend(planner.triplets(&plan.trajectory, planner.horizon));
                Ok(plan.first_action[0])
            })
            .collect()
    })?;
    stats.coherency = Some(coherency_planner(&triplets, world, tol)?.score);
    Ok(stats)
}
