use rand::Rng;

use super::select::argmax;
use crate::diffusion::{ConditionMask, DiffusionModel, Sampler};
use crate::envs::Transition;
use crate::error::{ensure, Error, Result};
use crate::numcore::Tensor;
use crate::qvalue::{traj_value, PairScorer};

/// Trajectory planner over the interleaved layout
/// `[o_0, a_0, o_1, a_1, ..., o_{N-1}, a_{N-1}, o_N]`.
#[derive(Clone, Debug)]
pub struct PlannerDmc {
    pub model: DiffusionModel<f64>,
    pub horizon: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// Output of [`PlannerDmc::plan`].
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub trajectory: Vec<f64>,
    pub first_action: Vec<f64>,
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub candidates: Tensor<f64>,
}

impl PlannerDmc {
    pub fn new(model: DiffusionModel<f64>, horizon: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        ensure!(horizon >= 1, Config, "plan horizon must be positive");
        let dim = Self::layout_dim(horizon, obs_dim, act_dim);
        if model.data_dim != dim || model.cond_dim != 0 {
            return Err(Error::shape(
                "planner model",
                format!("expected an unconditional model over {dim} values, got {}", model.data_dim),
            ));
        }
        Ok(Self {
            model,
            horizon,
            obs_dim,
            act_dim,
        })
    }

    pub fn layout_dim(horizon: usize, obs_dim: usize, act_dim: usize) -> usize {
        horizon * (obs_dim + act_dim) + obs_dim
    }

    pub fn dim(&self) -> usize {
        Self::layout_dim(self.horizon, self.obs_dim, self.act_dim)
    }

    fn stride(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    pub fn obs_at<'a>(&self, row: &'a [f64], k: usize) -> &'a [f64] {
        let b = k * self.stride();
        &row[b..b + self.obs_dim]
    }

    pub fn act_at<'a>(&self, row: &'a [f64], k: usize) -> &'a [f64] {
        let b = k * self.stride() + self.obs_dim;
        &row[b..b + self.act_dim]
    }

    /// Number of leading columns revealed by a `k`-step causal prefix:
    /// observations `0..k` and the actions between them.
    pub fn prefix_width(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            (k.min(self.horizon + 1) - 1) * self.stride() + self.obs_dim
        }
    }

    /// Training windows starting at every step of every episode. Steps past
    /// the episode end repeat the terminal observation with zero actions.
    pub fn windows(&self, episodes: &[Vec<Transition>]) -> Result<Tensor<f64>> {
        ensure!(self.obs_dim == 2 && self.act_dim == 1, Config, "episode data is Nav1D-shaped");
        let mut rows = Vec::new();
        for ep in episodes {
            let Some(last) = ep.last() else { continue };
            for start in 0..ep.len() {
                let mut row = Vec::with_capacity(self.dim());
                for k in 0..self.horizon {
                    match ep.get(start + k) {
                        Some(t) => {
                            row.extend_from_slice(&t.obs);
                            row.push(t.action);
                        }
                        None => {
                            row.extend_from_slice(&last.next_obs);
                            row.push(0.0);
                        }
                    }
                }
                let end = ep.get(start + self.horizon - 1).unwrap_or(last);
                row.extend_from_slice(&end.next_obs);
                rows.push(row);
            }
        }
        ensure!(!rows.is_empty(), Contract, "no episodes to cut windows from");
        Tensor::from_rows(&rows)
    }

    /// Causal masks for a batch: each row reveals a random-length prefix of
    /// timesteps, the empty prefix with probability `p_uncond`. Returns the
    /// flattened mask and the prefix lengths.
    pub fn causal_masks<R: Rng + ?Sized>(&self, rows: usize, p_uncond: f64, rng: &mut R) -> (Vec<bool>, Vec<usize>) {
        let d = self.dim();
        let mut mask = Vec::with_capacity(rows * d);
        let mut lens = Vec::with_capacity(rows);
        for _ in 0..rows {
            let k = if rng.random::<f64>() < p_uncond {
                0
            } else {
                rng.random_range(1..=self.horizon)
            };
            let w = self.prefix_width(k);
            mask.extend((0..d).map(|j| j < w));
            lens.push(k);
        }
        (mask, lens)
    }

    /// A minibatch of windows with their causal masks.
    pub fn masked_training_batch<R: Rng + ?Sized>(
        &self,
        windows: &Tensor<f64>,
        batch: usize,
        p_uncond: f64,
        rng: &mut R,
    ) -> (Tensor<f64>, ConditionMask<f64>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..windows.rows())).collect();
        let x0 = windows.select_rows(&idx);
        let (mask, _) = self.causal_masks(batch, p_uncond, rng);
        let cm = ConditionMask::new(mask, x0.clone()).expect("windows are finite");
        (x0, cm)
    }

    /// `(obs, action)` pairs of a plan row, first `count` steps.
    pub fn pairs(&self, row: &[f64], count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..count.min(self.horizon))
            .map(|k| (self.obs_at(row, k).to_vec(), self.act_at(row, k).to_vec()))
            .collect()
    }

    /// `(s, a, s')` triplets on the first state/action channel.
    pub fn triplets(&self, row: &[f64], count: usize) -> Vec<(f64, f64, f64)> {
        (0..count.min(self.horizon))
            .map(|k| (self.obs_at(row, k)[0], self.act_at(row, k)[0], self.obs_at(row, k + 1)[0]))
            .collect()
    }

    /// In-painted candidate plans, each starting at `obs`.
    pub fn candidates<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        n: usize,
        sampler: &Sampler,
        rng: &mut R,
    ) -> Result<Tensor<f64>> {
        ensure!(n >= 1, Contract, "need at least one rollout");
        ensure!(obs.len() == self.obs_dim, Contract, "observation has {} values, expected {}", obs.len(), self.obs_dim);
        let d = self.dim();
        let mut known = Tensor::zeros(&[n, d]);
        let mut mask = vec![false; n * d];
        for r in 0..n {
            for (j, &v) in obs.iter().enumerate() {
                known.set(r, j, v);
                mask[r * d + j] = true;
            }
        }
        self.model.inpaint_sample(&ConditionMask::new(mask, known)?, None, sampler, rng)
    }

    /// Generates `n_rollouts` plans from `obs`, scores each by the (optionally
    /// discounted) sum of Q over its first `scored_steps` pairs and returns the
    /// best with its first action clipped to `[-1, 1]`. A single rollout needs
    /// no scorer.
    pub fn plan<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        n_rollouts: usize,
        sampler: &Sampler,
        q: Option<&dyn PairScorer>,
        scored_steps: usize,
        discount: Option<f64>,
        rng: &mut R,
    ) -> Result<Plan> {
        let cands = self.candidates(obs, n_rollouts, sampler, rng)?;
        let scores = match q {
            Some(q) => (0..n_rollouts)
                .map(|r| traj_value(q, &self.pairs(cands.row_slice(r), scored_steps), discount))
                .collect::<Result<Vec<f64>>>()?,
            None if n_rollouts == 1 => vec![0.0],
            None => return Err(Error::Config("scoring several rollouts needs a Q function".into())),
        };
        Ok(self.finish(cands, scores))
    }

    /// Picks the argmax-scoring candidate.
    pub fn finish(&self, candidates: Tensor<f64>, scores: Vec<f64>) -> Plan {
        let chosen = argmax(&scores);
        let trajectory = candidates.row_vec(chosen);
        let first_action = self.act_at(&trajectory, 0).iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        Plan {
            trajectory,
            first_action,
            scores,
            chosen,
            candidates,
        }
    }
}
