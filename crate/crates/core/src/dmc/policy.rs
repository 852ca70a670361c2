use rand::Rng;

use super::context::{build_context, ContextWindow};
use super::select::{select_candidate, ActionSelector, SelectorKind};
use crate::diffusion::{DiffusionModel, Sampler};
use crate::envs::Transition;
use crate::error::{ensure, Error, Result};
use crate::numcore::Tensor;
use crate::qvalue::PairScorer;

/// Diffusion policy: samples action chunks conditioned on an encoded
/// observation window.
#[derive(Clone, Debug)]
pub struct PolicyDmc {
    pub model: DiffusionModel<f64>,
    pub window: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub chunk: usize,
}

impl PolicyDmc {
    pub fn new(model: DiffusionModel<f64>, window: usize, obs_dim: usize, act_dim: usize, chunk: usize) -> Result<Self> {
        ensure!(window >= 1 && chunk >= 1, Config, "window and chunk must be positive");
        if model.data_dim != act_dim * chunk || model.cond_dim != ContextWindow::encoded_width(window, obs_dim) {
            return Err(Error::shape(
                "policy model",
                format!(
                    "expected data dim {} and condition dim {}, got {} and {}",
                    act_dim * chunk,
                    ContextWindow::encoded_width(window, obs_dim),
                    model.data_dim,
                    model.cond_dim
                ),
            ));
        }
        Ok(Self {
            model,
            window,
            obs_dim,
            act_dim,
            chunk,
        })
    }

    pub fn cond_dim(&self) -> usize {
        ContextWindow::encoded_width(self.window, self.obs_dim)
    }

    pub fn empty_context(&self) -> ContextWindow {
        ContextWindow::new(self.window, self.obs_dim)
    }

    /// `(action chunks, encoded contexts)` for every step of every episode;
    /// chunks running past the episode end are zero-padded.
    pub fn training_set(&self, episodes: &[Vec<Transition>]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        ensure!(self.obs_dim == 2 && self.act_dim == 1, Config, "episode data is Nav1D-shaped");
        let mut x = Vec::new();
        let mut c = Vec::new();
        let mut rows = 0;
        for ep in episodes {
            let obs: Vec<Vec<f64>> = ep.iter().map(|t| t.obs.to_vec()).collect();
            for k in 0..ep.len() {
                c.extend(build_context(&obs[..=k], self.window, self.obs_dim).encode());
                for j in 0..self.chunk {
                    x.push(ep.get(k + j).map_or(0.0, |t| t.action));
                }
                rows += 1;
            }
        }
        ensure!(rows > 0, Contract, "no transitions to train on");
        Ok((
            Tensor::matrix(rows, self.act_dim * self.chunk, x)?,
            Tensor::matrix(rows, self.cond_dim(), c)?,
        ))
    }

    /// `n` candidate chunks per context, grouped by context, clipped to bounds.
    pub fn sample_candidates<R: Rng + ?Sized>(
        &self,
        contexts: &[ContextWindow],
        n: usize,
        sampler: &Sampler,
        rng: &mut R,
    ) -> Result<Tensor<f64>> {
        ensure!(n >= 1, Contract, "need at least one candidate");
        let mut cond = Vec::with_capacity(contexts.len() * n * self.cond_dim());
        for ctx in contexts {
            ensure!(ctx.len() == self.window, Contract, "context window length differs from the policy's");
            let e = ctx.encode();
            for _ in 0..n {
                cond.extend_from_slice(&e);
            }
        }
        let cond = Tensor::matrix(contexts.len() * n, self.cond_dim(), cond)?;
        let x = self.model.sample(contexts.len() * n, Some(&cond), sampler, rng)?;
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// One action per context.
    pub fn act_batch<R: Rng + ?Sized>(
        &self,
        contexts: &[ContextWindow],
        selector: &ActionSelector,
        q: Option<&dyn PairScorer>,
        sampler: &Sampler,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        ensure!(selector.candidates >= 1, Contract, "selector needs at least one candidate");
        if selector.kind == SelectorKind::GreedyQ && q.is_none() {
            return Err(Error::Config("greedy-Q selection needs a Q function".into()));
        }
        let n = selector.candidates;
        let cands = self.sample_candidates(contexts, n, sampler, rng)?;
        let mut out = Vec::with_capacity(contexts.len());
        for (i, ctx) in contexts.iter().enumerate() {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|j| cands.row_slice(i * n + j)[..self.act_dim].to_vec())
                .collect();
            let scores = match (selector.kind, q) {
                (SelectorKind::GreedyQ, Some(q)) => {
                    let s = ctx
                        .latest()
                        .ok_or_else(|| Error::Contract("greedy-Q selection needs a current observation".into()))?;
                    let obs = Tensor::row(s).repeat_rows(n);
                    let act = Tensor::from_rows(&rows)?;
                    Some(q.score(&obs, &act)?)
                }
                _ => None,
            };
            out.push(select_candidate(&rows, selector.kind, scores.as_deref())?);
        }
        Ok(out)
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        context: &ContextWindow,
        selector: &ActionSelector,
        q: Option<&dyn PairScorer>,
        sampler: &Sampler,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        Ok(self
            .act_batch(std::slice::from_ref(context), selector, q, sampler, rng)?
            .remove(0))
    }
}
