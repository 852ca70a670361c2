use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_with, EvalConfig};
use crate::diffusion::Sampler;
use crate::dmc::{build_context, ActionSelector, PolicyDmc};
use crate::envs::{Nav1DWorld, Transition};
use crate::error::{ensure, Result};
use crate::qvalue::{IqlConfig, IqlTrainer, QFunction, TransitionBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineFinetuneConfig {
    pub enabled: bool,
    /// First wall step at which injections happen.
    pub activation_step: u64,
    pub episodes: usize,
    pub buffer_cap: usize,
    /// Continue training Q on the buffer after each injection.
    pub q_continue: bool,
    pub q_steps: usize,
}

impl Default for OnlineFinetuneConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            activation_step: 0,
            episodes: 8,
            buffer_cap: 4096,
            q_continue: false,
            q_steps: 200,
        }
    }
}

/// FIFO transition buffer; the oldest transitions are evicted past `cap`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    cap: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn push(&mut self, t: Transition) {
        self.items.push_back(t);
        while self.items.len() > self.cap {
            self.items.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct InjectReport {
    pub transitions: usize,
    pub q_steps: usize,
    pub warning: Option<String>,
}

/// Rolls out the current policy (starts drawn from `rng`), appends the
/// transitions to `buffer`, and optionally continues Q training on it.
/// Nothing happens before the activation step or when disabled; a missing
/// environment leaves everything untouched with a warning.
#[allow(clippy::too_many_arguments)]
pub fn online_inject<R: Rng + ?Sized>(
    policy: &PolicyDmc,
    world: Option<&Nav1DWorld>,
    buffer: &mut ReplayBuffer,
    cfg: &OnlineFinetuneConfig,
    step: u64,
    q: Option<(&mut QFunction, &IqlConfig)>,
    selector: &ActionSelector,
    sampler: &Sampler,
    rng: &mut R,
) -> Result<InjectReport> {
    if !cfg.enabled || step < cfg.activation_step {
        return Ok(InjectReport::default());
    }
    let Some(world) = world else {
        return Ok(InjectReport {
            warning: Some("online injection skipped: environment unavailable, continuing offline".into()),
            ..Default::default()
        });
    };
    ensure!(cfg.episodes >= 1, Config, "online injection needs at least one episode");
    let ecfg = EvalConfig {
        episodes: cfg.episodes,
        seed_base: rng.random(),
        starts: None,
    };
    let mut log: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); cfg.episodes];
    let stats = evaluate_with(world, &ecfg, None, |_, hist| {
        let ctx: Vec<_> = hist.iter().map(|h| build_context(h, policy.window, policy.obs_dim)).collect();
        let acts: Vec<f64> = policy
            .act_batch(&ctx, selector, None, sampler, rng)?
            .into_iter()
            .map(|a| a[0].clamp(-1.0, 1.0))
            .collect();
        for (i, h) in hist.iter().enumerate() {
            log[i].push((h.last().expect("history is never empty").clone(), acts[i]));
        }
        Ok(acts)
    })?;
    let mut added = 0;
    for (ep, rec) in log.iter().zip(&stats.episodes) {
        let mut state = world.reset(rec.start);
        for (k, (_, a)) in ep.iter().enumerate() {
            let (next, r) = world.step(state, *a)?;
            buffer.push(Transition {
                obs: world.observe(state),
                action: *a,
                reward: r,
                next_obs: world.observe(next),
                done: k + 1 == ep.len(),
            });
            state = next;
            added += 1;
        }
    }
    let mut report = InjectReport {
        transitions: added,
        ..Default::default()
    };
    if let (true, Some((qf, iql))) = (cfg.q_continue, q) {
        let data = TransitionBatch::from_transitions(buffer.iter())?;
        let mut trainer = IqlTrainer::new(iql.clone(), qf.clone())?;
        trainer.train(&data, cfg.q_steps, rng)?;
        *qf = trainer.qf;
        report.q_steps = cfg.q_steps;
    }
    Ok(report)
}
