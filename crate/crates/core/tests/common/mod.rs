#![allow(dead_code)]

//! Three-state chain MDP shared by the Q-learning tests and the acceptance
//! run: moving right from the middle state reaches the only reward.

use dmc_core::numcore::Tensor;
use dmc_core::qvalue::{IqlConfig, TransitionBatch};

pub const REWARDS: [f64; 3] = [0.0, 0.0, 1.0];
pub const GAMMA: f64 = 0.9;

pub fn chain_next(s: usize, a: f64) -> usize {
    if a > 0.0 {
        (s + 1).min(2)
    } else {
        s.saturating_sub(1)
    }
}

pub fn one_hot(s: usize) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[s] = 1.0;
    v
}

/// Every (state, action) pair once; the chain never terminates.
pub fn chain_batch() -> TransitionBatch {
    let mut obs = Vec::new();
    let mut act = Vec::new();
    let mut rew = Vec::new();
    let mut next = Vec::new();
    for s in 0..3 {
        for a in [-1.0, 1.0] {
            let s2 = chain_next(s, a);
            obs.extend(one_hot(s));
            act.push(a);
            rew.push(REWARDS[s2]);
            next.extend(one_hot(s2));
        }
    }
    TransitionBatch {
        obs: Tensor::matrix(6, 3, obs).unwrap(),
        act: Tensor::matrix(6, 1, act).unwrap(),
        reward: rew,
        next_obs: Tensor::matrix(6, 3, next).unwrap(),
        done: vec![false; 6],
    }
}

/// Tabular fixed point of the expectile Bellman operator: with both actions
/// equally represented, V(s) = tau * max + (1 - tau) * min over the two Q's.
pub fn expectile_vi(tau: f64) -> [[f64; 2]; 3] {
    let mut q = [[0.0f64; 2]; 3];
    for _ in 0..10_000 {
        let v: Vec<f64> = q
            .iter()
            .map(|r| tau * r[0].max(r[1]) + (1.0 - tau) * r[0].min(r[1]))
            .collect();
        for s in 0..3 {
            for (k, a) in [-1.0, 1.0].into_iter().enumerate() {
                let s2 = chain_next(s, a);
                q[s][k] = REWARDS[s2] + GAMMA * v[s2];
            }
        }
    }
    q
}

pub fn optimal_vi() -> [[f64; 2]; 3] {
    let mut q = [[0.0f64; 2]; 3];
    for _ in 0..10_000 {
        let v: Vec<f64> = q.iter().map(|r| r[0].max(r[1])).collect();
        for s in 0..3 {
            for (k, a) in [-1.0, 1.0].into_iter().enumerate() {
                let s2 = chain_next(s, a);
                q[s][k] = REWARDS[s2] + GAMMA * v[s2];
            }
        }
    }
    q
}

pub fn chain_config() -> IqlConfig {
    IqlConfig {
        discount: GAMMA,
        target_rate: 0.02,
        steps: 20000,
        batch_size: 6,
        lr: 1e-3,
        lr_final_ratio: 0.01,
        hidden: vec![32, 32],
        ..Default::default()
    }
}
