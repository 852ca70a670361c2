//! Nav1D environment, offline datasets, coherency scores and the 2-D toy world.

pub mod coherency;
pub mod dataset;
pub mod nav1d;
pub mod toy;

use std::fmt::Write as _;

pub use coherency::{coherency_planner, coherency_policy, coherency_policy_with, BehaviorDensity, CoherencyReport};
pub use dataset::{gen_dataset, rollout, Coverage, OfflineDataset, Transition};
pub use nav1d::{Nav1DConfig, Nav1DState, Nav1DWorld};
pub use toy::{Bump, ToyField, ToyWorld2D};

/// Per-step reward curves `t,s,reward` on a state grid, for plotting.
pub fn nav1d_reward_csv(world: &Nav1DWorld, grid: usize) -> String {
    let mut out = String::from("t,s,reward\n");
    let g = grid.max(2);
    for t in 1..=world.horizon() {
        for i in 0..g {
            let s = -1.0 + 2.0 * i as f64 / (g - 1) as f64;
            let _ = writeln!(out, "{t},{s},{}", world.reward(t, s));
        }
    }
    out
}
