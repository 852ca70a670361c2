use super::dataset::OfflineDataset;
use super::nav1d::Nav1DWorld;
use crate::error::{ensure, Result};

/// Default tolerance band, in state units, for planner coherency.
pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const STATE_BINS: usize = 32;
pub const ACTION_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoherencyReport {
    pub score: f64,
    pub samples: usize,
    /// Tolerance band for planner scores; `None` for policy scores.
    pub tolerance: Option<f64>,
}

/// Fraction of `(s, a, s')` triplets whose `s'` lies within `tol` of the true
/// transition.
pub fn coherency_planner(triplets: &[(f64, f64, f64)], world: &Nav1DWorld, tol: f64) -> Result<CoherencyReport> {
    ensure!(!triplets.is_empty(), Contract, "no plan transitions to score");
    ensure!(tol > 0.0, Contract, "tolerance must be positive");
    let hits = triplets
        .iter()
        .filter(|&&(s, a, s2)| (s2 - world.transition(s, a)).abs() <= tol)
        .count();
    Ok(CoherencyReport {
        score: hits as f64 / triplets.len() as f64,
        samples: triplets.len(),
        tolerance: Some(tol),
    })
}

/// Histogram estimate of the behavior policy `pi(a | s)`: Laplace-smoothed
/// counts over a state-by-action grid, each state row scaled by its largest bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDensity {
    /// `[STATE_BINS][ACTION_BINS]`, values in `(0, 1]`.
    table: Vec<f64>,
}

fn bin(v: f64, n: usize) -> usize {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64) as usize).min(n - 1)
}

impl BehaviorDensity {
    pub fn fit(dataset: &OfflineDataset) -> Result<Self> {
        ensure!(!dataset.is_empty(), Contract, "cannot fit a behavior density to an empty dataset");
        let mut counts = vec![1.0; STATE_BINS * ACTION_BINS];
        for tr in dataset.transitions() {
            counts[bin(tr.obs[0], STATE_BINS) * ACTION_BINS + bin(tr.action, ACTION_BINS)] += 1.0;
        }
        for row in counts.chunks_mut(ACTION_BINS) {
            let max = row.iter().copied().fold(0.0, f64::max);
            row.iter_mut().for_each(|c| *c /= max);
        }
        Ok(Self { table: counts })
    }

    pub fn density(&self, s: f64, a: f64) -> f64 {
        self.table[bin(s, STATE_BINS) * ACTION_BINS + bin(a, ACTION_BINS)]
    }
}

/// Mean normalized behavior density at the policy's `(s, a)` samples.
pub fn coherency_policy(samples: &[(f64, f64)], dataset: &OfflineDataset) -> Result<CoherencyReport> {
    let density = BehaviorDensity::fit(dataset)?;
    Ok(coherency_policy_with(samples, &density))
}

pub fn coherency_policy_with(samples: &[(f64, f64)], density: &BehaviorDensity) -> CoherencyReport {
    let score = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|&(s, a)| density.density(s, a)).sum::<f64>() / samples.len() as f64
    };
    CoherencyReport {
        score,
        samples: samples.len(),
        tolerance: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_dataset, Coverage, Nav1DConfig, Transition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world() -> Nav1DWorld {
        Nav1DWorld::new(Nav1DConfig::default()).unwrap()
    }

    #[test]
    fn true_rollouts_are_coherent() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trip: Vec<_> = (0..500)
            .map(|_| {
                let s = rng.random_range(-1.0..=1.0);
                let a = rng.random_range(-1.0..=1.0);
                (s, a, w.transition(s, a))
            })
            .collect();
        for tol in [1e-9, 0.05, 0.5] {
            assert_eq!(coherency_planner(&trip, &w, tol).unwrap().score, 1.0);
        }
    }

    #[test]
    fn independent_next_states_hit_band_mass() {
        // Brute-force expectation: P(|U - x| <= eps) for U ~ U[-1, 1] and x
        // the true next state, averaged over the same (s, a) draws.
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut trip = Vec::with_capacity(n);
        let mut expect = 0.0;
        for _ in 0..n {
            let s = rng.random_range(-1.0..=1.0);
            let a = rng.random_range(-1.0..=1.0);
            let x = w.transition(s, a);
            expect += ((x + 0.05).min(1.0) - (x - 0.05).max(-1.0)) / 2.0;
            trip.push((s, a, rng.random_range(-1.0..=1.0)));
        }
        expect /= n as f64;
        let c = coherency_planner(&trip, &w, 0.05).unwrap().score;
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((c - expect).abs() < 4.0 * se, "{c} vs {expect}");
        assert!((c - 0.05).abs() < 0.005);
    }

    #[test]
    fn flat_behavior_scores_one() {
        // Every state bin sees every action bin equally often.
        let w = world();
        let mut ds = gen_dataset(&w, Coverage::Full, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ds.episodes = vec![(0..STATE_BINS * ACTION_BINS)
            .map(|k| {
                let s = -1.0 + (2 * (k / ACTION_BINS) + 1) as f64 / STATE_BINS as f64;
                let a = -1.0 + (2 * (k % ACTION_BINS) + 1) as f64 / ACTION_BINS as f64;
                Transition {
                    obs: [s, 0.0],
                    action: a,
                    reward: 0.0,
                    next_obs: [s, 0.0],
                    done: false,
                }
            })
            .collect()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<_> = (0..1000)
            .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        assert_eq!(coherency_policy(&samples, &ds).unwrap().score, 1.0);
    }

    #[test]
    fn replaying_expert_beats_uniform() {
        let w = world();
        let ds = gen_dataset(&w, Coverage::Expert, 300, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let replay: Vec<_> = ds.transitions().map(|t| (t.obs[0], t.action)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let uniform: Vec<_> = replay.iter().map(|&(s, _)| (s, rng.random_range(-1.0..=1.0))).collect();
        let cr = coherency_policy(&replay, &ds).unwrap();
        let cu = coherency_policy(&uniform, &ds).unwrap();
        assert!(cr.score >= cu.score);
        for c in [cr, cu] {
            assert!((0.0..=1.0).contains(&c.score));
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let w = world();
        let mut ds = gen_dataset(&w, Coverage::Full, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ds.episodes.clear();
        assert!(coherency_policy(&[(0.0, 0.0)], &ds).is_err());
    }
}
