//! Offline Nav1D datasets and their binary file format.
//!
//! Layout (little-endian): `b"NAVD" | version: u32 | horizon: u32 | step size |
//! partial start lo, hi | world seed: u64 | centers | widths | coverage: u8 |
//! policy descriptor | episode count: u32`, then per episode a transition
//! count and `s, t/H, a, r, s', t'/H, done: u8` per transition.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nav1d::{Nav1DConfig, Nav1DState, Nav1DWorld};
use crate::error::{ensure, Error, Result};
use crate::numcore::binio::{ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 4] = b"NAVD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coverage {
    Partial,
    Full,
    Expert,
}

impl Coverage {
    fn code(self) -> u8 {
        match self {
            Coverage::Partial => 0,
            Coverage::Full => 1,
            Coverage::Expert => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Coverage::Partial,
            1 => Coverage::Full,
            2 => Coverage::Expert,
            _ => return Err(Error::Format(format!("unknown coverage code {c}"))),
        })
    }

    pub fn policy_descriptor(self) -> &'static str {
        match self {
            Coverage::Partial => "uniform-random actions, partial start interval",
            Coverage::Full => "uniform-random actions, uniform starts",
            Coverage::Expert => "greedy one-step expert, uniform starts",
        }
    }
}

impl std::str::FromStr for Coverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Coverage::Partial),
            "full" => Ok(Coverage::Full),
            "expert" => Ok(Coverage::Expert),
            _ => Err(Error::Config(format!("unknown coverage `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub obs: [f64; 2],
    pub action: f64,
    pub reward: f64,
    pub next_obs: [f64; 2],
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub world: Nav1DWorld,
    pub coverage: Coverage,
    pub policy: String,
    pub episodes: Vec<Vec<Transition>>,
}

/// Rolls out one episode of `policy` from `s0`.
pub fn rollout(world: &Nav1DWorld, s0: f64, mut policy: impl FnMut(Nav1DState) -> f64) -> Result<Vec<Transition>> {
    let mut state = world.reset(s0);
    let mut out = Vec::with_capacity(world.horizon());
    while state.t < world.horizon() {
        let a = policy(state).clamp(-1.0, 1.0);
        let (next, r) = world.step(state, a)?;
        out.push(Transition {
            obs: world.observe(state),
            action: a,
            reward: r,
            next_obs: world.observe(next),
            done: next.t == world.horizon(),
        });
        state = next;
    }
    Ok(out)
}

/// Generates `episodes` behavior-policy episodes for the given coverage.
pub fn gen_dataset<R: Rng + ?Sized>(
    world: &Nav1DWorld,
    coverage: Coverage,
    episodes: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    ensure!(episodes >= 1, Contract, "dataset needs at least one episode");
    let (lo, hi) = world.config().partial_start;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s0 = match coverage {
            Coverage::Partial => rng.random_range(lo..=hi),
            _ => rng.random_range(-1.0..=1.0),
        };
        let ep = match coverage {
            Coverage::Expert => rollout(world, s0, |st| world.expert_action(st))?,
            _ => rollout(world, s0, |_| rng.random_range(-1.0..=1.0))?,
        };
        out.push(ep);
    }
    Ok(OfflineDataset {
        world: world.clone(),
        coverage,
        policy: coverage.policy_descriptor().to_string(),
        episodes: out,
    })
}

impl OfflineDataset {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|e| e.iter().map(|t| t.reward).sum())
            .collect()
    }

    pub fn mean_return(&self) -> f64 {
        let r = self.returns();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Replays every episode through the dynamics and checks next states and
    /// rewards bit-exactly.
    pub fn verify_replay(&self) -> Result<()> {
        let h = self.world.horizon();
        for (i, ep) in self.episodes.iter().enumerate() {
            for (k, tr) in ep.iter().enumerate() {
                let state = Nav1DState {
                    s: tr.obs[0],
                    t: self.world.step_of(tr.obs[1]),
                };
                let (next, r) = self.world.step(state, tr.action)?;
                let obs = self.world.observe(next);
                if obs != tr.next_obs || r.to_bits() != tr.reward.to_bits() || tr.done != (next.t == h) {
                    return Err(Error::Contract(format!(
                        "episode {i} transition {k} does not replay"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        let c = self.world.config();
        w.u32(c.horizon as u32);
        w.f64(c.step_size);
        w.f64(c.partial_start.0);
        w.f64(c.partial_start.1);
        w.u64(c.world_seed);
        w.f64s(self.world.centers());
        w.f64s(self.world.widths());
        w.u8(self.coverage.code());
        w.string(&self.policy);
        w.u32(self.episodes.len() as u32);
        for ep in &self.episodes {
            w.u32(ep.len() as u32);
            for tr in ep {
                w.f64s(&[tr.obs[0], tr.obs[1], tr.action, tr.reward, tr.next_obs[0], tr.next_obs[1]]);
                w.u8(tr.done as u8);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let horizon = r.u32()? as usize;
        let step_size = r.f64()?;
        let partial_start = (r.f64()?, r.f64()?);
        let world_seed = r.u64()?;
        let centers = r.f64s(horizon)?;
        let widths = r.f64s(horizon)?;
        let config = Nav1DConfig {
            horizon,
            step_size,
            partial_start,
            world_seed,
        };
        let world = Nav1DWorld::from_parts(config, centers, widths)
            .map_err(|e| Error::Format(format!("invalid world in dataset: {e}")))?;
        let coverage = Coverage::from_code(r.u8()?)?;
        let policy = r.string()?;
        let n = r.u32()? as usize;
        let mut episodes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let mut ep = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                let v = r.f64s(6)?;
                let done = match r.u8()? {
                    0 => false,
                    1 => true,
                    d => return Err(Error::Format(format!("invalid done flag {d}"))),
                };
                ep.push(Transition {
                    obs: [v[0], v[1]],
                    action: v[2],
                    reward: v[3],
                    next_obs: [v[4], v[5]],
                    done,
                });
            }
            episodes.push(ep);
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Self {
            world,
            coverage,
            policy,
            episodes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> Nav1DWorld {
        Nav1DWorld::new(Nav1DConfig::default()).unwrap()
    }

    #[test]
    fn returns_ordered_by_coverage() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expert = gen_dataset(&w, Coverage::Expert, 500, &mut rng).unwrap();
        let full = gen_dataset(&w, Coverage::Full, 500, &mut rng).unwrap();
        assert!(expert.mean_return() > full.mean_return());
        assert!(full.mean_return() > 0.0);
        assert_eq!(full.len(), 500 * 8);
    }

    #[test]
    fn partial_states_bounded() {
        let w = world();
        let ds = gen_dataset(&w, Coverage::Partial, 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let reach = 8.0 * w.step_size();
        for tr in ds.transitions() {
            for s in [tr.obs[0], tr.next_obs[0]] {
                assert!((-1.0 - reach..=0.0 + reach).contains(&s));
            }
        }
    }

    #[test]
    fn replay_and_round_trip() {
        let w = world();
        let ds = gen_dataset(&w, Coverage::Full, 20, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        ds.verify_replay().unwrap();
        let bytes = ds.to_bytes();
        let back = OfflineDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(OfflineDataset::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(OfflineDataset::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let w = world();
        let a = gen_dataset(&w, Coverage::Partial, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gen_dataset(&w, Coverage::Partial, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
