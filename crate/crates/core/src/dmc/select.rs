use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorKind {
    /// Element-wise mean of the candidates.
    #[default]
    Expectation,
    /// Candidate with the highest Q value.
    GreedyQ,
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(SelectorKind::Expectation),
            "greedy-q" => Ok(SelectorKind::GreedyQ),
            _ => Err(Error::Config(format!("unknown selector `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSelector {
    pub kind: SelectorKind,
    pub candidates: usize,
}

impl Default for ActionSelector {
    fn default() -> Self {
        Self {
            kind: SelectorKind::Expectation,
            candidates: 8,
        }
    }
}

/// Index of the first maximal score.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Reduces candidates to one action, clipped to `[-1, 1]`. Greedy selection
/// needs one score per candidate.
pub fn select_candidate(candidates: &[Vec<f64>], kind: SelectorKind, scores: Option<&[f64]>) -> Result<Vec<f64>> {
    ensure!(!candidates.is_empty(), Contract, "action selection needs at least one candidate");
    let chosen = match kind {
        SelectorKind::Expectation => {
            let d = candidates[0].len();
            let mut mean = vec![0.0; d];
            for c in candidates {
                for (m, v) in mean.iter_mut().zip(c) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= candidates.len() as f64);
            mean
        }
        SelectorKind::GreedyQ => {
            let s = scores.ok_or_else(|| Error::Config("greedy-Q selection needs a Q function".into()))?;
            ensure!(
                s.len() == candidates.len(),
                Contract,
                "{} scores for {} candidates",
                s.len(),
                candidates.len()
            );
            candidates[argmax(s)].clone()
        }
    };
    Ok(chosen.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_candidates() {
        let c = vec![vec![0.3]; 4];
        assert_eq!(select_candidate(&c, SelectorKind::Expectation, None).unwrap(), vec![0.3]);
        assert_eq!(
            select_candidate(&c, SelectorKind::GreedyQ, Some(&[1.0, 2.0, 0.0, 2.0])).unwrap(),
            vec![0.3]
        );
    }

    #[test]
    fn greedy_picks_higher_q() {
        let c = vec![vec![-0.4], vec![0.7]];
        assert_eq!(select_candidate(&c, SelectorKind::GreedyQ, Some(&[0.1, 0.9])).unwrap(), vec![0.7]);
        assert!(select_candidate(&c, SelectorKind::GreedyQ, None).is_err());
    }

    #[test]
    fn expectation_is_symmetric() {
        let c = vec![vec![-0.5], vec![0.5]];
        assert_eq!(select_candidate(&c, SelectorKind::Expectation, None).unwrap(), vec![0.0]);
    }

    #[test]
    fn affine_invariance_of_argmax() {
        let s = [0.3, -1.0, 2.5, 2.4];
        let t: Vec<f64> = s.iter().map(|v| 3.0 * v + 7.0).collect();
        assert_eq!(argmax(&s), argmax(&t));
        assert!(select_candidate(&[], SelectorKind::Expectation, None).is_err());
    }
}
