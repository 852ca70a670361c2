use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rl,
    Dpo,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rl => "rl",
            Stage::Dpo => "dpo",
            Stage::Sft => "sft",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rl" => Ok(Stage::Rl),
            "dpo" => Ok(Stage::Dpo),
            "sft" => Ok(Stage::Sft),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// `{stages} x passes`, each stage run until its evaluation plateaus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
    pub passes: usize,
    /// Convergence window, in evaluations.
    pub window: usize,
    /// Relative improvement below which a stage counts as converged.
    pub min_improvement: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Rl, Stage::Dpo, Stage::Sft],
            passes: 3,
            window: 5,
            min_improvement: 0.01,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.window >= 1, Config, "convergence window must be positive");
        ensure!(self.min_improvement >= 0.0, Config, "improvement threshold must be non-negative");
        ensure!(
            self.passes == 0 || !self.stages.is_empty(),
            Config,
            "a schedule with passes needs at least one stage"
        );
        Ok(())
    }
}

/// True once the mean of the last `window` evaluations improves on the mean
/// of the window one evaluation earlier by less than `min_improvement` of
/// its magnitude. Needs `window + 1` evaluations.
pub fn converged(history: &[f64], window: usize, min_improvement: f64) -> bool {
    let n = history.len();
    if window == 0 || n < window + 1 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let now = mean(&history[n - window..]);
    let before = mean(&history[n - window - 1..n - 1]);
    now - before < min_improvement * now.abs()
}
