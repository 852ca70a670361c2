use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseDetector {
    /// Collapse when the return falls below `(1 - drop_fraction) * best`.
    pub drop_fraction: f64,
    /// Collapse when the objective exceeds this multiple of the rolling median.
    pub spike_multiple: f64,
    /// Evaluations in the rolling median.
    pub median_window: usize,
    /// Earlier evaluations required before spikes are judged.
    pub min_history: usize,
}

impl Default for CollapseDetector {
    fn default() -> Self {
        Self {
            drop_fraction: 0.5,
            spike_multiple: 10.0,
            median_window: 5,
            min_history: 3,
        }
    }
}

impl CollapseDetector {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.drop_fraction > 0.0 && self.drop_fraction <= 1.0,
            Config,
            "drop fraction {} outside (0, 1]",
            self.drop_fraction
        );
        ensure!(self.spike_multiple > 1.0, Config, "spike multiple must exceed 1");
        ensure!(self.median_window >= 1, Config, "median window must be positive");
        Ok(())
    }
}

/// One evaluation as seen by the detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub ret: f64,
    /// Training objective magnitude over the preceding block; `None` for
    /// evaluations without training (the starting point).
    pub objective: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verdict {
    Healthy,
    NonFinite,
    ReturnDrop { current: f64, best: f64 },
    Spike { current: f64, median: f64 },
}

impl Verdict {
    pub fn is_collapse(&self) -> bool {
        !matches!(self, Verdict::Healthy)
    }

    pub fn describe(&self) -> String {
        match self {
            Verdict::Healthy => "healthy".into(),
            Verdict::NonFinite => "non-finite metric".into(),
            Verdict::ReturnDrop { current, best } => format!("return {current:.4} fell below best {best:.4}"),
            Verdict::Spike { current, median } => format!("objective {current:.4e} spiked over median {median:.4e}"),
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Judges the newest point of `history` against the ones before it.
pub fn detect_collapse(history: &[EvalPoint], detector: &CollapseDetector) -> Verdict {
    let Some(last) = history.last() else {
        return Verdict::Healthy;
    };
    if history
        .iter()
        .any(|p| !p.ret.is_finite() || p.objective.is_some_and(|o| !o.is_finite()))
    {
        return Verdict::NonFinite;
    }
    let best = history.iter().map(|p| p.ret).fold(f64::NEG_INFINITY, f64::max);
    if best > 0.0 && last.ret < (1.0 - detector.drop_fraction) * best {
        return Verdict::ReturnDrop { current: last.ret, best };
    }
    if let Some(cur) = last.objective {
        let mut prev: Vec<f64> = history[..history.len() - 1]
            .iter()
            .filter_map(|p| p.objective)
            .map(f64::abs)
            .collect();
        if prev.len() >= detector.min_history {
            let start = prev.len().saturating_sub(detector.median_window);
            let m = median(&mut prev[start..]);
            if m > 0.0 && cur.abs() > detector.spike_multiple * m {
                return Verdict::Spike { current: cur.abs(), median: m };
            }
        }
    }
    Verdict::Healthy
}
