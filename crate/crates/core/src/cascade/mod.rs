//! Cascading up-sampler: a conditional diffusion model, warm-started from
//! the foundation, that maps a sample to a higher-reward sample.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diffusion::{ConditionMask, DiffusionModel, FitConfig, Sampler};
use crate::error::{ensure, Error, Result};
use crate::numcore::{AdamState, Checkpoint, Tensor};

pub const CASCADE_TAG: [u8; 4] = *b"CASC";
pub const PAIRS_TAG: [u8; 4] = *b"CPRS";

/// How candidate pairs are produced from the foundation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Curation {
    /// Regenerate a sample with a contiguous segment (25-50% of its width)
    /// in-painted from the original.
    #[default]
    InpaintSubset,
    /// Decode two samples from one shared latent `z_t`; `None` means `T / 2`.
    SharedLatent { t_share: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub curation: Curation,
    /// Candidate pairs drawn per curation call.
    pub pairs: usize,
    pub fit: FitConfig,
    /// Default number of up-sampling passes.
    pub pass_limit: usize,
    pub sampler: Sampler,
    /// Held-out conditions drawn from the foundation for evaluation.
    pub held_out: usize,
    /// Evaluation runs every pass count from 1 to this.
    pub eval_passes: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            curation: Curation::InpaintSubset,
            pairs: 1024,
            fit: FitConfig {
                steps: 2000,
                batch_size: 128,
                lr: 1e-3,
            },
            pass_limit: 1,
            sampler: Sampler::Ddpm,
            held_out: 256,
            eval_passes: 4,
        }
    }
}

/// A strictly reward-ordered `(condition, target)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadePair {
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
    /// `score(target) - score(cond) > 0`.
    pub gap: f64,
}

pub fn save_pairs(pairs: &[CascadePair], path: &Path) -> Result<()> {
    ensure!(!pairs.is_empty(), Contract, "refusing to write an empty pair set");
    let mut ck = Checkpoint::new(PAIRS_TAG);
    ck.push("cond", Tensor::from_rows(&pairs.iter().map(|p| p.cond.clone()).collect::<Vec<_>>())?);
    ck.push("target", Tensor::from_rows(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?);
    ck.push("gap", Tensor::matrix(pairs.len(), 1, pairs.iter().map(|p| p.gap).collect())?);
    ck.save(path)
}

pub fn load_pairs(path: &Path) -> Result<Vec<CascadePair>> {
    let ck = Checkpoint::load_tagged(path, PAIRS_TAG)?;
    let (c, t, g) = (ck.get("cond")?, ck.get("target")?, ck.get("gap")?);
    if c.rows() != t.rows() || c.rows() != g.rows() || c.cols() != t.cols() {
        return Err(Error::Format("pair set tensors disagree in shape".into()));
    }
    (0..c.rows())
        .map(|r| {
            let gap = g.at(r, 0);
            if gap.is_nan() || gap <= 0.0 {
                return Err(Error::Format(format!("pair {r} has non-positive gap {gap}")));
            }
            Ok(CascadePair {
                cond: c.row_vec(r),
                target: t.row_vec(r),
                gap,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CurationStats {
    pub attempted: usize,
    pub kept: usize,
    /// Column ranges `[start, start + len)` shared by each attempted pair
    /// (in-painting curation only).
    pub segments: Vec<(usize, usize)>,
}

/// Orders each `(a, b)` pair by score and keeps strictly different ones.
fn orient(a: &Tensor<f64>, b: &Tensor<f64>, score: &dyn Fn(&Tensor<f64>) -> Result<Vec<f64>>) -> Result<Vec<CascadePair>> {
    let (sa, sb) = (score(a)?, score(b)?);
    let mut out = Vec::new();
    for r in 0..a.rows() {
        if sb[r] > sa[r] {
            out.push(CascadePair {
                cond: a.row_vec(r),
                target: b.row_vec(r),
                gap: sb[r] - sa[r],
            });
        } else if sa[r] > sb[r] {
            out.push(CascadePair {
                cond: b.row_vec(r),
                target: a.row_vec(r),
                gap: sa[r] - sb[r],
            });
        }
    }
    Ok(out)
}

/// Draws `n` candidate pairs from an unconditional foundation and keeps the
/// strictly ordered ones, oriented by `score` (higher becomes the target).
pub fn curate_pairs<R: Rng + ?Sized>(
    foundation: &DiffusionModel<f64>,
    score: &dyn Fn(&Tensor<f64>) -> Result<Vec<f64>>,
    kind: Curation,
    n: usize,
    sampler: &Sampler,
    rng: &mut R,
) -> Result<(Vec<CascadePair>, CurationStats)> {
    ensure!(foundation.cond_dim == 0, Config, "curation draws from an unconditional foundation");
    ensure!(n >= 1, Contract, "curation needs at least one pair");
    let d = foundation.data_dim;
    let mut stats = CurationStats {
        attempted: n,
        ..Default::default()
    };
    let (a, b) = match kind {
        Curation::InpaintSubset => {
            let a = foundation.sample(n, None, sampler, rng)?;
            let lo = ((d as f64) * 0.25).ceil().max(1.0) as usize;
            let hi = (((d as f64) * 0.5).floor() as usize).max(lo);
            let mut mask = vec![false; n * d];
            for r in 0..n {
                let len = rng.random_range(lo..=hi).min(d);
                let start = rng.random_range(0..=d - len);
                for c in start..start + len {
                    mask[r * d + c] = true;
                }
                stats.segments.push((start, len));
            }
            let b = foundation.inpaint_sample(&ConditionMask::new(mask, a.clone())?, None, sampler, rng)?;
            (a, b)
        }
        Curation::SharedLatent { t_share } => {
            let steps = foundation.steps();
            let ts = t_share.unwrap_or(steps / 2).clamp(1, steps);
            let mut z = Tensor::randn(&[n, d], 1.0, rng);
            for t in (ts + 1..=steps).rev() {
                z = foundation.ddpm_step(&z, t, None, rng)?;
            }
            let finish = |mut x: Tensor<f64>, rng: &mut R| -> Result<Tensor<f64>> {
                for t in (1..=ts).rev() {
                    x = foundation.ddpm_step(&x, t, None, rng)?;
                }
                Ok(x)
            };
            let a = finish(z.clone(), rng)?;
            let b = finish(z, rng)?;
            (a, b)
        }
    };
    let pairs = orient(&a, &b, score)?;
    stats.kept = pairs.len();
    Ok((pairs, stats))
}

/// Conditional up-sampler over the foundation's sample space.
#[derive(Clone, Debug)]
pub struct CascadeDmc {
    /// Condition is the full flattened lower-reward sample.
    pub model: DiffusionModel<f64>,
    pub curation: Curation,
    pub pass_limit: usize,
    /// Training batches that dropped the condition; always zero.
    pub dropped_conditions: usize,
}

impl CascadeDmc {
    /// Warm start: the foundation's weights with zero-initialized condition
    /// inputs, so outputs match the foundation until training.
    pub fn warm_start(foundation: &DiffusionModel<f64>, curation: Curation, pass_limit: usize) -> Result<Self> {
        ensure!(foundation.cond_dim == 0, Config, "cascades warm-start from an unconditional foundation");
        ensure!(pass_limit >= 1, Config, "pass limit must be positive");
        let d = foundation.data_dim;
        let mut model = foundation.clone();
        model.denoiser = foundation.denoiser.with_extra_cond(d);
        model.cond_dim = d;
        Ok(Self {
            model,
            curation,
            pass_limit,
            dropped_conditions: 0,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.model.data_dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(CASCADE_TAG);
        self.model.put_checkpoint(&mut ck, "cascade/");
        let (code, ts) = match self.curation {
            Curation::InpaintSubset => (0.0, 0.0),
            Curation::SharedLatent { t_share } => (1.0, t_share.map_or(-1.0, |t| t as f64)),
        };
        ck.push("cascade/settings", Tensor::row(&[code, ts, self.pass_limit as f64]));
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_tagged(path, CASCADE_TAG)?;
        let model = DiffusionModel::from_checkpoint(&ck, "cascade/")?;
        let s = ck.get("cascade/settings")?.data().to_vec();
        if s.len() != 3 {
            return Err(Error::Format("malformed cascade settings".into()));
        }
        let curation = match s[0] as u32 {
            0 => Curation::InpaintSubset,
            1 => Curation::SharedLatent {
                t_share: (s[1] >= 0.0).then_some(s[1] as usize),
            },
            _ => return Err(Error::Format("unknown curation code".into())),
        };
        Ok(Self {
            model,
            curation,
            pass_limit: s[2] as usize,
            dropped_conditions: 0,
        })
    }
}

/// Warm-starts from `foundation` and fits the denoising loss on the pair
/// targets given their conditions, with the condition always present.
/// Returns the cascade and its training losses.
pub fn train_cascade<R: Rng + ?Sized>(
    foundation: &DiffusionModel<f64>,
    pairs: &[CascadePair],
    cfg: &CascadeConfig,
    rng: &mut R,
) -> Result<(CascadeDmc, Vec<f64>)> {
    ensure!(!pairs.is_empty(), Contract, "cascade training needs pairs");
    let mut cascade = CascadeDmc::warm_start(foundation, cfg.curation, cfg.pass_limit)?;
    let targets = Tensor::from_rows(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>())?;
    let conds = Tensor::from_rows(&pairs.iter().map(|p| p.cond.clone()).collect::<Vec<_>>())?;
    let mut opt = AdamState::default();
    let losses = cascade.model.fit(&targets, Some(&conds), &cfg.fit, &mut opt, None, rng)?;
    Ok((cascade, losses))
}

/// Output of [`upsample`].
#[derive(Clone, Debug)]
pub struct Upsampled {
    pub samples: Tensor<f64>,
    pub passes: usize,
    pub warning: Option<String>,
}

/// Feeds samples through the cascade `passes` times, each output becoming
/// the next condition.
pub fn upsample<R: Rng + ?Sized>(
    cascade: &CascadeDmc,
    cond: &Tensor<f64>,
    passes: usize,
    sampler: &Sampler,
    rng: &mut R,
) -> Result<Upsampled> {
    ensure!(passes >= 1, Contract, "up-sampling needs at least one pass");
    ensure!(cond.cols() == cascade.data_dim(), Contract, "condition has {} columns, expected {}", cond.cols(), cascade.data_dim());
    let mut x = cond.clone();
    for _ in 0..passes {
        x = cascade.model.sample(x.rows(), Some(&x), sampler, rng)?;
    }
    let warning = (passes > 2).then(|| format!("{passes} up-sampling passes: outputs grow noisier beyond 2 passes"));
    Ok(Upsampled {
        samples: x,
        passes,
        warning,
    })
}

/// Scores of held-out conditions against their up-sampled outputs after a
/// given number of passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PassStats {
    pub passes: usize,
    pub cond_mean: f64,
    pub out_mean: f64,
    /// Unbiased variance of the output scores.
    pub out_var: f64,
    /// Paired t statistic of `out - cond`.
    pub t: f64,
    /// One-sided p-value for `mean(out - cond) > 0`.
    pub p: f64,
}

/// Sample mean and unbiased variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// One-sided paired t-test that `after` exceeds `before` on average.
/// Returns `(t, p)`.
pub fn paired_t_greater(after: &[f64], before: &[f64]) -> Result<(f64, f64)> {
    ensure!(after.len() == before.len() && after.len() >= 2, Contract, "paired test needs two or more matched pairs");
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let (m, var) = mean_var(&d);
    let se = (var / d.len() as f64).sqrt();
    if se == 0.0 {
        let p = if m > 0.0 { 0.0 } else { 1.0 };
        return Ok((if m > 0.0 { f64::INFINITY } else { 0.0 }, p));
    }
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

/// Up-samples `cond` for every pass count in `1..=max_passes`, each from the
/// same seed, and compares output scores with the conditions' scores.
pub fn evaluate_cascade(
    cascade: &CascadeDmc,
    cond: &Tensor<f64>,
    score: &dyn Fn(&Tensor<f64>) -> Result<Vec<f64>>,
    max_passes: usize,
    sampler: &Sampler,
    seed: u64,
) -> Result<Vec<PassStats>> {
    ensure!(max_passes >= 1, Contract, "evaluation needs at least one pass");
    let before = score(cond)?;
    let (cond_mean, _) = mean_var(&before);
    (1..=max_passes)
        .map(|passes| {
            let out = upsample(cascade, cond, passes, sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let after = score(&out.samples)?;
            let (out_mean, out_var) = mean_var(&after);
            let (t, p) = paired_t_greater(&after, &before)?;
            Ok(PassStats {
                passes,
                cond_mean,
                out_mean,
                out_var,
                t,
                p,
            })
        })
        .collect()
}
