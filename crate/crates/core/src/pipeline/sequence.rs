//! Sequential alignment: `{RL -> DPO -> SFT} x passes`, each stage run in
//! evaluation blocks until its return plateaus, with divergence monitoring,
//! collapse detection and rollback.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collapse::{detect_collapse, CollapseDetector, EvalPoint, Verdict};
use super::eval::EvalStats;
use super::metrics::{MetricsLog, MetricsRecord};
use super::schedule::{converged, Stage, StageSchedule};
use super::task::AlignTask;
use crate::align::{
    divergence_check, dpo_update, likelihood_threshold, make_preference_pairs, qvpg_update, reinforce_update,
    sft_round, DivergenceBaseline, DivergenceBudget, DpoConfig, RlAlignConfig, RlMethod, SampleReward, SftConfig,
};
use crate::diffusion::{DiffusionModel, Sampler};
use crate::error::{ensure, Error, Result};
use crate::numcore::{AdamState, Tape, Tensor, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceSettings {
    /// Data quantile defining the likelihood budget.
    pub quantile: f64,
    /// Overrides the calibrated budget when set.
    pub delta: Option<f64>,
    /// Coherency floor as a fraction of the foundation's coherency.
    pub coherency_ratio: Option<f64>,
    pub samples: usize,
    pub mc_draws: usize,
}

impl Default for DivergenceSettings {
    fn default() -> Self {
        Self {
            quantile: 0.10,
            delta: None,
            coherency_ratio: None,
            samples: 256,
            mc_draws: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub schedule: StageSchedule,
    pub rl: RlAlignConfig,
    pub dpo: DpoConfig,
    pub sft: SftConfig,
    pub collapse: CollapseDetector,
    pub divergence: DivergenceSettings,
    /// Low-rank adapter rank; 0 fine-tunes every weight.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Updates between evaluations.
    pub eval_every: usize,
    /// Update budget per stage visit.
    pub max_updates: usize,
    /// Share of the RL budget spent probing each of REINFORCE and QV-PG.
    pub probe_fraction: f64,
    /// Probe both RL estimators and keep the better; otherwise use `rl.method`.
    pub arbitrate: bool,
    /// Candidates per condition when building preference pairs.
    pub dpo_group: usize,
    /// Share of each group forming winners (and losers).
    pub dpo_pair_fraction: f64,
    /// Conditions (or unconditional groups) per pair regeneration.
    pub dpo_conditions: usize,
    /// Collapse rollbacks (and, separately, divergence overshoots) tolerated
    /// per stage visit before it ends.
    pub max_rollbacks: usize,
    pub sampler: Sampler,
    /// Stage-boundary checkpoints go here when set.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Recorded in every metrics row.
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            schedule: StageSchedule::default(),
            rl: RlAlignConfig::default(),
            dpo: DpoConfig::default(),
            sft: SftConfig::default(),
            collapse: CollapseDetector::default(),
            divergence: DivergenceSettings::default(),
            lora_rank: 4,
            lora_alpha: 4.0,
            eval_every: 20,
            max_updates: 200,
            probe_fraction: 0.1,
            arbitrate: true,
            dpo_group: 8,
            dpo_pair_fraction: 0.25,
            dpo_conditions: 16,
            max_rollbacks: 2,
            sampler: Sampler::Ddpm,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.schedule.validate()?;
        self.rl.validate(steps)?;
        self.dpo.validate()?;
        self.sft.validate()?;
        self.collapse.validate()?;
        ensure!(self.eval_every >= 1 && self.max_updates >= 1, Config, "stage budgets must be positive");
        ensure!(
            self.probe_fraction > 0.0 && self.probe_fraction <= 0.5,
            Config,
            "probe fraction {} outside (0, 0.5]",
            self.probe_fraction
        );
        ensure!(self.dpo_group >= 2 && self.dpo_conditions >= 1, Config, "DPO groups need two candidates");
        ensure!(
            (0.0..1.0).contains(&self.divergence.quantile) && self.divergence.samples >= 1 && self.divergence.mc_draws >= 1,
            Config,
            "invalid divergence settings"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEnd {
    Converged,
    Budget,
    Diverged,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub pass: usize,
    pub method: String,
    pub updates: usize,
    pub evals: usize,
    pub rollbacks: usize,
    pub end: StageEnd,
    pub final_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RollbackEvent {
    pub step: u64,
    pub stage: Stage,
    pub pass: usize,
    pub verdict: String,
    /// Fingerprint of the snapshot when it was taken.
    pub snapshot_fingerprint: u64,
    /// Fingerprint of the model right after restoring.
    pub restored_fingerprint: u64,
    pub lr_after: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    /// Best model seen that satisfied the divergence budget.
    pub model: DiffusionModel<f64>,
    pub initial: EvalStats,
    pub best: EvalStats,
    pub stages: Vec<StageReport>,
    pub rollbacks: Vec<RollbackEvent>,
    pub warnings: Vec<String>,
    pub steps: u64,
    pub baseline: Option<DivergenceBaseline>,
    pub budget: Option<DivergenceBudget>,
}

#[derive(Clone, Debug)]
struct Snapshot {
    model: DiffusionModel<f64>,
    opt: AdamState<f64>,
    stats: EvalStats,
    fingerprint: u64,
}

impl Snapshot {
    fn take(model: &DiffusionModel<f64>, opt: &AdamState<f64>, stats: &EvalStats) -> Self {
        Self {
            model: model.clone(),
            opt: opt.clone(),
            stats: stats.clone(),
            fingerprint: model.fingerprint(),
        }
    }
}

/// Summary of one block of updates.
#[derive(Clone, Copy, Debug, Default)]
struct BlockStats {
    loss: f64,
    grad_norm: f64,
    mean_reward: Option<f64>,
    /// Value judged by the spike check.
    objective: f64,
}

struct Runner<'a> {
    foundation: &'a DiffusionModel<f64>,
    task: &'a mut dyn AlignTask,
    cfg: &'a SequenceConfig,
    log: &'a mut MetricsLog,
    rng: &'a mut ChaCha8Rng,
    step: u64,
    history: Vec<EvalPoint>,
    best: Snapshot,
    /// Evaluation of the model as it currently stands.
    current: EvalStats,
    baseline: DivergenceBaseline,
    budget: DivergenceBudget,
    sft_threshold: Option<f64>,
    warnings: Vec<String>,
    rollbacks: Vec<RollbackEvent>,
    /// Update counter fed to truncation ramps.
    rl_updates: usize,
}

fn rec(step: u64, stage: &str, pass: usize, event: &str, method: &str, seed: u64) -> MetricsRecord {
    MetricsRecord {
        step,
        stage: stage.into(),
        pass,
        event: event.into(),
        method: method.into(),
        seed,
        ..Default::default()
    }
}

fn reward_is_differentiable(reward: &dyn SampleReward, model: &DiffusionModel<f64>, cond: Option<&Tensor<f64>>) -> bool {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[cond.map_or(1, |c| c.rows()), model.data_dim]));
    reward.reward_var(&tape, x, cond).is_ok()
}

impl Runner<'_> {
    fn divergence(&mut self, model: &DiffusionModel<f64>, coherency: Option<f64>) -> Result<crate::align::DivergenceReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xd1ce);
        let n = self.cfg.divergence.samples;
        let cond = self.task.conditions(n, &mut rng);
        let x = model.sample(n, cond.as_ref(), &self.cfg.sampler, &mut rng)?;
        divergence_check(
            self.foundation,
            &x,
            cond.as_ref(),
            &self.baseline,
            &self.budget,
            coherency,
            self.cfg.divergence.mc_draws,
            &mut rng,
        )
    }

    /// One block of `n` updates. Non-finite objectives surface as NaN so the
    /// collapse detector can act on them.
    fn block(
        &mut self,
        model: &mut DiffusionModel<f64>,
        opt: &mut AdamState<f64>,
        stage: Stage,
        method: RlMethod,
        n: usize,
        lr: f64,
    ) -> Result<BlockStats> {
        match self.block_inner(model, opt, stage, method, n, lr) {
            Err(Error::Numeric(msg)) => {
                self.warnings.push(format!("step {}: {msg}", self.step));
                Ok(BlockStats {
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    mean_reward: None,
                    objective: f64::NAN,
                })
            }
            other => other,
        }
    }

    fn block_inner(
        &mut self,
        model: &mut DiffusionModel<f64>,
        opt: &mut AdamState<f64>,
        stage: Stage,
        method: RlMethod,
        n: usize,
        lr: f64,
    ) -> Result<BlockStats> {
        let task = &*self.task;
        let reward = task.reward()?;
        let mut out = BlockStats::default();
        match stage {
            Stage::Rl => {
                let mut cfg = self.cfg.rl.clone();
                cfg.lr = lr;
                let (mut loss, mut gn, mut mr) = (0.0, 0.0, 0.0);
                for _ in 0..n {
                    let cond = task.conditions(cfg.samples, self.rng);
                    let s = match method {
                        RlMethod::Reinforce => reinforce_update(
                            model,
                            self.foundation,
                            reward.as_ref(),
                            cond.as_ref(),
                            &cfg,
                            self.rl_updates,
                            opt,
                            self.rng,
                        )?,
                        RlMethod::QvPg => qvpg_update(
                            model,
                            self.foundation,
                            reward.as_ref(),
                            cond.as_ref(),
                            &cfg,
                            self.rl_updates,
                            opt,
                            self.rng,
                        )?,
                    };
                    self.rl_updates += 1;
                    loss += s.loss;
                    gn += s.grad_norm;
                    mr += s.mean_reward;
                }
                let k = n as f64;
                out.loss = loss / k;
                out.grad_norm = gn / k;
                out.mean_reward = Some(mr / k);
                // The REINFORCE surrogate has no meaningful scale; both
                // estimators are watched through their gradient norms.
                out.objective = out.grad_norm;
            }
            Stage::Dpo => {
                let g = self.cfg.dpo_group;
                let m = self.cfg.dpo_conditions;
                let base = task.conditions(m, self.rng);
                let cond = base.as_ref().map(|c| {
                    let idx: Vec<usize> = (0..m * g).map(|i| i / g).collect();
                    c.select_rows(&idx)
                });
                let cands = model.sample(m * g, cond.as_ref(), &self.cfg.sampler, self.rng)?;
                let rewards = reward.reward(&cands, cond.as_ref())?;
                ensure!(rewards.iter().all(|r| r.is_finite()), Numeric, "non-finite rewards in preference data");
                out.mean_reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
                let pairs = make_preference_pairs(&cands, &rewards, g, cond.as_ref(), self.cfg.dpo_pair_fraction)?;
                if pairs.is_empty() {
                    self.warnings.push(format!("step {}: no strictly ordered preference pairs", self.step));
                    return Ok(out);
                }
                let mut cfg = self.cfg.dpo.clone();
                cfg.lr = lr;
                let (mut loss, mut gn) = (0.0, 0.0);
                for _ in 0..n {
                    let s = dpo_update(model, self.foundation, &pairs, &cfg, opt, self.rng)?;
                    loss += s.loss;
                    gn += s.grad_norm;
                }
                out.loss = loss / n as f64;
                out.grad_norm = gn / n as f64;
                out.objective = out.loss;
            }
            Stage::Sft => {
                let threshold = match self.sft_threshold {
                    Some(t) => t,
                    None => {
                        let (data, dc) = task.likelihood_data();
                        let t = likelihood_threshold(
                            self.foundation,
                            &data,
                            dc.as_ref(),
                            self.cfg.sft.threshold_quantile,
                            self.cfg.sft.mc_draws,
                            self.rng,
                        )?;
                        self.sft_threshold = Some(t);
                        t
                    }
                };
                let mut cfg = self.cfg.sft.clone();
                cfg.lr = lr;
                cfg.updates = n;
                let cond = task.conditions(cfg.samples, self.rng);
                let s = sft_round(model, self.foundation, cond.as_ref(), reward.as_ref(), &cfg, threshold, opt, self.rng)?;
                if let Some(w) = s.warning {
                    self.warnings.push(format!("step {}: {w}", self.step));
                }
                out.loss = s.loss;
                out.objective = s.loss;
                out.grad_norm = f64::NAN;
            }
        }
        Ok(out)
    }

    fn stage_lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Rl => self.cfg.rl.lr,
            Stage::Dpo => self.cfg.dpo.lr,
            Stage::Sft => self.cfg.sft.lr,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn log_eval(
        &mut self,
        stage: Stage,
        pass: usize,
        event: &str,
        method: &str,
        stats: &EvalStats,
        gap: Option<f64>,
        block: Option<&BlockStats>,
        lr: f64,
    ) -> Result<()> {
        let mut r = rec(self.step, stage.name(), pass, event, method, self.cfg.seed);
        r.eval_mean = Some(stats.mean);
        r.eval_std = Some(stats.std);
        r.coherency = stats.coherency;
        r.divergence_gap = gap;
        r.lr = Some(lr);
        if let Some(b) = block {
            r.loss = Some(b.loss).filter(|v| !v.is_nan() || b.objective.is_nan());
            r.grad_norm = Some(b.grad_norm).filter(|v| !v.is_nan() || b.objective.is_nan());
            r.mean_reward = b.mean_reward;
        }
        self.log.push(r)
    }

    fn event(&mut self, stage: Stage, pass: usize, event: &str, method: &str, lr: Option<f64>) -> Result<()> {
        let mut r = rec(self.step, stage.name(), pass, event, method, self.cfg.seed);
        r.lr = lr;
        self.log.push(r)
    }

    fn after_eval(&mut self, model: &DiffusionModel<f64>) -> Result<()> {
        let w = self.task.after_eval(model, self.step, self.rng)?;
        self.warnings.extend(w.into_iter().map(|w| format!("step {}: {w}", self.step)));
        Ok(())
    }

    /// Evaluates, checks divergence, logs, and records the point; returns
    /// the stats, the divergence verdict and the collapse verdict.
    fn checkpoint_eval(
        &mut self,
        model: &DiffusionModel<f64>,
        stage: Stage,
        pass: usize,
        event: &str,
        method: &str,
        block: &BlockStats,
        lr: f64,
    ) -> Result<(EvalStats, bool, Verdict)> {
        let stats = if block.objective.is_nan() {
            EvalStats {
                mean: f64::NAN,
                std: f64::NAN,
                ..Default::default()
            }
        } else {
            self.task.evaluate(model)?
        };
        let (gap, pass_div) = if stats.mean.is_finite() {
            let d = self.divergence(model, stats.coherency)?;
            (Some(d.gap), d.pass)
        } else {
            (None, false)
        };
        self.log_eval(stage, pass, event, method, &stats, gap, Some(block), lr)?;
        self.history.push(EvalPoint {
            ret: stats.mean,
            objective: Some(block.objective),
        });
        let verdict = detect_collapse(&self.history, &self.cfg.collapse);
        Ok((stats, pass_div, verdict))
    }

    fn save_boundary(&mut self, model: &DiffusionModel<f64>, pass: usize, stage: Stage) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("pass{pass}-{}.ck", stage.name())))?;
            self.best.model.save(&dir.join("best.ck"))?;
        }
        Ok(())
    }

    /// Probes both RL estimators from the same start and keeps the better.
    fn arbitrate(
        &mut self,
        model: &mut DiffusionModel<f64>,
        pass: usize,
        lr: f64,
        probe: usize,
    ) -> Result<(RlMethod, AdamState<f64>, Option<(EvalStats, bool)>)> {
        let start = model.clone();
        let mut results = Vec::new();
        for method in [RlMethod::Reinforce, RlMethod::QvPg] {
            let mut m = start.clone();
            let mut opt = AdamState::default();
            let b = self.block(&mut m, &mut opt, Stage::Rl, method, probe, lr)?;
            self.step += probe as u64;
            let stats = if b.objective.is_nan() {
                None
            } else {
                Some(self.task.evaluate(&m)?)
            };
            let pass_div = match &stats {
                Some(s) => {
                    let d = self.divergence(&m, s.coherency)?;
                    let mut r = rec(self.step, Stage::Rl.name(), pass, "probe", method_name(method), self.cfg.seed);
                    r.eval_mean = Some(s.mean);
                    r.eval_std = Some(s.std);
                    r.coherency = s.coherency;
                    r.divergence_gap = Some(d.gap);
                    r.loss = Some(b.loss);
                    r.grad_norm = Some(b.grad_norm);
                    r.mean_reward = b.mean_reward;
                    r.lr = Some(lr);
                    self.log.push(r)?;
                    d.pass
                }
                None => false,
            };
            results.push((method, m, opt, stats, pass_div));
        }
        let score = |r: &(RlMethod, DiffusionModel<f64>, AdamState<f64>, Option<EvalStats>, bool)| match (&r.3, r.4) {
            (Some(s), true) => s.mean,
            (Some(s), false) => s.mean - 1e12,
            _ => f64::NEG_INFINITY,
        };
        let pick = if score(&results[1]) > score(&results[0]) { 1 } else { 0 };
        let (method, m, opt, stats, pass_div) = results.swap_remove(pick);
        *model = m;
        Ok((method, opt, stats.map(|s| (s, pass_div))))
    }

    fn run_stage(&mut self, model: &mut DiffusionModel<f64>, stage: Stage, pass: usize, differentiable: bool) -> Result<StageReport> {
        // Spikes are judged against this stage visit's own objectives.
        for p in &mut self.history {
            p.objective = None;
        }
        let mut lr = self.stage_lr(stage);
        let mut opt = AdamState::default();
        let mut method = self.cfg.rl.method;
        let mut updates = 0;
        let mut evals = 0;
        let mut rollbacks = 0;
        let mut overshoots = 0;
        let mut stage_hist: Vec<f64> = vec![self.history.last().map_or(f64::NAN, |p| p.ret)];
        let mut last_good = Snapshot::take(model, &opt, &self.current);
        let method_label = |stage: Stage, m: RlMethod| match stage {
            Stage::Rl => method_name(m).to_string(),
            s => s.name().to_string(),
        };
        if stage == Stage::Rl && self.cfg.arbitrate && differentiable {
            let probe = ((self.cfg.probe_fraction * self.cfg.max_updates as f64).round() as usize).max(1);
            let start = last_good.clone();
            let (m, o, probed) = self.arbitrate(model, pass, lr, probe)?;
            method = m;
            opt = o;
            updates += 2 * probe;
            match probed {
                Some((stats, true)) => {
                    stage_hist.push(stats.mean);
                    last_good = Snapshot::take(model, &opt, &stats);
                    self.current = stats;
                    if last_good.stats.mean > self.best.stats.mean {
                        self.best = last_good.clone();
                    }
                }
                // Neither probe stayed admissible: keep the method, drop its steps.
                _ => {
                    *model = start.model;
                    opt = AdamState::default();
                }
            }
            self.event(stage, pass, "method", method_name(method), Some(lr))?;
        } else if stage == Stage::Rl && !differentiable {
            method = RlMethod::Reinforce;
        }
        let label = method_label(stage, method);
        self.event(stage, pass, "stage-start", &label, Some(lr))?;
        let mut end = StageEnd::Budget;
        while updates < self.cfg.max_updates {
            let n = self.cfg.eval_every.min(self.cfg.max_updates - updates);
            let b = self.block(model, &mut opt, stage, method, n, lr)?;
            updates += n;
            self.step += n as u64;
            evals += 1;
            let (stats, div_ok, verdict) = self.checkpoint_eval(model, stage, pass, "eval", &label, &b, lr)?;
            if verdict.is_collapse() {
                rollbacks += 1;
                *model = self.best.model.clone();
                opt = self.best.opt.clone();
                self.current = self.best.stats.clone();
                last_good = self.best.clone();
                lr *= 0.5;
                let restored = model.fingerprint();
                self.rollbacks.push(RollbackEvent {
                    step: self.step,
                    stage,
                    pass,
                    verdict: verdict.describe(),
                    snapshot_fingerprint: self.best.fingerprint,
                    restored_fingerprint: restored,
                    lr_after: lr,
                });
                self.warnings
                    .push(format!("step {}: collapse ({}); rolled back, lr -> {lr:e}", self.step, verdict.describe()));
                self.event(stage, pass, "rollback", &label, Some(lr))?;
                // The restored model stands in for the collapsed evaluation.
                self.history.pop();
                self.history.push(EvalPoint {
                    ret: self.best.stats.mean,
                    objective: None,
                });
                if rollbacks > self.cfg.max_rollbacks {
                    self.event(stage, pass, "skip", &label, Some(lr))?;
                    end = StageEnd::Skipped;
                    break;
                }
                continue;
            }
            if !div_ok {
                *model = last_good.model.clone();
                opt = last_good.opt.clone();
                lr *= 0.5;
                overshoots += 1;
                self.warnings.push(format!(
                    "step {}: {} left the divergence budget; restored the last admissible weights, lr -> {lr:e}",
                    self.step,
                    stage.name()
                ));
                self.event(stage, pass, "diverged", &label, Some(lr))?;
                self.history.pop();
                self.history.push(EvalPoint {
                    ret: last_good.stats.mean,
                    objective: None,
                });
                if overshoots > self.cfg.max_rollbacks {
                    end = StageEnd::Diverged;
                    break;
                }
                continue;
            }
            last_good = Snapshot::take(model, &opt, &stats);
            self.current = stats.clone();
            if stats.mean > self.best.stats.mean {
                self.best = last_good.clone();
            }
            self.after_eval(model)?;
            stage_hist.push(stats.mean);
            if converged(&stage_hist, self.cfg.schedule.window, self.cfg.schedule.min_improvement) {
                self.event(stage, pass, "converged", &label, Some(lr))?;
                end = StageEnd::Converged;
                break;
            }
        }
        self.save_boundary(model, pass, stage)?;
        self.event(stage, pass, "stage-end", &label, Some(lr))?;
        Ok(StageReport {
            stage,
            pass,
            method: label,
            updates,
            evals,
            rollbacks,
            end,
            final_lr: lr,
        })
    }
}

pub fn method_name(m: RlMethod) -> &'static str {
    match m {
        RlMethod::Reinforce => "reinforce",
        RlMethod::QvPg => "qv-pg",
    }
}

/// Aligns `foundation` on `task` through the configured stage schedule.
/// With zero passes the foundation is returned untouched and nothing is
/// logged.
pub fn run_sequence(
    foundation: &DiffusionModel<f64>,
    task: &mut dyn AlignTask,
    cfg: &SequenceConfig,
    log: &mut MetricsLog,
    rng: &mut ChaCha8Rng,
) -> Result<SequenceOutcome> {
    cfg.validate(foundation.steps())?;
    // Prerequisites fail before any training.
    let probe_cond = task.conditions(2, &mut ChaCha8Rng::seed_from_u64(0));
    let differentiable = {
        let reward = task.reward()?;
        reward_is_differentiable(reward.as_ref(), foundation, probe_cond.as_ref())
    };
    if cfg.schedule.passes == 0 {
        return Ok(SequenceOutcome {
            model: foundation.clone(),
            initial: EvalStats::default(),
            best: EvalStats::default(),
            stages: Vec::new(),
            rollbacks: Vec::new(),
            warnings: Vec::new(),
            steps: 0,
            baseline: None,
            budget: None,
        });
    }
    let (data, dcond) = task.likelihood_data();
    let baseline = DivergenceBaseline::measure(
        foundation,
        &data,
        dcond.as_ref(),
        cfg.divergence.quantile,
        cfg.divergence.mc_draws,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e),
    )?;
    let initial = task.evaluate(foundation)?;
    let mut budget = baseline.budget(
        cfg.divergence
            .coherency_ratio
            .and_then(|r| initial.coherency.map(|c| r * c)),
    );
    if let Some(d) = cfg.divergence.delta {
        budget.delta = d;
    }
    let mut model = foundation.clone();
    if cfg.lora_rank > 0 {
        model.denoiser = model.denoiser.lora_attach_capped(cfg.lora_rank, cfg.lora_alpha, rng)?;
    }
    let opt0 = AdamState::default();
    let mut runner = Runner {
        foundation,
        task,
        cfg,
        log,
        rng,
        step: 0,
        history: Vec::new(),
        best: Snapshot::take(&model, &opt0, &initial),
        current: initial.clone(),
        baseline,
        budget,
        sft_threshold: None,
        warnings: Vec::new(),
        rollbacks: Vec::new(),
        rl_updates: 0,
    };
    let first = cfg.schedule.stages[0];
    let gap0 = runner.divergence(&model, initial.coherency)?.gap;
    runner.log_eval(first, 0, "start", "foundation", &initial, Some(gap0), None, runner.stage_lr(first))?;
    runner.history.push(EvalPoint {
        ret: initial.mean,
        objective: None,
    });
    let mut stages = Vec::new();
    for pass in 1..=cfg.schedule.passes {
        for &stage in &cfg.schedule.stages {
            stages.push(runner.run_stage(&mut model, stage, pass, differentiable)?);
        }
    }
    Ok(SequenceOutcome {
        model: runner.best.model.clone(),
        initial,
        best: runner.best.stats.clone(),
        stages,
        rollbacks: runner.rollbacks,
        warnings: runner.warnings,
        steps: runner.step,
        baseline: Some(runner.baseline),
        budget: Some(runner.budget),
    })
}
