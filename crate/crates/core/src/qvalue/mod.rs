//! Implicit Q-learning of the evaluation function and trajectory scoring.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{OfflineDataset, Transition};
use crate::error::{ensure, Error, Result};
use crate::numcore::{AdamState, Checkpoint, Mlp, MlpConfig, Tape, Tensor, Trainable, Var};

pub const Q_CHECKPOINT_TAG: [u8; 4] = *b"IQLQ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqlConfig {
    pub expectile: f64,
    pub discount: f64,
    /// Soft target update rate.
    pub target_rate: f64,
    /// Target networks are updated every this many steps.
    pub target_every: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the end of `steps`, as a fraction of `lr` (linear decay).
    pub lr_final_ratio: f64,
    pub hidden: Vec<usize>,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            expectile: 0.7,
            discount: 0.99,
            target_rate: 0.005,
            target_every: 1,
            steps: 5000,
            batch_size: 256,
            lr: 3e-4,
            lr_final_ratio: 1.0,
            hidden: vec![128, 128, 128],
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.expectile > 0.0 && self.expectile < 1.0,
            Config,
            "expectile {} outside (0, 1)",
            self.expectile
        );
        ensure!((0.0..=1.0).contains(&self.discount), Config, "discount outside [0, 1]");
        ensure!(
            self.target_rate > 0.0 && self.target_rate <= 1.0,
            Config,
            "target rate outside (0, 1]"
        );
        ensure!(self.target_every >= 1, Config, "target update interval must be positive");
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.lr > 0.0, Config, "learning rate must be positive");
        ensure!(
            self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0,
            Config,
            "final learning-rate ratio outside (0, 1]"
        );
        Ok(())
    }
}

/// Transitions as dense tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub obs: Tensor<f64>,
    pub act: Tensor<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Tensor<f64>,
    pub done: Vec<bool>,
}

impl TransitionBatch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let mut obs = Vec::new();
        let mut act = Vec::new();
        let mut reward = Vec::new();
        let mut next_obs = Vec::new();
        let mut done = Vec::new();
        for t in items {
            obs.extend_from_slice(&t.obs);
            act.push(t.action);
            reward.push(t.reward);
            next_obs.extend_from_slice(&t.next_obs);
            done.push(t.done);
        }
        let n = reward.len();
        ensure!(n > 0, Contract, "no transitions");
        Ok(Self {
            obs: Tensor::matrix(n, 2, obs)?,
            act: Tensor::matrix(n, 1, act)?,
            reward,
            next_obs: Tensor::matrix(n, 2, next_obs)?,
            done,
        })
    }

    pub fn from_dataset(ds: &OfflineDataset) -> Result<Self> {
        Self::from_transitions(ds.transitions())
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            obs: self.obs.select_rows(idx),
            act: self.act.select_rows(idx),
            reward: idx.iter().map(|&i| self.reward[i]).collect(),
            next_obs: self.next_obs.select_rows(idx),
            done: idx.iter().map(|&i| self.done[i]).collect(),
        }
    }
}

/// Q and V networks plus the frozen target copy of Q.
#[derive(Clone, Debug)]
pub struct QFunction {
    pub q: Mlp<f64>,
    pub v: Mlp<f64>,
    pub q_target: Mlp<f64>,
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// Per-row scores of `(observation, action)` pairs.
pub trait PairScorer {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn score(&self, obs: &Tensor<f64>, act: &Tensor<f64>) -> Result<Vec<f64>>;
}

/// Closure-backed scorer, used to inject fixed values.
pub struct FnScorer<F> {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &[f64]) -> f64> PairScorer for FnScorer<F> {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn score(&self, obs: &Tensor<f64>, act: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok((0..obs.rows()).map(|r| (self.f)(obs.row_slice(r), act.row_slice(r))).collect())
    }
}

impl QFunction {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let q = Mlp::new(MlpConfig::new(obs_dim + act_dim, hidden, 1), rng);
        let v = Mlp::new(MlpConfig::new(obs_dim, hidden, 1), rng);
        Self {
            q_target: q.clone(),
            q,
            v,
            obs_dim,
            act_dim,
        }
    }

    fn check(&self, obs: &Tensor<f64>, act: &Tensor<f64>) -> Result<()> {
        if obs.cols() != self.obs_dim || act.cols() != self.act_dim || obs.rows() != act.rows() {
            return Err(Error::Contract(format!(
                "Q expects [n, {}] observations and [n, {}] actions, got {:?} and {:?}",
                self.obs_dim,
                self.act_dim,
                obs.shape(),
                act.shape()
            )));
        }
        Ok(())
    }

    /// Differentiable `Q(s, a)` of shape `[n, 1]`.
    pub fn q_var<'t>(&self, tape: &'t Tape<f64>, obs: Var<'t, f64>, act: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let x = tape.concat_cols(&[obs, act]);
        self.q.forward(tape, x, None, None)
    }

    pub fn q_values(&self, obs: &Tensor<f64>, act: &Tensor<f64>) -> Result<Vec<f64>> {
        self.check(obs, act)?;
        Ok(self.q.eval(&Tensor::hstack(&[obs, act]), None, None)?.into_data())
    }

    pub fn v_values(&self, obs: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok(self.v.eval(obs, None, None)?.into_data())
    }

    pub fn pair_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.q_values(&Tensor::row(s), &Tensor::row(a))?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(Q_CHECKPOINT_TAG);
        ck.put_mlp("q/", &self.q);
        ck.put_mlp("v/", &self.v);
        ck.put_mlp("q_target/", &self.q_target);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_tagged(path, Q_CHECKPOINT_TAG)?;
        let q: Mlp<f64> = ck.get_mlp("q/")?;
        let v: Mlp<f64> = ck.get_mlp("v/")?;
        let q_target = ck.get_mlp("q_target/")?;
        let obs_dim = v.config().input_dim;
        let act_dim = q
            .config()
            .input_dim
            .checked_sub(obs_dim)
            .ok_or_else(|| Error::Format("Q input narrower than V input".into()))?;
        Ok(Self {
            q,
            v,
            q_target,
            obs_dim,
            act_dim,
        })
    }
}

impl PairScorer for QFunction {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn score(&self, obs: &Tensor<f64>, act: &Tensor<f64>) -> Result<Vec<f64>> {
        self.q_values(obs, act)
    }
}

/// Sum over pairs of `discount^k * Q(s_k, a_k)`; `discount = None` means undiscounted.
pub fn traj_value<Q: PairScorer + ?Sized>(q: &Q, pairs: &[(Vec<f64>, Vec<f64>)], discount: Option<f64>) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut obs = Vec::new();
    let mut act = Vec::new();
    for (s, a) in pairs {
        ensure!(
            s.len() == q.obs_dim() && a.len() == q.act_dim(),
            Contract,
            "pair dims ({}, {}) do not match Q ({}, {})",
            s.len(),
            a.len(),
            q.obs_dim(),
            q.act_dim()
        );
        obs.extend_from_slice(s);
        act.extend_from_slice(a);
    }
    let n = pairs.len();
    let vals = q.score(&Tensor::matrix(n, q.obs_dim(), obs)?, &Tensor::matrix(n, q.act_dim(), act)?)?;
    let g = discount.unwrap_or(1.0);
    Ok(vals.iter().enumerate().map(|(k, v)| g.powi(k as i32) * v).sum())
}

/// Asymmetric squared loss `mean(|tau - 1(u < 0)| u^2)`.
pub fn expectile_loss<'t>(u: Var<'t, f64>, tau: f64) -> Var<'t, f64> {
    let w = u.value().map(|v| if v < 0.0 { 1.0 - tau } else { tau });
    u.square().mul(u.tape().constant(w)).mean()
}

/// Loss values of the last update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IqlStats {
    pub q_loss: f64,
    pub v_loss: f64,
}

/// Stateful trainer so training can continue on new data with the same
/// optimizer moments.
#[derive(Clone, Debug)]
pub struct IqlTrainer {
    pub config: IqlConfig,
    pub qf: QFunction,
    opt_q: AdamState<f64>,
    opt_v: AdamState<f64>,
    steps_done: usize,
    target_updates: usize,
}

impl IqlTrainer {
    pub fn new(config: IqlConfig, qf: QFunction) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            qf,
            opt_q: AdamState::default(),
            opt_v: AdamState::default(),
            steps_done: 0,
            target_updates: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn target_updates(&self) -> usize {
        self.target_updates
    }

    /// One gradient step on V (expectile of the target Q) and Q (TD to V).
    pub fn update(&mut self, batch: &TransitionBatch) -> Result<IqlStats> {
        let n = batch.len();
        let cfg = &self.config;
        let sa = Tensor::hstack(&[&batch.obs, &batch.act]);

        let q_tgt = self.qf.q_target.eval(&sa, None, None)?;
        let tape = Tape::new();
        let v = self.qf.v.forward(&tape, tape.constant(batch.obs.clone()), None, None)?;
        let v_loss = expectile_loss(tape.constant(q_tgt).sub(v), cfg.expectile);
        let v_loss_val = v_loss.item();
        let g = tape.backward(v_loss)?;
        self.qf.v.accumulate(&g);

        let v_next = self.qf.v.eval(&batch.next_obs, None, None)?;
        let target: Vec<f64> = (0..n)
            .map(|i| batch.reward[i] + if batch.done[i] { 0.0 } else { cfg.discount * v_next.data()[i] })
            .collect();
        let tape = Tape::new();
        let q = self.qf.q.forward(&tape, tape.constant(sa), None, None)?;
        let q_loss = q.sub(tape.constant(Tensor::matrix(n, 1, target)?)).square().mean();
        let q_loss_val = q_loss.item();
        if !q_loss_val.is_finite() || !v_loss_val.is_finite() {
            self.qf.q.zero_grad();
            self.qf.v.zero_grad();
            return Err(Error::Numeric(format!("IQL loss not finite (q {q_loss_val}, v {v_loss_val})")));
        }
        let g = tape.backward(q_loss)?;
        self.qf.q.accumulate(&g);

        let frac = (self.steps_done as f64 / cfg.steps.max(1) as f64).min(1.0);
        let lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_ratio) * frac);
        self.opt_v.step_model(&mut self.qf.v, lr)?;
        self.opt_q.step_model(&mut self.qf.q, lr)?;
        self.steps_done += 1;
        if self.steps_done % cfg.target_every == 0 {
            let rho = cfg.target_rate;
            for (t, s) in self.qf.q_target.params_mut().into_iter().zip(self.qf.q.params()) {
                t.value = t.value.zip_map(&s.value, |a, b| (1.0 - rho) * a + rho * b);
            }
            self.target_updates += 1;
        }
        Ok(IqlStats {
            q_loss: q_loss_val,
            v_loss: v_loss_val,
        })
    }

    /// `steps` updates on uniformly drawn minibatches.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &TransitionBatch, steps: usize, rng: &mut R) -> Result<IqlStats> {
        ensure!(!data.is_empty(), Contract, "IQL needs a nonempty dataset");
        let mut stats = IqlStats::default();
        let bs = self.config.batch_size.min(data.len());
        for _ in 0..steps {
            let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..data.len())).collect();
            stats = self.update(&data.select(&idx))?;
        }
        Ok(stats)
    }
}

/// Trains a fresh Q function on `data` for `config.steps` updates.
pub fn train_iql<R: Rng + ?Sized>(data: &TransitionBatch, config: &IqlConfig, rng: &mut R) -> Result<QFunction> {
    ensure!(!data.is_empty(), Contract, "IQL needs a nonempty dataset");
    let qf = QFunction::new(data.obs.cols(), data.act.cols(), &config.hidden, rng);
    let mut trainer = IqlTrainer::new(config.clone(), qf)?;
    trainer.train(data, config.steps, rng)?;
    Ok(trainer.qf)
}
