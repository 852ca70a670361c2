use crate::dmc::ContextWindow;
use crate::envs::Bump;
use crate::error::{ensure, Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::qvalue::QFunction;

/// Scores clean samples `z_0`, optionally given their conditions.
pub trait SampleReward {
    /// One reward per row.
    fn reward(&self, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> Result<Vec<f64>>;

    /// Differentiable rewards as an `[n, 1]` column. Rewards without a
    /// gradient path report a configuration error.
    fn reward_var<'t>(
        &self,
        _tape: &'t Tape<f64>,
        _x: Var<'t, f64>,
        _cond: Option<&Tensor<f64>>,
    ) -> Result<Var<'t, f64>> {
        Err(Error::Config("this reward is not differentiable in its sample".into()))
    }
}

/// Closure reward without a gradient path.
pub struct FnReward<F>(pub F);

impl<F> SampleReward for FnReward<F>
where
    F: Fn(&Tensor<f64>, Option<&Tensor<f64>>) -> Vec<f64>,
{
    fn reward(&self, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> Result<Vec<f64>> {
        Ok((self.0)(x, cond))
    }
}

/// Gaussian bump over 2-D samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BumpReward(pub Bump);

impl SampleReward for BumpReward {
    fn reward(&self, x: &Tensor<f64>, _cond: Option<&Tensor<f64>>) -> Result<Vec<f64>> {
        ensure!(x.cols() == 2, Contract, "bump reward scores 2-D samples, got {} columns", x.cols());
        Ok((0..x.rows()).map(|r| self.0.eval([x.at(r, 0), x.at(r, 1)])).collect())
    }

    fn reward_var<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>, _cond: Option<&Tensor<f64>>) -> Result<Var<'t, f64>> {
        ensure!(x.cols() == 2, Contract, "bump reward scores 2-D samples, got {} columns", x.cols());
        let c = tape.constant(Tensor::row(&[-self.0.center[0], -self.0.center[1]]));
        let w = self.0.width;
        Ok(x.add_row(c).square().sum_cols().scale(-1.0 / (2.0 * w * w)).exp())
    }
}

/// How Q reads a generated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QLayout {
    /// Samples are action chunks; the state is the newest slot of the
    /// encoded context window passed as the condition. Only the first
    /// action is scored.
    PolicyChunk { window: usize, obs_dim: usize, act_dim: usize },
    /// Samples are interleaved plans scored by the (discounted) sum of Q over
    /// their first `steps` pairs.
    Plan {
        horizon: usize,
        obs_dim: usize,
        act_dim: usize,
        steps: usize,
        discount: Option<f64>,
    },
}

/// Q-based reward over generated samples. Actions are clipped to `[-1, 1]`
/// before scoring, so Q is never queried outside the action box.
pub struct QReward<'a> {
    pub q: &'a QFunction,
    pub layout: QLayout,
    /// Policy layout only: score `Q(s, a) - V(s)`, so rewards compare across
    /// conditions. Gradients in the action are unchanged.
    pub value_baseline: bool,
}

impl<'a> QReward<'a> {
    pub fn new(q: &'a QFunction, layout: QLayout) -> Result<Self> {
        let (o, a) = match layout {
            QLayout::PolicyChunk { obs_dim, act_dim, .. } | QLayout::Plan { obs_dim, act_dim, .. } => {
                (obs_dim, act_dim)
            }
        };
        ensure!(
            o == q.obs_dim && a == q.act_dim,
            Config,
            "Q takes ({}, {}) but the sample layout has ({o}, {a})",
            q.obs_dim,
            q.act_dim
        );
        Ok(Self {
            q,
            layout,
            value_baseline: false,
        })
    }

    pub fn with_value_baseline(mut self) -> Self {
        self.value_baseline = true;
        self
    }

    fn latest_obs(&self, cond: Option<&Tensor<f64>>, window: usize, obs_dim: usize) -> Result<Tensor<f64>> {
        let c = cond.ok_or_else(|| Error::Contract("policy rewards need the context condition".into()))?;
        let w = ContextWindow::slot_width(obs_dim);
        ensure!(c.cols() == window * w, Contract, "condition has {} columns, expected {}", c.cols(), window * w);
        Ok(c.slice_cols((window - 1) * w + 1, obs_dim))
    }
}

impl SampleReward for QReward<'_> {
    fn reward(&self, x: &Tensor<f64>, cond: Option<&Tensor<f64>>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.reward_var(&tape, tape.constant(x.clone()), cond)?.value().into_data())
    }

    fn reward_var<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>, cond: Option<&Tensor<f64>>) -> Result<Var<'t, f64>> {
        match self.layout {
            QLayout::PolicyChunk { window, obs_dim, act_dim } => {
                ensure!(x.cols() >= act_dim, Contract, "sample narrower than one action");
                let s = self.latest_obs(cond, window, obs_dim)?;
                let act = x.slice_cols(0, act_dim).clamp(-1.0, 1.0);
                let q = self.q.q_var(tape, tape.constant(s.clone()), act)?;
                if self.value_baseline {
                    let v = Tensor::matrix(s.rows(), 1, self.q.v_values(&s)?)?;
                    Ok(q.sub(tape.constant(v)))
                } else {
                    Ok(q)
                }
            }
            QLayout::Plan {
                horizon,
                obs_dim,
                act_dim,
                steps,
                discount,
            } => {
                let stride = obs_dim + act_dim;
                ensure!(
                    x.cols() == horizon * stride + obs_dim,
                    Contract,
                    "plan has {} columns, expected {}",
                    x.cols(),
                    horizon * stride + obs_dim
                );
                let steps = steps.clamp(1, horizon);
                let g = discount.unwrap_or(1.0);
                let mut total: Option<Var<'t, f64>> = None;
                for k in 0..steps {
                    let obs = x.slice_cols(k * stride, obs_dim);
                    let act = x.slice_cols(k * stride + obs_dim, act_dim).clamp(-1.0, 1.0);
                    let q = self.q.q_var(tape, obs, act)?.scale(g.powi(k as i32));
                    total = Some(match total {
                        Some(t) => t.add(q),
                        None => q,
                    });
                }
                Ok(total.expect("at least one scored step"))
            }
        }
    }
}
