//! Low-rank adapters on linear layers.
//!
//! Row-vector convention: a layer computes `x W` with `W: [in, out]`, so the
//! adapter adds `(alpha / rank) * x A B` with `A: [in, rank]` (down) and
//! `B: [rank, out]` (up). `B` starts at zero, leaving outputs unchanged.

use rand::Rng;

use super::nn::{Linear, Mlp};
use super::tape::{Param, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the down-projection initializer.
pub const LORA_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct LoraAdapter<S> {
    pub down: Param<S>,
    pub up: Param<S>,
    pub alpha: S,
    rank: usize,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rank: usize, alpha: S, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > fan_in.min(fan_out) {
            return Err(Error::Contract(format!(
                "adapter rank {rank} must lie in [1, {}] for a {fan_in}x{fan_out} layer",
                fan_in.min(fan_out)
            )));
        }
        Ok(Self {
            down: Param::new(Tensor::randn(&[fan_in, rank], LORA_INIT_STD, rng)),
            up: Param::new(Tensor::zeros(&[rank, fan_out])),
            alpha,
            rank,
        })
    }

    pub(crate) fn from_parts(down: Tensor<S>, up: Tensor<S>, alpha: S) -> Result<Self> {
        if down.cols() != up.rows() {
            return Err(Error::shape("adapter", "down/up rank mismatch"));
        }
        let rank = up.rows();
        Ok(Self {
            down: Param::new(down),
            up: Param::new(up),
            alpha,
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> S {
        self.alpha / S::of(self.rank as f64)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Var<'t, S> {
        let a = tape.param(&self.down);
        let b = tape.param(&self.up);
        x.matmul(a).matmul(b).scale(self.scaling())
    }

    /// `(alpha / rank) * A B`, the dense weight delta.
    pub fn delta(&self) -> Tensor<S> {
        self.down.value.matmul(&self.up.value).scale(self.scaling())
    }
}

impl<S: Scalar> Linear<S> {
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rank: usize, alpha: S, rng: &mut R) -> Result<()> {
        self.lora = Some(LoraAdapter::new(self.fan_in(), self.fan_out(), rank, alpha, rng)?);
        Ok(())
    }

    /// Folds the adapter into the base weight.
    pub fn merge_lora(&mut self) {
        if let Some(ad) = self.lora.take() {
            self.weight.value = self.weight.value.add(&ad.delta());
        }
    }
}

impl<S: Scalar> Mlp<S> {
    /// Copy with a rank-`rank` adapter on every linear layer and the base
    /// weights frozen.
    pub fn lora_attach<R: Rng + ?Sized>(&self, rank: usize, alpha: S, rng: &mut R) -> Result<Self> {
        let mut out = self.clone();
        for (i, layer) in out.layers_mut().iter_mut().enumerate() {
            layer.attach_lora(rank, alpha, rng).map_err(|e| match e {
                Error::Contract(m) => Error::Contract(format!("layer {i}: {m}")),
                other => other,
            })?;
        }
        out.set_base_frozen(true);
        Ok(out)
    }

    /// Like [`Mlp::lora_attach`], but each layer's rank is capped at its
    /// smaller dimension, so narrow output layers still get an adapter.
    pub fn lora_attach_capped<R: Rng + ?Sized>(&self, rank: usize, alpha: S, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Contract("adapter rank must be positive".into()));
        }
        let mut out = self.clone();
        for layer in out.layers_mut() {
            let r = rank.min(layer.fan_in()).min(layer.fan_out());
            layer.attach_lora(r, alpha, rng)?;
        }
        out.set_base_frozen(true);
        Ok(out)
    }

    /// Plain network with every adapter folded into its base weights; the
    /// base is unfrozen.
    pub fn lora_merge(&self) -> Self {
        let mut out = self.clone();
        for layer in out.layers_mut() {
            layer.merge_lora();
        }
        out.set_base_frozen(false);
        out
    }
}
