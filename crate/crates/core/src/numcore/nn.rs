//! Fully-connected networks with an optional sinusoidal time input and an
//! optional condition input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::tape::{Grads, Param, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Smooth hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Softplus,
    Tanh,
}

impl Activation {
    fn apply<'t, S: Scalar>(self, x: Var<'t, S>) -> Var<'t, S> {
        match self {
            Activation::Silu => x.silu(),
            Activation::Softplus => x.softplus(),
            Activation::Tanh => x.tanh(),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Softplus => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Shape of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    /// Width of the main input (the sample being denoised, or features).
    pub input_dim: usize,
    /// Width of the condition vector appended after the time embedding.
    pub cond_dim: usize,
    /// Sinusoidal embedding width for the step input; 0 disables it.
    pub time_embed_dim: usize,
    /// Largest accepted step value.
    pub time_max: f64,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            cond_dim: 0,
            time_embed_dim: 0,
            time_max: 0.0,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::default(),
        }
    }

    pub fn with_time(mut self, embed_dim: usize, time_max: f64) -> Self {
        self.time_embed_dim = embed_dim;
        self.time_max = time_max;
        self
    }

    pub fn with_cond(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    /// Width of the first layer's input: `input + time embedding + condition`.
    pub fn first_width(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.cond_dim
    }
}

/// Affine layer `y = x W + b`, optionally with a low-rank adapter.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub lora: Option<LoraAdapter<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(Tensor::randn(&[fan_in, fan_out], std, rng)),
            bias: Param::new(Tensor::zeros(&[1, fan_out])),
            lora: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Var<'t, S> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let mut y = x.matmul(w).add_row(b);
        if let Some(ad) = &self.lora {
            y = y.add(ad.forward(tape, x));
        }
        y
    }
}

/// Multi-layer perceptron `[x, emb(t), cond] -> hidden... -> output`.
#[derive(Clone, Debug)]
pub struct Mlp<S> {
    config: MlpConfig,
    layers: Vec<Linear<S>>,
}

/// Sinusoidal features of step values. Steps are rescaled so `time_max`
/// maps to 1000 before applying the usual `10000^{-i/half}` frequencies.
pub fn time_embedding<S: Scalar>(t: &[S], rows: usize, dim: usize, time_max: f64) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[rows, dim]);
    let scale = if time_max > 0.0 { 1000.0 / time_max } else { 1.0 };
    for r in 0..rows {
        let tv = if t.len() == 1 { t[0] } else { t[r] }.to_f64_lossy() * scale;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.set(r, i, S::of((tv * freq).sin()));
            out.set(r, half + i, S::of((tv * freq).cos()));
        }
    }
    out
}

impl<S: Scalar> Mlp<S> {
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Self {
        let mut widths = vec![config.first_width()];
        widths.extend(&config.hidden);
        widths.push(config.output_dim);
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { config, layers }
    }

    pub(crate) fn from_parts(config: MlpConfig, layers: Vec<Linear<S>>) -> Result<Self> {
        let mut expect = config.first_width();
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in() != expect {
                return Err(Error::shape(
                    format!("layer {i}"),
                    format!("expected fan-in {expect}, got {}", l.fan_in()),
                ));
            }
            expect = l.fan_out();
        }
        if expect != config.output_dim {
            return Err(Error::shape("output layer", "width disagrees with config"));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<S>] {
        &mut self.layers
    }

    /// Forward pass on the tape.
    ///
    /// `t` holds one step value per row, or a single value broadcast to every
    /// row; it is required iff the network has a time embedding.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        x: Var<'t, S>,
        t: Option<&[S]>,
        cond: Option<Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let cfg = &self.config;
        let rows = x.rows();
        if x.cols() != cfg.input_dim {
            return Err(Error::shape(
                "layer 0 input",
                format!("expected {} features, got {}", cfg.input_dim, x.cols()),
            ));
        }
        let mut parts = vec![x];
        if cfg.time_embed_dim > 0 {
            let t = t.ok_or_else(|| Error::Contract("network needs a step input".into()))?;
            if t.len() != 1 && t.len() != rows {
                return Err(Error::shape("layer 0 time input", format!("{} steps for {rows} rows", t.len())));
            }
            if let Some(bad) = t.iter().find(|v| {
                let v = v.to_f64_lossy();
                !(0.0..=cfg.time_max).contains(&v)
            }) {
                return Err(Error::Contract(format!(
                    "step {bad} outside [0, {}]",
                    cfg.time_max
                )));
            }
            parts.push(tape.constant(time_embedding(t, rows, cfg.time_embed_dim, cfg.time_max)));
        }
        match (cfg.cond_dim, cond) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::shape("layer 0 condition", "network takes no condition")),
            (_, None) => return Err(Error::Contract("network needs a condition input".into())),
            (d, Some(c)) => {
                if c.cols() != d || c.rows() != rows {
                    return Err(Error::shape(
                        "layer 0 condition",
                        format!("expected [{rows}, {d}], got {:?}", c.shape()),
                    ));
                }
                parts.push(c);
            }
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i != last {
                h = cfg.activation.apply(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn eval(&self, x: &Tensor<S>, t: Option<&[S]>, cond: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        Ok(self.forward(&tape, xv, t, cv)?.value())
    }

    /// Freezes (or unfreezes) every base weight and bias; adapters stay trainable.
    pub fn set_base_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            l.weight.frozen = frozen;
            l.bias.frozen = frozen;
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Copy with `extra` zero-initialized condition inputs appended after the
    /// existing condition, so outputs are unchanged until those rows train.
    pub fn with_extra_cond(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.config.cond_dim += extra;
        let first = &mut out.layers[0];
        let (fi, fo) = (first.fan_in(), first.fan_out());
        let mut data = first.weight.value.data().to_vec();
        data.extend(std::iter::repeat_n(S::zero(), extra * fo));
        first.weight.value = Tensor::matrix(fi + extra, fo, data).expect("shape");
        first.weight.grad = Tensor::zeros(&[fi + extra, fo]);
        out
    }
}

/// Anything with parameters an optimizer can update.
pub trait Trainable<S: Scalar> {
    fn params(&self) -> Vec<&Param<S>>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    fn trainable_params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.params_mut().into_iter().filter(|p| !p.frozen).collect()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn accumulate(&mut self, grads: &Grads<S>) {
        for p in self.params_mut() {
            p.accumulate(grads);
        }
    }

    /// L2 norm of the accumulated gradients of non-frozen parameters.
    fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.grad.sq_norm().to_f64_lossy())
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the bit patterns of every parameter value.
    fn fingerprint(&self) -> u64 {
        fingerprint(self.params().into_iter().map(|p| &p.value))
    }
}

pub(crate) fn fingerprint<'a, S: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<S>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_f64_lossy().to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

impl<S: Scalar> Trainable<S> for Mlp<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(ad) = &l.lora {
                out.push(&ad.down);
                out.push(&ad.up);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(ad) = &mut l.lora {
                out.push(&mut ad.down);
                out.push(&mut ad.up);
            }
        }
        out
    }
}
