//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"DMCK" | version: u32 | tag: [u8; 4] | layer count: u32 | tensor count: u32`
//! followed by, per tensor, `name length: u32 | name | rank: u32 | dims: u64 * rank | f64 data`.
//! Adapter tensors are stored under the `adapter/` prefix.

use std::path::Path;

use super::binio::{ByteReader, ByteWriter};
use super::lora::LoraAdapter;
use super::nn::{Activation, Linear, Mlp, MlpConfig};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAPTER_PREFIX: &str = "adapter/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: [u8; 4],
    pub layer_count: u32,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(tag: [u8; 4]) -> Self {
        Self {
            tag,
            layer_count: 0,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&self.tag);
        w.u32(self.layer_count);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.string(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let layer_count = r.u32()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
            let data = r.f64s(len)?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            tag,
            layer_count,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the header tag.
    pub fn load_tagged(path: &Path, tag: [u8; 4]) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.tag != tag {
            return Err(Error::Format(format!(
                "checkpoint tag {:?} where {:?} was expected",
                String::from_utf8_lossy(&ck.tag),
                String::from_utf8_lossy(&tag)
            )));
        }
        Ok(ck)
    }

    /// Appends a network's tensors under `prefix`.
    pub fn put_mlp<S: Scalar>(&mut self, prefix: &str, net: &Mlp<S>) {
        let c = net.config();
        let mut meta = vec![
            c.input_dim as f64,
            c.cond_dim as f64,
            c.time_embed_dim as f64,
            c.time_max,
            c.output_dim as f64,
            c.activation.code() as f64,
            c.hidden.len() as f64,
        ];
        meta.extend(c.hidden.iter().map(|&h| h as f64));
        self.push(format!("{prefix}meta"), Tensor::row(&meta));
        for (i, l) in net.layers().iter().enumerate() {
            self.push(format!("{prefix}layer{i}/weight"), l.weight.value.cast());
            self.push(format!("{prefix}layer{i}/bias"), l.bias.value.cast());
            if let Some(ad) = &l.lora {
                let base = format!("{ADAPTER_PREFIX}{prefix}layer{i}");
                self.push(format!("{base}/down"), ad.down.value.cast());
                self.push(format!("{base}/up"), ad.up.value.cast());
                self.push(format!("{base}/alpha"), Tensor::scalar(ad.alpha.to_f64_lossy()));
            }
        }
        self.layer_count += net.layers().len() as u32;
    }

    /// Rebuilds a network stored under `prefix`. Networks with adapters come
    /// back with their base frozen.
    pub fn get_mlp<S: Scalar>(&self, prefix: &str) -> Result<Mlp<S>> {
        let meta = self.get(&format!("{prefix}meta"))?.data().to_vec();
        let bad = || Error::Format(format!("malformed network metadata under `{prefix}`"));
        if meta.len() < 7 {
            return Err(bad());
        }
        let nh = meta[6] as usize;
        if meta.len() != 7 + nh {
            return Err(bad());
        }
        let config = MlpConfig {
            input_dim: meta[0] as usize,
            cond_dim: meta[1] as usize,
            time_embed_dim: meta[2] as usize,
            time_max: meta[3],
            output_dim: meta[4] as usize,
            activation: Activation::from_code(meta[5] as u32).ok_or_else(bad)?,
            hidden: meta[7..].iter().map(|&h| h as usize).collect(),
        };
        let mut layers = Vec::new();
        let mut any_adapter = false;
        for i in 0..=nh {
            let weight = self.get(&format!("{prefix}layer{i}/weight"))?.cast::<S>();
            let bias = self.get(&format!("{prefix}layer{i}/bias"))?.cast::<S>();
            let mut layer = Linear {
                weight: super::Param::new(weight),
                bias: super::Param::new(bias),
                lora: None,
            };
            let base = format!("{ADAPTER_PREFIX}{prefix}layer{i}");
            if self.has(&format!("{base}/down")) {
                any_adapter = true;
                layer.lora = Some(LoraAdapter::from_parts(
                    self.get(&format!("{base}/down"))?.cast(),
                    self.get(&format!("{base}/up"))?.cast(),
                    S::of(self.get(&format!("{base}/alpha"))?.item()),
                )?);
            }
            layers.push(layer);
        }
        let mut net = Mlp::from_parts(config, layers)?;
        if any_adapter {
            net.set_base_frozen(true);
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::nn::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn network_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::new(MlpConfig::new(2, &[7, 3], 2).with_time(8, 16.0).with_cond(3), &mut rng)
            .lora_attach(2, 4.0, &mut rng)
            .unwrap();
        let mut ck = Checkpoint::new(*b"TEST");
        ck.put_mlp("net/", &net);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let net2: Mlp<f64> = back.get_mlp("net/").unwrap();
        assert_eq!(net2.fingerprint(), net.fingerprint());
        assert!(ck.tensors.iter().any(|(n, _)| n.starts_with("adapter/net/layer0")));
        assert!(net2.layers()[0].weight.frozen);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut ck = Checkpoint::new(*b"TEST");
        ck.push("x", Tensor::row(&[1.0, 2.0]));
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }
}
