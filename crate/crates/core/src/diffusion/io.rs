use std::path::Path;

use super::model::{DiffusionModel, Parameterization};
use super::schedule::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, Mlp, Scalar, Tensor};

/// Header tag of standalone diffusion-model checkpoints.
pub const DIFFUSION_TAG: [u8; 4] = *b"DIFM";

fn param_code(p: Parameterization) -> f64 {
    match p {
        Parameterization::Epsilon => 0.0,
        Parameterization::Score => 1.0,
        Parameterization::Flow => 2.0,
    }
}

fn kind_code(k: ScheduleKind) -> f64 {
    match k {
        ScheduleKind::Linear => 0.0,
        ScheduleKind::Cosine => 1.0,
    }
}

impl<S: Scalar> DiffusionModel<S, Mlp<S>> {
    /// Appends the network, betas and model settings under `prefix`.
    pub fn put_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_mlp(&format!("{prefix}denoiser/"), &self.denoiser);
        let betas: Vec<f64> = self.schedule.betas().iter().map(|b| b.to_f64_lossy()).collect();
        ck.push(format!("{prefix}betas"), Tensor::row(&betas));
        ck.push(
            format!("{prefix}info"),
            Tensor::row(&[
                param_code(self.parameterization),
                self.data_dim as f64,
                self.cond_dim as f64,
                kind_code(self.schedule.kind()),
            ]),
        );
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let info = ck.get(&format!("{prefix}info"))?.data().to_vec();
        let bad = || Error::Format(format!("malformed diffusion model under `{prefix}`"));
        if info.len() != 4 {
            return Err(bad());
        }
        let parameterization = match info[0] as u32 {
            0 => Parameterization::Epsilon,
            1 => Parameterization::Score,
            2 => Parameterization::Flow,
            _ => return Err(bad()),
        };
        let kind = match info[3] as u32 {
            0 => ScheduleKind::Linear,
            1 => ScheduleKind::Cosine,
            _ => return Err(bad()),
        };
        let betas = ck.get(&format!("{prefix}betas"))?.data().to_vec();
        let schedule = NoiseSchedule::build(kind, betas)?;
        let denoiser: Mlp<S> = ck.get_mlp(&format!("{prefix}denoiser/"))?;
        let (data_dim, cond_dim) = (info[1] as usize, info[2] as usize);
        let c = denoiser.config();
        if c.input_dim != data_dim || c.output_dim != data_dim || c.cond_dim != cond_dim {
            return Err(Error::Format(format!("denoiser under `{prefix}` does not match the stored dimensions")));
        }
        Ok(Self::new(denoiser, schedule, parameterization, data_dim, cond_dim))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(DIFFUSION_TAG);
        self.put_checkpoint(&mut ck, "");
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_tagged(path, DIFFUSION_TAG)?, "")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 12).unwrap();
        let m = DiffusionModel::<f64>::with_mlp(3, 2, &[8], 8, sched, Parameterization::Score, &mut rng);
        let mut ck = Checkpoint::new(DIFFUSION_TAG);
        m.put_checkpoint(&mut ck, "m/");
        let back = DiffusionModel::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "m/").unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back.schedule, m.schedule);
        assert_eq!(back.parameterization, Parameterization::Score);
        assert_eq!((back.data_dim, back.cond_dim), (3, 2));
    }
}
