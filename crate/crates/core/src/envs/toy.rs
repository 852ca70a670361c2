use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyField {
    Orange,
    Green,
    Blue,
}

impl ToyField {
    pub const ALL: [ToyField; 3] = [ToyField::Orange, ToyField::Green, ToyField::Blue];

    pub fn name(self) -> &'static str {
        match self {
            ToyField::Orange => "orange",
            ToyField::Green => "green",
            ToyField::Blue => "blue",
        }
    }
}

impl std::str::FromStr for ToyField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orange" => Ok(ToyField::Orange),
            "green" => Ok(ToyField::Green),
            "blue" => Ok(ToyField::Blue),
            _ => Err(Error::Config(format!("unknown toy reward field `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: [f64; 2],
    pub width: f64,
}

impl Bump {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let d2 = (p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2);
        (-d2 / (2.0 * self.width * self.width)).exp()
    }
}

/// Mode centers and shared isotropic std of the data mixture.
const MODES: [[f64; 2]; 3] = [[-0.5, -0.4], [0.5, -0.4], [0.0, 0.45]];
const MODE_STD: f64 = 0.15;
/// Mass fraction of the data lying below the likelihood threshold.
pub const THRESHOLD_QUANTILE: f64 = 0.10;

/// Two-dimensional alignment playground: an equal-weight mixture of three
/// Gaussians with three reward bumps. Green and blue sit in the tails of two
/// modes, inside the likelihood threshold; orange sits just past the data hull.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld2D {
    pub modes: Vec<[f64; 2]>,
    pub mode_std: f64,
    pub orange: Bump,
    pub green: Bump,
    pub blue: Bump,
    /// Log-density level containing `1 - THRESHOLD_QUANTILE` of the data.
    pub log_density_threshold: f64,
}

impl Default for ToyWorld2D {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyWorld2D {
    pub fn new() -> Self {
        let s = MODE_STD;
        let mut w = Self {
            modes: MODES.to_vec(),
            mode_std: s,
            green: Bump {
                center: [MODES[0][0] - 1.2 * s, MODES[0][1] - 1.2 * s],
                width: 0.05,
            },
            blue: Bump {
                center: [MODES[2][0], MODES[2][1] + 1.7 * s],
                width: 0.05,
            },
            orange: Bump {
                center: [MODES[1][0] + 3.2 * s, MODES[1][1] + 1.5 * s],
                width: 0.12,
            },
            log_density_threshold: 0.0,
        };
        // Fixed-seed quantile of the log-density over data draws.
        let mut rng = ChaCha8Rng::seed_from_u64(0x70_79);
        let pts = w.sample_data(100_000, &mut rng);
        let mut ld: Vec<f64> = (0..pts.rows())
            .map(|r| w.log_density([pts.at(r, 0), pts.at(r, 1)]))
            .collect();
        ld.sort_by(f64::total_cmp);
        w.log_density_threshold = ld[(THRESHOLD_QUANTILE * ld.len() as f64) as usize];
        w
    }

    pub fn bump(&self, field: ToyField) -> &Bump {
        match field {
            ToyField::Orange => &self.orange,
            ToyField::Green => &self.green,
            ToyField::Blue => &self.blue,
        }
    }

    pub fn reward(&self, field: ToyField, p: [f64; 2]) -> f64 {
        self.bump(field).eval(p)
    }

    pub fn maximizer(&self, field: ToyField) -> [f64; 2] {
        self.bump(field).center
    }

    pub fn density(&self, p: [f64; 2]) -> f64 {
        let v = self.mode_std * self.mode_std;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * v) / self.modes.len() as f64;
        self.modes
            .iter()
            .map(|m| norm * (-((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)) / (2.0 * v)).exp())
            .sum()
    }

    pub fn log_density(&self, p: [f64; 2]) -> f64 {
        self.density(p).ln()
    }

    pub fn in_distribution(&self, p: [f64; 2]) -> bool {
        self.log_density(p) >= self.log_density_threshold
    }

    /// Draws `n` points as an `[n, 2]` tensor.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<f64> {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let m = self.modes[rng.random_range(0..self.modes.len())];
            for c in m {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + self.mode_std * z);
            }
        }
        Tensor::matrix(n, 2, data).expect("consistent shape")
    }

    /// Distance from `p` to its nearest mode, in units of the mode std.
    pub fn mode_distance(&self, p: [f64; 2]) -> f64 {
        self.modes
            .iter()
            .map(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
            / self.mode_std
    }

    /// `x,y,orange,green,blue,log_density` on a `grid x grid` lattice over `[-1, 1]^2`.
    pub fn reward_grid_csv(&self, grid: usize) -> String {
        let mut out = String::from("x,y,orange,green,blue,log_density\n");
        let g = grid.max(2);
        for i in 0..g {
            for j in 0..g {
                let p = [
                    -1.0 + 2.0 * i as f64 / (g - 1) as f64,
                    -1.0 + 2.0 * j as f64 / (g - 1) as f64,
                ];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    p[0],
                    p[1],
                    self.orange.eval(p),
                    self.green.eval(p),
                    self.blue.eval(p),
                    self.log_density(p)
                );
            }
        }
        out
    }
}
