//! Run-directory commands behind the `dmc` binary.
//!
//! A run directory holds `config.toml` (the effective configuration),
//! `checkpoints/`, `metrics.csv` and `warnings.log`. Every command derives its
//! randomness from `(run.seed, command)` so re-running a command with the same
//! configuration reproduces its artifacts.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{train_planner, train_policy, RunConfig, TaskKind};
use super::eval::{eval_rng, evaluate_policy, EvalStats};
use super::metrics::{read_metrics, MetricsLog};
use super::plots::{curve, curve_csv, curve_svg};
use super::sequence::{run_sequence, SequenceOutcome};
use super::task::{PolicyTask, ToyTask};
use crate::cascade::{curate_pairs, evaluate_cascade, load_pairs, save_pairs, train_cascade, CascadeDmc, PassStats};
use crate::diffusion::DiffusionModel;
use crate::dmc::{PlannerDmc, PolicyDmc};
use crate::envs::{gen_dataset, BehaviorDensity, Nav1DWorld, OfflineDataset, ToyWorld2D};
use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, Tensor};
use crate::qvalue::{train_iql, traj_value, QFunction, TransitionBatch};

const TOY_DATA_TAG: [u8; 4] = *b"TOYD";

/// Randomness stream of each command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Q = 2,
    Foundation = 3,
    Planner = 4,
    Align = 5,
    Cascade = 6,
}

pub fn command_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn warnings(&self) -> PathBuf {
        self.root.join("warnings.log")
    }

    pub fn dataset(&self) -> PathBuf {
        self.checkpoints().join("dataset.nav1d")
    }

    pub fn toy_data(&self) -> PathBuf {
        self.checkpoints().join("toy-data.ck")
    }

    pub fn q(&self) -> PathBuf {
        self.checkpoints().join("q.ck")
    }

    pub fn foundation(&self) -> PathBuf {
        self.checkpoints().join("foundation.ck")
    }

    pub fn planner(&self) -> PathBuf {
        self.checkpoints().join("planner.ck")
    }

    pub fn aligned(&self) -> PathBuf {
        self.checkpoints().join("aligned.ck")
    }

    pub fn pairs(&self) -> PathBuf {
        self.checkpoints().join("pairs.ck")
    }

    pub fn cascade(&self) -> PathBuf {
        self.checkpoints().join("cascade.ck")
    }

    pub fn cascade_report(&self) -> PathBuf {
        self.root.join("cascade.csv")
    }

    pub fn episodes(&self) -> PathBuf {
        self.root.join("episodes.csv")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Creates the layout and writes `cfg` as the run's configuration.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(self.checkpoints())?;
        fs::write(self.config(), cfg.to_toml()?)?;
        fs::OpenOptions::new().create(true).append(true).open(self.warnings())?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let path = self.config();
        if !path.exists() {
            return Err(Error::Config(format!("no config given and none found at {}", path.display())));
        }
        RunConfig::load(&path)
    }

    pub fn append_warnings(&self, lines: &[String]) -> Result<()> {
        if lines.is_empty() {
            return Ok(());
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.warnings())?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {what} at {}; run `{command}` first",
            path.display()
        )))
    }
}

fn world(cfg: &RunConfig) -> Result<Nav1DWorld> {
    Nav1DWorld::new(cfg.nav1d.clone())
}

fn load_dataset(dir: &RunDir) -> Result<OfflineDataset> {
    require(&dir.dataset(), "dataset", "synth-data")?;
    OfflineDataset::read(&dir.dataset())
}

pub fn load_toy_data(dir: &RunDir) -> Result<Tensor<f64>> {
    require(&dir.toy_data(), "toy data", "synth-data")?;
    Ok(Checkpoint::load_tagged(&dir.toy_data(), TOY_DATA_TAG)?.get("data")?.clone())
}

fn load_q(dir: &RunDir) -> Result<QFunction> {
    require(&dir.q(), "Q function", "train-q")?;
    QFunction::load(&dir.q())
}

fn load_model(path: &Path, what: &str, command: &str) -> Result<DiffusionModel<f64>> {
    require(path, what, command)?;
    DiffusionModel::load(path)
}

/// What `synth-data` produced.
#[derive(Clone, Debug, PartialEq)]
pub enum SynthReport {
    Nav1D { episodes: usize, mean_return: f64 },
    Toy { samples: usize },
}

pub fn synth_data(dir: &RunDir, cfg: &RunConfig) -> Result<SynthReport> {
    dir.init(cfg)?;
    let mut rng = command_rng(cfg.run.seed, Stream::Data);
    match cfg.run.task {
        TaskKind::Policy => {
            let ds = gen_dataset(&world(cfg)?, cfg.dataset.coverage, cfg.dataset.episodes, &mut rng)?;
            ds.write(&dir.dataset())?;
            // Round trip guards against writing something unreadable.
            if OfflineDataset::read(&dir.dataset())? != ds {
                return Err(Error::Format("dataset did not survive a write/read round trip".into()));
            }
            Ok(SynthReport::Nav1D {
                episodes: ds.episodes.len(),
                mean_return: ds.mean_return(),
            })
        }
        TaskKind::Toy => {
            let data = ToyWorld2D::new().sample_data(cfg.toy.data_samples, &mut rng);
            let mut ck = Checkpoint::new(TOY_DATA_TAG);
            ck.push("data", data);
            ck.save(&dir.toy_data())?;
            Ok(SynthReport::Toy {
                samples: cfg.toy.data_samples,
            })
        }
    }
}

/// Trains the IQL evaluation function on the run's dataset.
pub fn train_q(dir: &RunDir, cfg: &RunConfig) -> Result<QFunction> {
    if cfg.run.task != TaskKind::Policy {
        return Err(Error::Config("train-q needs the Nav1D policy task".into()));
    }
    dir.init(cfg)?;
    let ds = load_dataset(dir)?;
    let q = train_iql(&TransitionBatch::from_dataset(&ds)?, &cfg.qvalue, &mut command_rng(cfg.run.seed, Stream::Q))?;
    q.save(&dir.q())?;
    Ok(q)
}

/// Which foundation `train-foundation` fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FoundationKind {
    /// The task's own model: the Nav1D policy or the toy-world sampler.
    #[default]
    Task,
    /// Unconditional Nav1D trajectory planner (the cascade's base).
    Planner,
}

/// Fits a foundation and returns its training losses.
pub fn train_foundation(dir: &RunDir, cfg: &RunConfig, kind: FoundationKind) -> Result<Vec<f64>> {
    dir.init(cfg)?;
    match (cfg.run.task, kind) {
        (TaskKind::Policy, FoundationKind::Task) => {
            let ds = load_dataset(dir)?;
            let mut rng = command_rng(cfg.run.seed, Stream::Foundation);
            let mut policy = cfg.policy_model(&mut rng)?;
            let losses = train_policy(&mut policy, &ds, &cfg.foundation.fit, &mut rng)?;
            policy.model.save(&dir.foundation())?;
            Ok(losses)
        }
        (TaskKind::Policy, FoundationKind::Planner) => {
            let ds = load_dataset(dir)?;
            let mut rng = command_rng(cfg.run.seed, Stream::Planner);
            let mut planner = cfg.planner_model(&mut rng)?;
            let losses = train_planner(&mut planner, &ds, &cfg.planner.fit, cfg.planner.p_uncond, &mut rng)?;
            planner.model.save(&dir.planner())?;
            Ok(losses)
        }
        (TaskKind::Toy, FoundationKind::Task) => {
            let data = load_toy_data(dir)?;
            let mut rng = command_rng(cfg.run.seed, Stream::Foundation);
            let mut model = cfg.foundation.build(2, 0, &mut rng)?;
            let mut opt = crate::numcore::AdamState::default();
            let losses = model.fit(&data, None, &cfg.foundation.fit, &mut opt, None, &mut rng)?;
            model.save(&dir.foundation())?;
            Ok(losses)
        }
        (TaskKind::Toy, FoundationKind::Planner) => Err(Error::Config("the toy task has no planner".into())),
    }
}

fn policy_task(dir: &RunDir, cfg: &RunConfig, foundation: &DiffusionModel<f64>) -> Result<PolicyTask> {
    let ds = load_dataset(dir)?;
    let q = load_q(dir)?;
    let template = PolicyDmc::new(foundation.clone(), cfg.policy.window, 2, 1, cfg.policy.chunk)?;
    Ok(PolicyTask::new(ds, q, &template, cfg.eval, cfg.policy.selector, cfg.foundation.sampler)?.with_online(cfg.online, cfg.qvalue.clone()))
}

pub fn toy_task(dir: &RunDir, cfg: &RunConfig) -> Result<ToyTask> {
    let mut task = ToyTask::new(ToyWorld2D::new(), cfg.run.toy_field, load_toy_data(dir)?, cfg.eval.seed_base);
    task.eval_samples = cfg.toy.eval_samples;
    task.sampler = cfg.foundation.sampler;
    Ok(task)
}

/// Runs the sequential alignment. `metrics.csv` is rewritten from scratch,
/// warnings are appended to `warnings.log`, stage-boundary checkpoints go to
/// `checkpoints/` and the best admissible model to `checkpoints/aligned.ck`.
pub fn align(dir: &RunDir, cfg: &RunConfig) -> Result<SequenceOutcome> {
    // Prerequisites before any output is touched.
    let foundation = load_model(&dir.foundation(), "foundation", "train-foundation")?;
    let mut task: Box<dyn super::task::AlignTask> = match cfg.run.task {
        TaskKind::Policy => Box::new(policy_task(dir, cfg, &foundation)?),
        TaskKind::Toy => Box::new(toy_task(dir, cfg)?),
    };
    dir.init(cfg)?;
    let mut seq = cfg.align.clone();
    seq.seed = cfg.run.seed;
    seq.checkpoint_dir = Some(dir.checkpoints());
    let mut log = MetricsLog::create(&dir.metrics())?;
    let out = run_sequence(&foundation, task.as_mut(), &seq, &mut log, &mut command_rng(cfg.run.seed, Stream::Align))?;
    out.model.save(&dir.aligned())?;
    dir.append_warnings(&out.warnings)?;
    Ok(out)
}

/// Q-value of plans, each clamped to the `[-1, 1]` box of the environment
/// first so that extrapolated Q outside the state/action space cannot be
/// exploited.
pub fn plan_scores(planner: &PlannerDmc, q: &QFunction, x: &Tensor<f64>) -> Result<Vec<f64>> {
    let x = x.map(|v| v.clamp(-1.0, 1.0));
    (0..x.rows())
        .map(|r| traj_value(q, &planner.pairs(x.row_slice(r), planner.horizon), None))
        .collect()
}

#[derive(Clone, Debug)]
pub struct CascadeReport {
    pub pairs: usize,
    pub attempted: usize,
    pub final_loss: f64,
    pub passes: Vec<PassStats>,
}

/// Curates pairs from the unconditional foundation (the Nav1D planner or the
/// toy sampler), trains the cascade and evaluates it on held-out foundation
/// samples for 1..=`eval_passes` passes. Existing pair sets are reused.
pub fn cascade(dir: &RunDir, cfg: &RunConfig) -> Result<CascadeReport> {
    let (foundation, score): (DiffusionModel<f64>, Box<dyn Fn(&Tensor<f64>) -> Result<Vec<f64>>>) = match cfg.run.task {
        TaskKind::Policy => {
            let model = load_model(&dir.planner(), "planner foundation", "train-foundation --planner")?;
            let planner = PlannerDmc::new(model.clone(), cfg.planner.horizon, 2, 1)?;
            let q = load_q(dir)?;
            (model, Box::new(move |x: &Tensor<f64>| plan_scores(&planner, &q, x)))
        }
        TaskKind::Toy => {
            let model = load_model(&dir.foundation(), "foundation", "train-foundation")?;
            let task = toy_task(dir, cfg)?;
            (model, Box::new(move |x: &Tensor<f64>| Ok(task.rewards(x))))
        }
    };
    dir.init(cfg)?;
    let cc = &cfg.cascade;
    let mut rng = command_rng(cfg.run.seed, Stream::Cascade);
    let (pairs, attempted) = if dir.pairs().exists() {
        let p = load_pairs(&dir.pairs())?;
        let n = p.len();
        (p, n)
    } else {
        let (p, stats) = curate_pairs(&foundation, score.as_ref(), cc.curation, cc.pairs, &cc.sampler, &mut rng)?;
        if p.is_empty() {
            return Err(Error::Numeric("curation produced no strictly ordered pairs".into()));
        }
        save_pairs(&p, &dir.pairs())?;
        (p, stats.attempted)
    };
    let (casc, losses) = train_cascade(&foundation, &pairs, cc, &mut rng)?;
    casc.save(&dir.cascade())?;
    let held = foundation.sample(cc.held_out, None, &cc.sampler, &mut ChaCha8Rng::seed_from_u64(cfg.eval.seed_base))?;
    let passes = evaluate_cascade(&casc, &held, score.as_ref(), cc.eval_passes, &cc.sampler, cfg.eval.seed_base ^ 0xca5c)?;
    let mut csv = String::from("passes,cond_mean,out_mean,out_var,t,p\n");
    for s in &passes {
        csv.push_str(&format!("{},{:e},{:e},{:e},{:e},{:e}\n", s.passes, s.cond_mean, s.out_mean, s.out_var, s.t, s.p));
    }
    fs::write(dir.cascade_report(), csv)?;
    if cc.eval_passes > 2 {
        dir.append_warnings(&[format!(
            "cascade evaluated up to {} passes: outputs grow noisier beyond 2 passes",
            cc.eval_passes
        )])?;
    }
    Ok(CascadeReport {
        pairs: pairs.len(),
        attempted,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        passes,
    })
}

/// Model evaluated by `eval`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum EvalTarget {
    /// The aligned model when present, else the foundation.
    #[default]
    Latest,
    Foundation,
    Aligned,
    Path(PathBuf),
}

/// Evaluates a model and writes one record per episode seed (per sample for
/// the toy task) to `episodes.csv`.
pub fn eval(dir: &RunDir, cfg: &RunConfig, target: &EvalTarget, seeds: Option<usize>) -> Result<EvalStats> {
    let path = match target {
        EvalTarget::Latest if dir.aligned().exists() => dir.aligned(),
        EvalTarget::Latest | EvalTarget::Foundation => dir.foundation(),
        EvalTarget::Aligned => dir.aligned(),
        EvalTarget::Path(p) => p.clone(),
    };
    let model = load_model(&path, "model", "train-foundation")?;
    let mut ecfg = cfg.eval;
    if let Some(n) = seeds {
        ecfg.episodes = n;
    }
    let (stats, csv) = match cfg.run.task {
        TaskKind::Policy => {
            let ds = load_dataset(dir)?;
            let q = if dir.q().exists() { Some(load_q(dir)?) } else { None };
            let density = BehaviorDensity::fit(&ds)?;
            let policy = PolicyDmc::new(model, cfg.policy.window, 2, 1, cfg.policy.chunk)?;
            let ecfg = ecfg.for_dataset(&ds);
            let stats = evaluate_policy(
                &policy,
                &ds.world,
                &ecfg,
                &cfg.policy.selector,
                q.as_ref().map(|q| q as &dyn crate::qvalue::PairScorer),
                &cfg.foundation.sampler,
                Some(&density),
            )?;
            let mut csv = String::from("seed,start,return\n");
            for e in &stats.episodes {
                csv.push_str(&format!("{},{:e},{:e}\n", e.seed, e.start, e.ret));
            }
            (stats, csv)
        }
        TaskKind::Toy => {
            let task = toy_task(dir, cfg)?;
            let x = model.sample(ecfg.episodes, None, &task.sampler, &mut eval_rng(&ecfg))?;
            let r = task.rewards(&x);
            let inside = (0..x.rows()).filter(|&i| task.world.in_distribution([x.at(i, 0), x.at(i, 1)])).count();
            let stats = EvalStats::from_returns(&r, Some(inside as f64 / x.rows() as f64));
            let mut csv = String::from("seed,x,y,reward\n");
            for (i, ri) in r.iter().enumerate() {
                csv.push_str(&format!("{},{:e},{:e},{:e}\n", ecfg.seed_base + i as u64, x.at(i, 0), x.at(i, 1), ri));
            }
            (stats, csv)
        }
    };
    fs::write(dir.episodes(), csv)?;
    Ok(stats)
}

/// Writes `plots/curve.csv` and, when asked, `plots/curve.svg` from the run's
/// metrics. The online-injection step is marked when injection is enabled.
pub fn export_plots(dir: &RunDir, cfg: &RunConfig, svg: bool) -> Result<Vec<PathBuf>> {
    require(&dir.metrics(), "metrics log", "align")?;
    let records = read_metrics(&dir.metrics())?;
    let points = curve(&records);
    fs::create_dir_all(dir.plots())?;
    let mut written = vec![dir.plots().join("curve.csv")];
    fs::write(&written[0], curve_csv(&points))?;
    if svg {
        let marker = cfg.online.enabled.then_some(cfg.online.activation_step);
        let title = match cfg.run.task {
            TaskKind::Policy => format!("nav1d {:?} (seed {})", cfg.dataset.coverage, cfg.run.seed).to_lowercase(),
            TaskKind::Toy => format!("toy {} (seed {})", cfg.run.toy_field.name(), cfg.run.seed),
        };
        let p = dir.plots().join("curve.svg");
        fs::write(&p, curve_svg(&points, &title, marker))?;
        written.push(p);
    }
    Ok(written)
}

/// Loads a trained cascade of a run.
pub fn load_cascade(dir: &RunDir) -> Result<CascadeDmc> {
    require(&dir.cascade(), "cascade", "cascade")?;
    CascadeDmc::load(&dir.cascade())
}

/// The dataset of a run, for callers that inspect it directly.
pub fn run_dataset(dir: &RunDir) -> Result<OfflineDataset> {
    load_dataset(dir)
}
