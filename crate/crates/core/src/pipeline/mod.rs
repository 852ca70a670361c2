//! Sequential alignment scheduling, evaluation, online injection, metrics,
//! run configuration and plotting.

pub mod collapse;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod online;
pub mod plots;
pub mod run;
pub mod schedule;
pub mod sequence;
pub mod task;

pub use collapse::{detect_collapse, CollapseDetector, EvalPoint, Verdict};
pub use eval::{episode_start, evaluate_planner, evaluate_policy, evaluate_with, EpisodeRecord, EvalConfig, EvalStats};
pub use metrics::{parse_metrics, read_metrics, MetricsLog, MetricsRecord, METRICS_HEADER};
pub use online::{online_inject, InjectReport, OnlineFinetuneConfig, ReplayBuffer};
pub use schedule::{converged, Stage, StageSchedule};
pub use sequence::{
    run_sequence, DivergenceSettings, RollbackEvent, SequenceConfig, SequenceOutcome, StageEnd, StageReport,
};
pub use task::{AlignTask, PolicyTask, ToyTask};
