use dmc_core::diffusion::{make_schedule, DiffusionModel, Parameterization, Sampler, ScheduleKind};
use dmc_core::dmc::{ActionSelector, ContextWindow, PlannerDmc, PolicyDmc};
use dmc_core::envs::{gen_dataset, Coverage, Nav1DConfig, Nav1DWorld};
use dmc_core::numcore::{Mlp, MlpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(data_dim: usize, cond_dim: usize, seed: u64) -> DiffusionModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MlpConfig::new(data_dim, &[16], data_dim).with_time(8, 8.0).with_cond(cond_dim);
    DiffusionModel::new(
        Mlp::new(cfg, &mut rng),
        make_schedule(ScheduleKind::Cosine, 8).unwrap(),
        Parameterization::Epsilon,
        data_dim,
        cond_dim,
    )
}

fn dataset() -> dmc_core::envs::OfflineDataset {
    let world = Nav1DWorld::new(Nav1DConfig::default()).unwrap();
    gen_dataset(&world, Coverage::Full, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn policy_training_rows_cover_every_transition() {
    let ds = dataset();
    let cond = ContextWindow::encoded_width(3, 2);
    let policy = PolicyDmc::new(model(2, cond, 2), 3, 2, 1, 2).unwrap();
    let (x, c) = policy.training_set(&ds.episodes).unwrap();
    let n: usize = ds.episodes.iter().map(Vec::len).sum();
    assert_eq!(x.shape(), &[n, 2]);
    assert_eq!(c.shape(), &[n, cond]);
    // Chunks read ahead; the tail of an episode is zero-padded.
    let ep = &ds.episodes[0];
    assert_eq!(x.at(0, 0), ep[0].action);
    assert_eq!(x.at(0, 1), ep[1].action);
    assert_eq!(x.at(ep.len() - 1, 1), 0.0);
}

#[test]
fn policy_rejects_mismatched_model() {
    assert!(PolicyDmc::new(model(2, 5, 3), 3, 2, 1, 1).is_err());
}

#[test]
fn policy_actions_are_bounded_and_seeded() {
    let cond = ContextWindow::encoded_width(2, 2);
    let policy = PolicyDmc::new(model(1, cond, 4), 2, 2, 1, 1).unwrap();
    let mut ctx = policy.empty_context();
    ctx.push(&[0.3, 0.0]);
    let sel = ActionSelector::default();
    let act = |seed| policy.act(&ctx, &sel, None, &Sampler::Ddpm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let a = act(5);
    assert_eq!(a.len(), 1);
    assert!((-1.0..=1.0).contains(&a[0]));
    assert_eq!(a, act(5));
}

#[test]
fn planner_candidates_start_at_the_observation() {
    let dim = PlannerDmc::layout_dim(3, 2, 1);
    let planner = PlannerDmc::new(model(dim, 0, 6), 3, 2, 1).unwrap();
    let obs = [0.25, 0.5];
    let c = planner
        .candidates(&obs, 6, &Sampler::Ddpm, &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap();
    for r in 0..c.rows() {
        assert_eq!(planner.obs_at(c.row_slice(r), 0), &obs);
    }
}

#[test]
fn causal_masks_reveal_prefixes_only() {
    let dim = PlannerDmc::layout_dim(4, 2, 1);
    let planner = PlannerDmc::new(model(dim, 0, 8), 4, 2, 1).unwrap();
    let (mask, lens) = planner.causal_masks(200, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
    assert!(lens.contains(&0));
    for (r, &k) in lens.iter().enumerate() {
        let row = &mask[r * dim..(r + 1) * dim];
        let w = planner.prefix_width(k);
        assert!(row[..w].iter().all(|&m| m) && row[w..].iter().all(|&m| !m));
    }
}

#[test]
fn planner_windows_have_layout_width() {
    let ds = dataset();
    let planner = PlannerDmc::new(model(PlannerDmc::layout_dim(3, 2, 1), 0, 10), 3, 2, 1).unwrap();
    let w = planner.windows(&ds.episodes).unwrap();
    assert_eq!(w.cols(), planner.dim());
    assert!(w.rows() > 0);
}
