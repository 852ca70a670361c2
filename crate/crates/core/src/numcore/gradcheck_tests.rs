//! Finite-difference checks of every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of `f` around every entry of every input.
fn numeric(inputs: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            (0..x.len())
                .map(|k| {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[k] += H;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[k] -= H;
                    (f(&plus) - f(&minus)) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

fn check(inputs: Vec<Tensor<f64>>, build: &dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>) {
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.input(x.clone())).collect();
        build(&tape, &vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let num = numeric(&inputs, &eval);
    for (v, n) in vars.iter().zip(&num) {
        let a = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n.len()]);
        let e = rel_err(&a, n);
        assert!(e <= TOL, "relative error {e} (analytic {a:?}, numeric {n:?})");
    }
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::randn(&[r, c], 1.0, rng)
}

#[test]
fn random_composites_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, k, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let inputs = vec![rand_t(&mut rng, r, k), rand_t(&mut rng, k, c), rand_t(&mut rng, r, c)];
        check(inputs, &|_, v| {
            let h = v[0].matmul(v[1]).tanh();
            let g = h.mul(v[2]).add(v[2].softplus());
            g.sub(h.square()).sum()
        });
    }
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_t(&mut rng, 3, 4);
    check(vec![x.clone()], &|_, v| v[0].sigmoid().sum());
    check(vec![x.clone()], &|_, v| v[0].silu().sum());
    check(vec![x.clone()], &|_, v| v[0].exp().mean());
    check(vec![x.map(|a| a.abs() + 0.5)], &|_, v| v[0].ln().sum());
    check(vec![x.clone()], &|_, v| v[0].neg().scale(2.5).offset(1.0).square().sum());
    check(vec![x.clone()], &|_, v| v[0].sum_cols().square().sum());
    check(vec![x.clone()], &|_, v| v[0].mean_rows().square().sum());
    check(vec![x.clone()], &|_, v| v[0].slice_cols(1, 2).square().sum());
    check(vec![x.clone()], &|_, v| v[0].slice_rows(1, 2).tanh().sum());
    check(vec![x.map(|a| a * 0.3 + 1.0)], &|_, v| v[0].clamp(0.9, 1.1).square().sum());
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (rand_t(&mut rng, 3, 2), rand_t(&mut rng, 3, 2));
    let row = rand_t(&mut rng, 1, 2);
    let col = rand_t(&mut rng, 3, 1);
    check(vec![a.clone(), row], &|_, v| v[0].add_row(v[1]).tanh().sum());
    check(vec![a.clone(), col], &|_, v| v[0].mul_col(v[1]).square().sum());
    check(vec![a.clone(), b.clone()], &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).softplus().sum());
    check(vec![a.clone(), b.clone()], &|_, v| v[0].min(v[1]).square().sum());
    let mask = [true, false, false, true, true, false];
    check(vec![a, b], &move |_, v| v[0].select(&mask, v[1]).square().sum());
}
