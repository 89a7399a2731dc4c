mod common;

use caltrain::diffcore::{DiffError, Matrix, Tape, Var};
use caltrain::losses::{LossContext, LossSpec, Strategy};
use caltrain::{Matrix64, Tape64};
use common::{numeric_gradient, rel_error, rng, Fixture};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 100;
const TOL: f64 = 1e-6;

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix64 {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(lo..hi))
}

fn random_sign_away(r: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Matrix64 {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = r.random_range(gap..2.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Checks `sum(op(inputs) * w)` for a random weight `w` against central
/// differences in every input.
fn check(inputs: Vec<Matrix64>, op: impl Fn(&mut Tape64, &[Var]) -> Result<Var, DiffError>, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xABCD);
    let eval = |vals: &[Matrix64], want_grad: bool, w: Option<&Matrix64>| -> (f64, Vec<f64>, Matrix64) {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| t.leaf(m.clone())).collect();
        let out = op(&mut t, &vars).unwrap();
        let (rows, cols) = t.shape(out);
        let w = w.cloned().unwrap_or_else(|| Matrix::zeros(rows, cols));
        let wv = t.leaf(w.clone());
        let prod = t.mul(out, wv).unwrap();
        let s = t.sum(prod);
        let value = t.scalar_value(s);
        let mut grads = Vec::new();
        if want_grad {
            t.backward(s).unwrap();
            for v in &vars {
                grads.extend_from_slice(t.grad(*v).as_slice());
            }
        }
        (value, grads, w)
    };
    let (_, _, shape_probe) = eval(&inputs, false, None);
    let w = Matrix::from_fn(shape_probe.rows(), shape_probe.cols(), |_, _| r.random_range(-1.0..1.0));
    let (_, analytic, _) = eval(&inputs, true, Some(&w));
    let flat: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let rebuild = |p: &[f64]| -> Vec<Matrix64> {
        let mut off = 0;
        inputs
            .iter()
            .map(|m| {
                let n = m.len();
                let out = Matrix::from_vec(m.rows(), m.cols(), p[off..off + n].to_vec());
                off += n;
                out
            })
            .collect()
    };
    let numeric = numeric_gradient(&flat, 1e-6, |p| eval(&rebuild(p), false, Some(&w)).0);
    rel_error(&analytic, &numeric)
}

fn over_draws(name: &str, mut f: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let mut r = rng(seed);
        let e = f(&mut r, seed);
        assert!(e < TOL, "{name}: draw {seed} relative error {e}");
        worst = worst.max(e);
    }
    assert!(worst < TOL);
}

#[test]
fn elementwise_binary_with_broadcast() {
    over_draws("binary", |r, seed| {
        let (n, c) = (r.random_range(1..5), r.random_range(1..5));
        let a = random(r, n, c, -2.0, 2.0);
        let b = random(r, n, c, 0.5, 2.0);
        let col = random(r, n, 1, 0.5, 2.0);
        let row = random(r, 1, c, 0.5, 2.0);
        let s = random(r, 1, 1, 0.5, 2.0);
        [
            check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), seed),
            check(vec![a.clone(), col.clone()], |t, v| t.sub(v[0], v[1]), seed),
            check(vec![a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]), seed),
            check(vec![a.clone(), b], |t, v| t.div(v[0], v[1]), seed),
            check(vec![s, a.clone()], |t, v| t.div(v[1], v[0]), seed),
            check(vec![row, a], |t, v| t.mul(v[0], v[1]), seed),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    });
}

#[test]
fn matmul_and_transpose() {
    over_draws("matmul", |r, seed| {
        let (n, k, m) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random(r, n, k, -1.0, 1.0);
        let b = random(r, k, m, -1.0, 1.0);
        let e1 = check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]), seed);
        let e2 = check(vec![a], |t, v| Ok(t.transpose(v[0])), seed);
        e1.max(e2)
    });
}

#[test]
fn affine_scalar_ops() {
    over_draws("affine", |r, seed| {
        let a = random(r, 3, 2, -1.0, 1.0);
        let c: f64 = r.random_range(-3.0..3.0);
        [
            check(vec![a.clone()], move |t, v| Ok(t.scale(v[0], c)), seed),
            check(vec![a.clone()], move |t, v| Ok(t.offset(v[0], c)), seed),
            check(vec![a], move |t, v| Ok(t.rsub(c, v[0])), seed),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    });
}

#[test]
fn smooth_unary_ops() {
    over_draws("unary", |r, seed| {
        let a = random(r, 3, 3, -2.0, 2.0);
        let pos = random(r, 3, 3, 0.1, 3.0);
        let p: f64 = r.random_range(0.3..3.0);
        [
            check(vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.tanh(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.exp(v[0])), seed),
            check(vec![pos.clone()], |t, v| Ok(t.log(v[0])), seed),
            check(vec![pos.clone()], move |t, v| Ok(t.powf(v[0], p)), seed),
            check(vec![pos], |t, v| Ok(t.sqrt(v[0])), seed),
            check(vec![a], |t, v| Ok(t.softmax_rows(v[0])), seed),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    });
}

#[test]
fn piecewise_ops_away_from_kinks() {
    over_draws("piecewise", |r, seed| {
        let a = random_sign_away(r, 3, 4, 0.05);
        let e1 = check(vec![a.clone()], |t, v| Ok(t.relu(v[0])), seed);
        let e2 = check(vec![a.clone()], |t, v| Ok(t.abs(v[0])), seed);
        // Bounds at +-1 after shifting values off them.
        let shifted = a.map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
        let e3 = check(vec![shifted], |t, v| Ok(t.clamp(v[0], -1.0, 1.0)), seed);
        e1.max(e2).max(e3)
    });
}

#[test]
fn reductions() {
    over_draws("reduce", |r, seed| {
        let (n, c) = (r.random_range(1..5), r.random_range(2..5));
        let a = random(r, n, c, -1.0, 1.0);
        let j = r.random_range(0..c);
        [
            check(vec![a.clone()], |t, v| Ok(t.sum(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.mean(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.sum_cols(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.sum_rows(v[0])), seed),
            check(vec![a.clone()], |t, v| Ok(t.max_cols(v[0])), seed),
            check(vec![a], move |t, v| t.column(v[0], j), seed),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    });
}

#[test]
fn kink_conventions() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
    let a = t.relu(x);
    let b = t.abs(x);
    let c = t.sqrt(x);
    let s1 = t.add(a, b).unwrap();
    let s2 = t.add(s1, c).unwrap();
    let s = t.sum(s2);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).as_slice(), &[0.0, 0.0, 0.0]);
}

#[test]
fn composite_losses_on_the_model() {
    let ctx = LossContext::default();
    for strategy in Strategy::ALL.into_iter().filter(|s| *s != Strategy::ConfWeight) {
        let spec = LossSpec::new(strategy);
        for seed in 0..10 {
            let e = Fixture::new(seed, 8).gradient_error(&spec, &ctx);
            assert!(e < 1e-4, "{strategy} draw {seed}: {e}");
        }
    }
}

#[test]
fn zero_classification_weight_leaves_classifier_ungraded() {
    let spec = LossSpec::new(Strategy::Baseline).with_lambdas(0.001, 0.0);
    let fx = Fixture::new(3, 8);
    let (_, grad) = fx.loss_and_grad(&fx.model, &spec, &LossContext::default());
    let params = fx.model.params();
    let mut offset = 0;
    for i in 0..params.len() {
        let n = params.value(i).len();
        let g = &grad[offset..offset + n];
        if params.name(i).starts_with("classifier") {
            assert!(g.iter().all(|&v| v == 0.0), "{} has gradient", params.name(i));
        }
        offset += n;
    }
}
