#![allow(dead_code)]

use caltrain::diffcore::{Matrix, Tape};
use caltrain::losses::{total_loss, BatchView, LossContext, LossSpec};
use caltrain::model::{kl_loss, reconstruction_loss, Architecture, VaeClassifier};
use caltrain::{Matrix64, Record64, VaeClassifier64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `||a - b|| / max(||a||, ||b||, 1e-12)` over the whole vector.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn small_arch() -> Architecture {
    Architecture {
        input_dim: 4,
        hidden: 6,
        latent_dim: 2,
        classifier_hidden: 5,
        ..Default::default()
    }
}

/// A randomised model, scaled batch, labels and fixed latent noise.
pub struct Fixture {
    pub model: VaeClassifier64,
    pub x: Matrix64,
    pub labels: Vec<u8>,
    pub noise: Matrix64,
}

impl Fixture {
    pub fn new(seed: u64, rows: usize) -> Self {
        let mut r = rng(seed);
        let mut model = VaeClassifier::new(small_arch(), seed);
        let flat: Vec<f64> = model
            .params()
            .flatten()
            .iter()
            .map(|v| v + 0.5 * r.sample::<f64, _>(StandardNormal))
            .collect();
        model.params_mut().assign_flat(&flat).unwrap();
        let x = Matrix::from_fn(rows, 4, |_, _| r.random_range(0.02..0.98));
        let labels = (0..rows).map(|_| r.random_range(0..2u8)).collect();
        let noise = model.latent_noise(rows, &mut r);
        Self { model, x, labels, noise }
    }

    /// Composite objective and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, model: &VaeClassifier64, spec: &LossSpec, ctx: &LossContext) -> (f64, Vec<f64>) {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let xv = tape.leaf(self.x.clone());
        let f = m.forward_with_noise(&mut tape, &bound, xv, Some(&self.noise)).unwrap();
        let re = reconstruction_loss(&mut tape, xv, f.reconstruction).unwrap();
        let kl = kl_loss(&mut tape, f.mu, f.logvar).unwrap();
        let batch = BatchView::new(&mut tape, f.probs, &self.labels).unwrap();
        let terms = total_loss(&mut tape, re, kl, &batch, spec, ctx).unwrap();
        let value = tape.scalar_value(terms.total);
        tape.backward(terms.total).unwrap();
        m.params_mut().accumulate_grads(&tape, &bound);
        (value, m.params().flatten_grads())
    }

    pub fn loss_at(&self, flat: &[f64], spec: &LossSpec, ctx: &LossContext) -> f64 {
        let mut m = self.model.clone();
        m.params_mut().assign_flat(flat).unwrap();
        self.loss_and_grad(&m, spec, ctx).0
    }

    /// Relative error between analytic and central-difference gradients.
    pub fn gradient_error(&self, spec: &LossSpec, ctx: &LossContext) -> f64 {
        let (_, analytic) = self.loss_and_grad(&self.model, spec, ctx);
        let x0 = self.model.params().flatten();
        let numeric = numeric_gradient(&x0, 1e-6, |p| self.loss_at(p, spec, ctx));
        rel_error(&analytic, &numeric)
    }
}

/// Random records with some confidences pinned to bin edges and ties.
pub fn random_records(r: &mut ChaCha8Rng, n: usize) -> Vec<Record64> {
    (0..n)
        .map(|_| {
            let p = match r.random_range(0..6) {
                0 => r.random_range(0..=15) as f64 / 15.0,
                1 => 0.5,
                _ => r.random_range(0.0..=1.0),
            };
            Record64::from_positive(p, r.random_range(0..2u8))
        })
        .collect()
}

// Brute-force reference metrics, written straight from the definitions.

pub fn conf(r: &Record64) -> f64 {
    let p = r.probs();
    p[0].max(p[1])
}

pub fn pred(r: &Record64) -> u8 {
    let p = r.probs();
    u8::from(p[1] >= p[0])
}

fn hit(r: &Record64) -> f64 {
    f64::from(u8::from(pred(r) == r.label()))
}

/// Equal-width bins: bin 0 is [0, 1/M], bin m is (m/M, (m+1)/M].
pub fn oracle_equal_bins(records: &[Record64], m_bins: usize) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); m_bins];
    for (i, r) in records.iter().enumerate() {
        let c = conf(r);
        for (m, bin) in bins.iter_mut().enumerate() {
            let lo = m as f64 / m_bins as f64;
            let hi = (m + 1) as f64 / m_bins as f64;
            if (m == 0 && c >= lo && c <= hi) || (c > lo && c <= hi) {
                bin.push(i);
                break;
            }
        }
    }
    bins
}

pub fn oracle_adaptive_bins(records: &[Record64], m_bins: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| conf(&records[a]).total_cmp(&conf(&records[b])).then(a.cmp(&b)));
    let n = records.len();
    let mut out = Vec::new();
    let mut start = 0;
    for m in 0..m_bins {
        let size = n / m_bins + usize::from(m < n % m_bins);
        out.push(idx[start..start + size].to_vec());
        start += size;
    }
    out
}

fn stats(records: &[Record64], bin: &[usize]) -> (f64, f64) {
    let k = bin.len() as f64;
    let acc = bin.iter().map(|&i| hit(&records[i])).sum::<f64>() / k;
    let c = bin.iter().map(|&i| conf(&records[i])).sum::<f64>() / k;
    (acc, c)
}

pub fn oracle_ece_from(records: &[Record64], bins: &[Vec<usize>]) -> f64 {
    let n = records.len() as f64;
    bins.iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let (a, c) = stats(records, b);
            b.len() as f64 / n * (a - c).abs()
        })
        .sum()
}

pub fn oracle_oe(records: &[Record64], m_bins: usize) -> f64 {
    let n = records.len() as f64;
    oracle_equal_bins(records, m_bins)
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let (a, c) = stats(records, b);
            b.len() as f64 / n * c * (c - a).max(0.0)
        })
        .sum()
}

pub fn oracle_mce(records: &[Record64], m_bins: usize) -> f64 {
    oracle_equal_bins(records, m_bins)
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let (a, c) = stats(records, b);
            (a - c).abs()
        })
        .fold(0.0, f64::max)
}

pub fn oracle_brier(records: &[Record64]) -> f64 {
    records
        .iter()
        .map(|r| {
            let p = r.probs();
            (0..2)
                .map(|k| {
                    let y = f64::from(u8::from(r.label() as usize == k));
                    (p[k] - y).powi(2)
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / records.len() as f64
}

/// (sensitivity, specificity), `None` when a class is absent.
pub fn oracle_sen_spe(records: &[Record64]) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0.0, 0.0, 0.0, 0.0);
    for r in records {
        match (r.label(), pred(r)) {
            (1, 1) => tp += 1.0,
            (1, _) => fn_ += 1.0,
            (_, 0) => tn += 1.0,
            _ => fp += 1.0,
        }
    }
    let sen = (tp + fn_ > 0.0).then(|| tp / (tp + fn_));
    let spe = (tn + fp > 0.0).then(|| tn / (tn + fp));
    (sen, spe)
}

/// (statistic, p-value) with the continuity correction; p uses
/// `erfc(sqrt(x / 2))`, the 1-dof chi-square tail.
pub fn oracle_mcnemar(a: &[Record64], b: &[Record64]) -> (f64, f64) {
    let mut only_a = 0.0;
    let mut only_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (ha, hb) = (hit(x) == 1.0, hit(y) == 1.0);
        if ha && !hb {
            only_a += 1.0;
        }
        if hb && !ha {
            only_b += 1.0;
        }
    }
    if only_a + only_b == 0.0 {
        return (0.0, 1.0);
    }
    let stat = ((only_a - only_b) as f64).abs() - 1.0;
    let stat = stat * stat / (only_a + only_b);
    (stat, statrs::function::erf::erfc((stat / 2.0).sqrt()))
}
