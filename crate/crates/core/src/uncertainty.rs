//! Vote-based uncertainty estimates.
//!
//! Epistemic: one prediction at `z = mu` plus `n - 1` reparameterised latent
//! draws. Aleatoric: one prediction on the original input plus `n - 1` on
//! Gaussian-perturbed copies, all on the deterministic latent path. The
//! confidence is the fraction of positive votes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{perturb, DataError, MinMaxScaler, Sample};
use crate::diffcore::Matrix;
use crate::metrics::PredictionRecord;
use crate::model::{input_matrix, ModelError, VaeClassifier};
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("need at least one sample per estimate, got {0}")]
    NoSamples(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    Epistemic,
    Aleatoric,
}

impl UncertaintyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyKind::Epistemic => "epistemic",
            UncertaintyKind::Aleatoric => "aleatoric",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub kind: UncertaintyKind,
    /// Predicted label of every pass; the first is the unperturbed one.
    pub predictions: Vec<u8>,
}

impl UncertaintyEstimate {
    pub fn n_samples(&self) -> usize {
        self.predictions.len()
    }

    pub fn positives(&self) -> usize {
        self.predictions.iter().filter(|&&p| p == 1).count()
    }

    /// Fraction of positive predictions.
    pub fn c_positive(&self) -> f64 {
        self.positives() as f64 / self.n_samples() as f64
    }

    /// Vote-based record: confidence `max(c, 1 - c)`, ties predict positive.
    pub fn record<T: Scalar>(&self, label: u8) -> PredictionRecord<T> {
        PredictionRecord::from_positive(T::lit(self.c_positive()), label)
    }
}

fn votes<T: Scalar>(probs: &Matrix<T>) -> Vec<u8> {
    (0..probs.rows())
        .map(|i| u8::from(probs.get(i, 1) >= probs.get(i, 0)))
        .collect()
}

fn transpose_votes(kind: UncertaintyKind, passes: Vec<Vec<u8>>, rows: usize) -> Vec<UncertaintyEstimate> {
    (0..rows)
        .map(|i| UncertaintyEstimate {
            kind,
            predictions: passes.iter().map(|p| p[i]).collect(),
        })
        .collect()
}

/// Epistemic estimates for every row of a scaled input batch.
pub fn epistemic_batch<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    x: &Matrix<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<UncertaintyEstimate>, UncertaintyError> {
    if n < 1 {
        return Err(UncertaintyError::NoSamples(n));
    }
    let mut passes = Vec::with_capacity(n);
    passes.push(votes(&model.predict(x)?));
    for _ in 1..n {
        let noise = model.latent_noise(x.rows(), rng);
        passes.push(votes(&model.evaluate(x, Some(&noise))?.probs));
    }
    Ok(transpose_votes(UncertaintyKind::Epistemic, passes, x.rows()))
}

/// Epistemic estimate for one scaled feature vector.
pub fn epistemic<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    x: &[T],
    n: usize,
    rng: &mut R,
) -> Result<UncertaintyEstimate, UncertaintyError> {
    let mut out = epistemic_batch(model, &Matrix::row(x), n, rng)?;
    Ok(out.pop().expect("one row"))
}

/// Positive-vote fractions from latent sampling, for confidence weighting.
pub fn epistemic_confidences<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    x: &Matrix<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<T>, UncertaintyError> {
    Ok(epistemic_batch(model, x, n, rng)?
        .iter()
        .map(|e| T::lit(e.c_positive()))
        .collect())
}

/// Aleatoric estimates: raw features are perturbed with `N(0, sigma^2)`
/// noise, then scaled like the training data.
pub fn aleatoric_batch<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    scaler: &MinMaxScaler,
    samples: &[Sample],
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<UncertaintyEstimate>, UncertaintyError> {
    if n < 1 {
        return Err(UncertaintyError::NoSamples(n));
    }
    let mut passes = Vec::with_capacity(n);
    passes.push(votes(&model.predict(&input_matrix::<T>(samples, scaler))?));
    for _ in 1..n {
        let noisy = samples
            .iter()
            .map(|s| perturb(s, sigma, rng))
            .collect::<Result<Vec<_>, _>>()?;
        passes.push(votes(&model.predict(&input_matrix::<T>(&noisy, scaler))?));
    }
    Ok(transpose_votes(UncertaintyKind::Aleatoric, passes, samples.len()))
}

pub fn aleatoric<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    scaler: &MinMaxScaler,
    sample: &Sample,
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<UncertaintyEstimate, UncertaintyError> {
    let mut out = aleatoric_batch(model, scaler, std::slice::from_ref(sample), n, sigma, rng)?;
    Ok(out.pop().expect("one sample"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub samples: usize,
    /// Aleatoric input-noise standard deviation (raw feature units).
    pub sigma: f64,
}

/// One vote-based record per sample, in input order.
pub fn uncertainty_records<T: Scalar, R: Rng + ?Sized>(
    model: &VaeClassifier<T>,
    scaler: &MinMaxScaler,
    samples: &[Sample],
    kind: UncertaintyKind,
    params: UncertaintyParams,
    rng: &mut R,
) -> Result<Vec<PredictionRecord<T>>, UncertaintyError> {
    let estimates = match kind {
        UncertaintyKind::Epistemic => {
            epistemic_batch(model, &input_matrix::<T>(samples, scaler), params.samples, rng)?
        }
        UncertaintyKind::Aleatoric => aleatoric_batch(model, scaler, samples, params.samples, params.sigma, rng)?,
    };
    Ok(estimates
        .iter()
        .zip(samples)
        .map(|(e, s)| e.record(s.label))
        .collect())
}
