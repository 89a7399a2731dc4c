use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, SelectionCriterion, TrainSettings};
use crate::dataset::{MinMaxScaler, Sample};
use crate::diffcore::{Adam, AdamConfig, DiffError, Matrix, Tape};
use crate::losses::{mean_accurate_entropy, total_loss, BatchView, LossContext, LossError, LossSpec, Strategy};
use crate::metrics::{classification_metrics, ece, PredictionRecord};
use crate::model::{input_matrix, is_classifier_param, kl_loss, reconstruction_loss, save_checkpoint, ModelError, VaeClassifier};
use crate::uncertainty::{epistemic_confidences, UncertaintyError};

/// Per-epoch means of the loss components plus validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub classification: f64,
    pub extra: Option<f64>,
    pub val_bacc: f64,
    pub val_ece: f64,
    pub avuc_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub records: Vec<EpochRecord>,
    /// Set when training stopped early on a non-finite value.
    pub failure: Option<String>,
}

impl EpochHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Epoch index chosen by `criterion`; ties go to the earliest epoch.
pub fn select_model(history: &EpochHistory, criterion: SelectionCriterion) -> Result<usize, HarnessError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in history.records.iter().enumerate() {
        let v = match criterion {
            SelectionCriterion::MaxValBacc => r.val_bacc,
            SelectionCriterion::MinValEce => r.val_ece,
        };
        match best {
            None => best = Some((i, v)),
            Some((_, b)) if criterion.improves(v, b) => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|(i, _)| i).ok_or(HarnessError::EmptyHistory)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: EpochHistory,
    pub scaler: MinMaxScaler,
    pub final_model: VaeClassifier<f64>,
    best: BTreeMap<SelectionCriterion, (usize, VaeClassifier<f64>)>,
}

impl TrainOutcome {
    /// Best-so-far model under `criterion`, with its epoch.
    pub fn best(&self, criterion: SelectionCriterion) -> Option<(usize, &VaeClassifier<f64>)> {
        self.best.get(&criterion).map(|(e, m)| (*e, m))
    }
}

/// Separate stream for `C_i` sampling so the training stream is the same
/// whatever the strategy.
const CONF_WEIGHT_STREAM: u64 = 1;

fn init_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D)
}

/// Validation BACC and ECE of the deterministic prediction.
pub(crate) fn validation_metrics(
    model: &VaeClassifier<f64>,
    x: &Matrix<f64>,
    samples: &[Sample],
    bins: usize,
) -> Result<(f64, f64), HarnessError> {
    let probs = model.predict(x)?;
    let records: Vec<PredictionRecord<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| PredictionRecord::new([probs.get(i, 0), probs.get(i, 1)], s.label))
        .collect();
    let bacc = classification_metrics(&records)?.balanced_accuracy()?;
    Ok((bacc, ece(&records, bins)?))
}

enum Step {
    Done,
    NonFinite(String),
}

fn non_finite_model(e: &ModelError) -> Option<String> {
    match e {
        ModelError::NonFinite(layer) => Some(format!("non-finite activation in {layer}")),
        ModelError::Diff(DiffError::NonFiniteGradient(p)) => Some(format!("non-finite gradient for {p}")),
        _ => None,
    }
}

/// Mini-batch training of one model. A non-finite loss, activation or
/// gradient stops the run and is reported through `history.failure`.
pub fn train(
    settings: &TrainSettings,
    spec: &LossSpec,
    train: &[Sample],
    validation: &[Sample],
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    spec.validate()?;
    if settings.batch_size == 0 {
        return Err(HarnessError::Config("batch_size must be positive".into()));
    }
    let scaler = MinMaxScaler::fit(train)?;
    let x_train = input_matrix::<f64>(train, &scaler);
    let x_val = input_matrix::<f64>(validation, &scaler);
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();

    let mut model = VaeClassifier::<f64>::new(settings.architecture.clone(), init_seed(seed));
    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cw_rng = ChaCha8Rng::seed_from_u64(seed);
    cw_rng.set_stream(CONF_WEIGHT_STREAM);
    let (lr_v, lr_c) = (settings.lr_vae, settings.lr_classifier);

    let mut history = EpochHistory::default();
    let mut best: BTreeMap<SelectionCriterion, (usize, VaeClassifier<f64>)> = BTreeMap::new();
    let mut best_scores: BTreeMap<SelectionCriterion, f64> = BTreeMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut accurate_entropy: Option<f64> = None;

    'epochs: for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let threshold = (spec.strategy == Strategy::Avuc).then(|| {
            if epoch < settings.avuc_warmup_epochs {
                spec.avuc_threshold()
            } else {
                accurate_entropy.unwrap_or_else(|| spec.avuc_threshold())
            }
        });
        let ctx = LossContext {
            avuc_threshold: threshold,
        };
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        let mut seen_probs: Vec<f64> = Vec::with_capacity(2 * train.len());
        let mut seen_labels: Vec<u8> = Vec::with_capacity(train.len());

        for chunk in order.chunks(settings.batch_size) {
            let xb = x_train.select_rows(chunk);
            let lb: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let step = (|| -> Result<Step, HarnessError> {
                let c_i = if spec.strategy == Strategy::ConfWeight {
                    match epistemic_confidences(&model, &xb, settings.conf_weight_samples, &mut cw_rng) {
                        Ok(c) => Some(c),
                        Err(UncertaintyError::Model(e)) => match non_finite_model(&e) {
                            Some(m) => return Ok(Step::NonFinite(m)),
                            None => return Err(e.into()),
                        },
                        Err(e) => return Err(e.into()),
                    }
                } else {
                    None
                };
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let xv = tape.leaf(xb.clone());
                let f = match model.forward(&mut tape, &bound, xv, &mut rng, true) {
                    Ok(f) => f,
                    Err(e) => match non_finite_model(&e) {
                        Some(m) => return Ok(Step::NonFinite(m)),
                        None => return Err(e.into()),
                    },
                };
                let re = reconstruction_loss(&mut tape, xv, f.reconstruction)?;
                let kl = kl_loss(&mut tape, f.mu, f.logvar)?;
                let mut batch = BatchView::new(&mut tape, f.probs, &lb)?;
                if let Some(c) = c_i {
                    batch = batch.with_epistemic(c);
                }
                let terms = total_loss(&mut tape, re, kl, &batch, spec, &ctx)?;
                let total = tape.scalar_value(terms.total);
                if !total.is_finite() {
                    return Ok(Step::NonFinite(format!("non-finite loss {total} at epoch {epoch}")));
                }
                sums[0] += total;
                sums[1] += tape.scalar_value(re);
                sums[2] += tape.scalar_value(kl);
                sums[3] += tape.scalar_value(terms.classification);
                if let Some(e) = terms.extra {
                    sums[4] += tape.scalar_value(e);
                }
                seen_probs.extend_from_slice(tape.value(f.probs).as_slice());
                seen_labels.extend_from_slice(&lb);
                tape.backward(terms.total).map_err(LossError::from)?;
                model.params_mut().accumulate_grads(&tape, &bound);
                match adam.step(model.params_mut(), |name| if is_classifier_param(name) { lr_c } else { lr_v }) {
                    Ok(()) => Ok(Step::Done),
                    Err(DiffError::NonFiniteGradient(p)) => Ok(Step::NonFinite(format!("non-finite gradient for {p}"))),
                    Err(e) => Err(LossError::from(e).into()),
                }
            })()?;
            if let Step::NonFinite(msg) = step {
                log::warn!("{}: {msg}; stopping after {} epochs", spec.strategy, history.len());
                history.failure = Some(msg);
                break 'epochs;
            }
            batches += 1;
        }

        let (val_bacc, val_ece) = match validation_metrics(&model, &x_val, validation, settings.bins) {
            Ok(v) => v,
            Err(HarnessError::Model(e)) if non_finite_model(&e).is_some() => {
                history.failure = non_finite_model(&e);
                break;
            }
            Err(e) => return Err(e),
        };
        let nb = batches.max(1) as f64;
        history.records.push(EpochRecord {
            epoch,
            loss: sums[0] / nb,
            reconstruction: sums[1] / nb,
            kl: sums[2] / nb,
            classification: sums[3] / nb,
            extra: spec.strategy.has_extra_term().then_some(sums[4] / nb),
            val_bacc,
            val_ece,
            avuc_threshold: threshold,
        });

        for criterion in SelectionCriterion::ALL {
            let score = match criterion {
                SelectionCriterion::MaxValBacc => val_bacc,
                SelectionCriterion::MinValEce => val_ece,
            };
            let better = best_scores.get(&criterion).is_none_or(|&b| criterion.improves(score, b));
            if better {
                best_scores.insert(criterion, score);
                best.insert(criterion, (epoch, model.clone()));
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&dir.join(format!("best-{criterion}")), &model, epoch, seed, Some(&scaler))?;
                }
            }
        }

        if spec.strategy == Strategy::Avuc && !seen_labels.is_empty() {
            let probs = Matrix::from_vec(seen_labels.len(), 2, seen_probs);
            accurate_entropy = mean_accurate_entropy(&probs, &seen_labels);
        }
    }

    Ok(TrainOutcome {
        history,
        scaler,
        final_model: model,
        best,
    })
}
