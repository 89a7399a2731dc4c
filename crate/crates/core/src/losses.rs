//! Baseline composite loss and the uncertainty-aware training strategies.
//!
//! Every strategy except confidence weighting adds `lambda_n * L_N` to the
//! baseline `L_RE + lambda_kl * L_KL + lambda_c * L_C`. Confidence weighting
//! instead rescales the per-sample classification loss.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Matrix, Tape, Var};
use crate::scalar::{Scalar, EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid loss hyperparameter: {0}")]
    InvalidSpec(String),
    #[error("unknown loss hyperparameter `{0}`")]
    UnknownKey(String),
    #[error("confidence weighting needs one epistemic confidence per sample ({expected}), got {got}")]
    MissingEpistemic { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Baseline,
    Paired,
    Probability,
    ConfWeight,
    Avuc,
    SoftEce,
    Mmce,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Baseline,
        Strategy::Paired,
        Strategy::Probability,
        Strategy::ConfWeight,
        Strategy::Avuc,
        Strategy::SoftEce,
        Strategy::Mmce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Paired => "paired",
            Strategy::Probability => "probability",
            Strategy::ConfWeight => "conf-weight",
            Strategy::Avuc => "avuc",
            Strategy::SoftEce => "soft-ece",
            Strategy::Mmce => "mmce",
        }
    }

    /// Whether the strategy adds a `lambda_n`-weighted term.
    pub fn has_extra_term(self) -> bool {
        !matches!(self, Strategy::Baseline | Strategy::ConfWeight)
    }

    /// Hyperparameters the strategy reads beyond `lambda_kl` and `lambda_c`.
    pub fn specific_keys(self) -> &'static [&'static str] {
        match self {
            Strategy::Baseline => &[],
            Strategy::Paired => &["lambda_n", "margin"],
            Strategy::Probability => &["lambda_n"],
            Strategy::ConfWeight => &["weight_floor"],
            Strategy::Avuc => &["lambda_n", "avuc_threshold"],
            Strategy::SoftEce => &["lambda_n", "temperature", "bins", "norm_order"],
            Strategy::Mmce => &["lambda_n", "kernel_width"],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LossError::InvalidSpec(format!("unknown strategy `{s}`")))
    }
}

pub const DEFAULT_LAMBDA_N: f64 = 1.0;
pub const DEFAULT_MARGIN: f64 = 0.6;
pub const DEFAULT_WEIGHT_FLOOR: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_SOFT_BINS: usize = 15;
pub const DEFAULT_NORM_ORDER: f64 = 2.0;
pub const DEFAULT_KERNEL_WIDTH: f64 = 0.4;
pub const DEFAULT_AVUC_THRESHOLD: f64 = 1.0;

fn default_lambda_kl() -> f64 {
    0.001
}

fn default_lambda_c() -> f64 {
    1.0
}

/// Strategy plus hyperparameters. Strategy-specific fields are optional;
/// unset ones fall back to the `DEFAULT_*` constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub strategy: Strategy,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    #[serde(default = "default_lambda_c")]
    pub lambda_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_n: Option<f64>,
    /// Paired-confidence margin `mu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Confidence-weight floor `w`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_floor: Option<f64>,
    /// Soft-binning temperature `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Soft-binning bin count `M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Soft-ECE norm order `p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_order: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    /// Initial AvUC uncertainty threshold (before warm-up ends).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avuc_threshold: Option<f64>,
}

impl LossSpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            lambda_kl: default_lambda_kl(),
            lambda_c: default_lambda_c(),
            lambda_n: None,
            margin: None,
            weight_floor: None,
            temperature: None,
            bins: None,
            norm_order: None,
            kernel_width: None,
            avuc_threshold: None,
        }
    }

    pub fn with_lambdas(mut self, lambda_kl: f64, lambda_c: f64) -> Self {
        self.lambda_kl = lambda_kl;
        self.lambda_c = lambda_c;
        self
    }

    pub fn with(mut self, key: &str, value: f64) -> Result<Self, LossError> {
        self.set(key, value)?;
        Ok(self)
    }

    pub fn lambda_n(&self) -> f64 {
        self.lambda_n.unwrap_or(DEFAULT_LAMBDA_N)
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(DEFAULT_MARGIN)
    }

    pub fn weight_floor(&self) -> f64 {
        self.weight_floor.unwrap_or(DEFAULT_WEIGHT_FLOOR)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(DEFAULT_TEMPERATURE)
    }

    pub fn bins(&self) -> usize {
        self.bins.unwrap_or(DEFAULT_SOFT_BINS)
    }

    pub fn norm_order(&self) -> f64 {
        self.norm_order.unwrap_or(DEFAULT_NORM_ORDER)
    }

    pub fn kernel_width(&self) -> f64 {
        self.kernel_width.unwrap_or(DEFAULT_KERNEL_WIDTH)
    }

    pub fn avuc_threshold(&self) -> f64 {
        self.avuc_threshold.unwrap_or(DEFAULT_AVUC_THRESHOLD)
    }

    pub const KEYS: [&'static str; 10] = [
        "lambda_kl",
        "lambda_c",
        "lambda_n",
        "margin",
        "weight_floor",
        "temperature",
        "bins",
        "norm_order",
        "kernel_width",
        "avuc_threshold",
    ];

    /// Whether the current strategy reads `key`.
    pub fn is_relevant(&self, key: &str) -> bool {
        key == "lambda_kl" || key == "lambda_c" || self.strategy.specific_keys().contains(&key)
    }

    /// Sets a hyperparameter by name (grid keys and CLI overrides).
    pub fn set(&mut self, key: &str, value: f64) -> Result<(), LossError> {
        match key {
            "lambda_kl" => self.lambda_kl = value,
            "lambda_c" => self.lambda_c = value,
            "lambda_n" => self.lambda_n = Some(value),
            "margin" => self.margin = Some(value),
            "weight_floor" => self.weight_floor = Some(value),
            "temperature" => self.temperature = Some(value),
            "bins" => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(LossError::InvalidSpec(format!("bins must be a whole number, got {value}")));
                }
                self.bins = Some(value as usize)
            }
            "norm_order" => self.norm_order = Some(value),
            "kernel_width" => self.kernel_width = Some(value),
            "avuc_threshold" => self.avuc_threshold = Some(value),
            other => return Err(LossError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Names of explicitly set fields the strategy does not read.
    pub fn ignored_fields(&self) -> Vec<&'static str> {
        let set = [
            ("lambda_n", self.lambda_n.is_some()),
            ("margin", self.margin.is_some()),
            ("weight_floor", self.weight_floor.is_some()),
            ("temperature", self.temperature.is_some()),
            ("bins", self.bins.is_some()),
            ("norm_order", self.norm_order.is_some()),
            ("kernel_width", self.kernel_width.is_some()),
            ("avuc_threshold", self.avuc_threshold.is_some()),
        ];
        set.into_iter()
            .filter(|&(k, present)| present && !self.is_relevant(k))
            .map(|(k, _)| k)
            .collect()
    }

    /// Range checks; logs a notice for every ignored field.
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidSpec(m));
        let nonneg = |name: &str, v: f64| -> Result<(), LossError> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LossError::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("lambda_kl", self.lambda_kl)?;
        nonneg("lambda_c", self.lambda_c)?;
        nonneg("lambda_n", self.lambda_n())?;
        nonneg("weight_floor", self.weight_floor())?;
        if !(0.0..=1.0).contains(&self.margin()) {
            return bad(format!("margin must lie in [0, 1], got {}", self.margin()));
        }
        if !(self.temperature() > 0.0 && self.temperature().is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature()));
        }
        if self.bins() < 2 {
            return bad(format!("bins must be >= 2, got {}", self.bins()));
        }
        if !(self.norm_order() >= 1.0 && self.norm_order().is_finite()) {
            return bad(format!("norm_order must be >= 1, got {}", self.norm_order()));
        }
        if !(self.kernel_width() > 0.0 && self.kernel_width().is_finite()) {
            return bad(format!("kernel_width must be > 0, got {}", self.kernel_width()));
        }
        if !(0.0..=1.0).contains(&self.avuc_threshold()) {
            return bad(format!("avuc_threshold must lie in [0, 1], got {}", self.avuc_threshold()));
        }
        for key in self.ignored_fields() {
            log::info!("{}: ignoring `{key}`, not used by this strategy", self.strategy);
        }
        Ok(())
    }
}

/// Per-batch quantities the losses read. Predictions, correctness and
/// confidence come from the classifier probabilities on the tape.
#[derive(Clone, Debug)]
pub struct BatchView<T> {
    /// `n x 2` probabilities; column `k` is `P(label = k)`.
    pub probs: Var,
    /// `n x 1` predicted-class probability `r_i`.
    pub confidence: Var,
    pub labels: Vec<u8>,
    pub predicted: Vec<u8>,
    pub correct: Vec<bool>,
    /// Epistemic positive-vote fractions `C_i`, constants for the backward pass.
    pub epistemic: Option<Vec<T>>,
}

impl<T: Scalar> BatchView<T> {
    pub fn new(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Self, LossError> {
        let (n, c) = tape.shape(probs);
        if c != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "batch_view",
                left: (n, c),
                right: (n, 2),
            }
            .into());
        }
        if labels.len() != n {
            return Err(DiffError::ShapeMismatch {
                op: "batch_view",
                left: (n, c),
                right: (labels.len(), 1),
            }
            .into());
        }
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        let pv = tape.value(probs);
        let predicted: Vec<u8> = (0..n).map(|i| u8::from(pv.get(i, 1) >= pv.get(i, 0))).collect();
        let correct = predicted.iter().zip(labels).map(|(p, g)| p == g).collect();
        let confidence = tape.max_cols(probs);
        Ok(Self {
            probs,
            confidence,
            labels: labels.to_vec(),
            predicted,
            correct,
            epistemic: None,
        })
    }

    pub fn with_epistemic(mut self, c: Vec<T>) -> Self {
        self.epistemic = Some(c);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn mask(&self, f: impl Fn(usize) -> bool) -> Matrix<T> {
        Matrix::from_fn(self.len(), 1, |i, _| if f(i) { T::one() } else { T::zero() })
    }

    fn count(&self, f: impl Fn(usize) -> bool) -> usize {
        (0..self.len()).filter(|&i| f(i)).count()
    }
}

/// Per-sample cross-entropy `-ln P(label_i)`, as an `n x 1` node.
pub fn per_sample_bce<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>) -> Result<Var, LossError> {
    let onehot = Matrix::from_fn(batch.len(), 2, |i, k| {
        if batch.labels[i] as usize == k {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.leaf(onehot);
    let logp = tape.log(batch.probs);
    let picked = tape.mul(onehot, logp)?;
    let ll = tape.sum_cols(picked);
    Ok(tape.scale(ll, -T::one()))
}

/// Mean classification cross-entropy `L_C`.
pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>) -> Result<Var, LossError> {
    let bce = per_sample_bce(tape, batch)?;
    Ok(tape.mean(bce))
}

/// Hinge penalties over (incorrect, correct) pairs within each predicted
/// class, each class side normalised by its number of incorrect members.
pub fn paired_confidence_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>, margin: T) -> Result<Var, LossError> {
    let n = batch.len();
    let mut total = tape.constant(T::zero());
    for side in [1u8, 0u8] {
        let in_side = |i: usize| batch.predicted[i] == side;
        let wrong = batch.count(|i| in_side(i) && !batch.correct[i]);
        let right = batch.count(|i| in_side(i) && batch.correct[i]);
        if wrong == 0 || right == 0 {
            continue;
        }
        let mask = Matrix::from_fn(n, n, |i, j| {
            let pair = in_side(i) && !batch.correct[i] && in_side(j) && batch.correct[j];
            if pair {
                T::one()
            } else {
                T::zero()
            }
        });
        let p = tape.column(batch.probs, side as usize)?;
        let pt = tape.transpose(p);
        let diff = tape.sub(p, pt)?;
        let shifted = tape.offset(diff, margin);
        let hinge = tape.relu(shifted);
        let mask = tape.leaf(mask);
        let masked = tape.mul(hinge, mask)?;
        let s = tape.sum(masked);
        let term = tape.scale(s, T::one() / T::from_usize_lossy(wrong));
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Mean wrong-class probability over ground-truth positives plus the same
/// over ground-truth negatives. An absent class contributes 0.
pub fn probability_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>) -> Result<Var, LossError> {
    let mut total = tape.constant(T::zero());
    for (class, wrong_col) in [(1u8, 0usize), (0u8, 1usize)] {
        let members = batch.count(|i| batch.labels[i] == class);
        if members == 0 {
            continue;
        }
        let mask = tape.leaf(batch.mask(|i| batch.labels[i] == class));
        let p = tape.column(batch.probs, wrong_col)?;
        let masked = tape.mul(p, mask)?;
        let s = tape.sum(masked);
        let term = tape.scale(s, T::one() / T::from_usize_lossy(members));
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Per-sample weights `(1 - w) * W_i + w` with
/// `W_i = g_i (1 - C_i) + (1 - g_i) C_i`.
pub fn confidence_weights<T: Scalar>(labels: &[u8], epistemic: &[T], w: T) -> Result<Vec<T>, LossError> {
    if !(w >= T::zero()) {
        return Err(LossError::InvalidSpec(format!("weight floor must be >= 0, got {w}")));
    }
    if labels.len() != epistemic.len() {
        return Err(LossError::MissingEpistemic {
            expected: labels.len(),
            got: epistemic.len(),
        });
    }
    Ok(labels
        .iter()
        .zip(epistemic)
        .map(|(&g, &c)| {
            let g = if g == 1 { T::one() } else { T::zero() };
            let raw = g * (T::one() - c) + (T::one() - g) * c;
            (T::one() - w) * raw + w
        })
        .collect())
}

/// Mean of `W_S,i * BCE_i`; the weights are constants.
pub fn weighted_classification_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>, w: T) -> Result<Var, LossError> {
    let c = batch.epistemic.as_deref().ok_or(LossError::MissingEpistemic {
        expected: batch.len(),
        got: 0,
    })?;
    let weights = confidence_weights(&batch.labels, c, w)?;
    let weights = tape.leaf(Matrix::column(&weights));
    let bce = per_sample_bce(tape, batch)?;
    let weighted = tape.mul(weights, bce)?;
    Ok(tape.mean(weighted))
}

/// Binary predictive entropy divided by `ln 2`, as an `n x 1` node.
pub fn normalized_entropy<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var, LossError> {
    let logp = tape.log(probs);
    let plogp = tape.mul(probs, logp)?;
    let h = tape.sum_cols(plogp);
    Ok(tape.scale(h, -T::one() / T::lit(2f64.ln())))
}

/// Accuracy-versus-uncertainty loss from soft counts. A sample is
/// "certain" when its normalised entropy is below `threshold`.
pub fn avuc_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>, threshold: T) -> Result<Var, LossError> {
    let u = normalized_entropy(tape, batch.probs)?;
    let uv = tape.value(u).clone();
    let certain = |i: usize| uv.get(i, 0) < threshold;
    let tu = tape.tanh(u);
    let one_minus_tu = tape.rsub(T::one(), tu);
    let r = batch.confidence;
    let one_minus_r = tape.rsub(T::one(), r);

    let count = |tape: &mut Tape<T>, acc: bool, cert: bool| -> Result<Var, LossError> {
        let mask = batch.mask(|i| batch.correct[i] == acc && certain(i) == cert);
        let mask = tape.leaf(mask);
        let conf = if acc { r } else { one_minus_r };
        let unc = if cert { one_minus_tu } else { tu };
        let prod = tape.mul(conf, unc)?;
        let masked = tape.mul(prod, mask)?;
        Ok(tape.sum(masked))
    };
    let n_ac = count(tape, true, true)?;
    let n_au = count(tape, true, false)?;
    let n_ic = count(tape, false, true)?;
    let n_iu = count(tape, false, false)?;
    let num = tape.add(n_au, n_ic)?;
    let den = tape.add(n_ac, n_iu)?;
    let den = tape.offset(den, T::lit(EPS));
    let ratio = tape.div(num, den)?;
    let arg = tape.offset(ratio, T::one());
    Ok(tape.log(arg))
}

/// Mean normalised entropy of correctly classified samples, the AvUC
/// threshold update after warm-up. `None` when nothing is correct.
pub fn mean_accurate_entropy<T: Scalar>(probs: &Matrix<T>, labels: &[u8]) -> Option<T> {
    let ln2 = T::lit(2f64.ln());
    let eps = T::lit(EPS);
    let mut total = T::zero();
    let mut n = 0usize;
    for (i, &g) in labels.iter().enumerate() {
        let (p0, p1) = (probs.get(i, 0), probs.get(i, 1));
        let pred = u8::from(p1 >= p0);
        if pred == g {
            let h = -(p0 * p0.max(eps).ln() + p1 * p1.max(eps).ln()) / ln2;
            total = total + h;
            n += 1;
        }
    }
    (n > 0).then(|| total / T::from_usize_lossy(n))
}

/// Soft-binned calibration error. Bin centres sit at `(m + 1/2) / M` and
/// membership is a softmax over `-(r - c_m)^2 / T`.
pub fn soft_ece_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>, bins: usize, temperature: T, p: T) -> Result<Var, LossError> {
    if bins < 2 {
        return Err(LossError::InvalidSpec(format!("bins must be >= 2, got {bins}")));
    }
    let n = batch.len();
    let m_total = T::from_usize_lossy(bins);
    let centers = Matrix::from_fn(1, bins, |_, m| (T::from_usize_lossy(m) + T::lit(0.5)) / m_total);
    let centers = tape.leaf(centers);
    let d = tape.sub(batch.confidence, centers)?;
    let d2 = tape.mul(d, d)?;
    let logits = tape.scale(d2, -T::one() / temperature);
    let membership = tape.softmax_rows(logits);

    let sizes = tape.sum_rows(membership);
    let empty: Vec<bool> = tape.value(sizes).as_slice().iter().map(|&s| s < T::lit(EPS)).collect();
    let keep = Matrix::from_fn(1, bins, |_, m| if empty[m] { T::zero() } else { T::one() });
    let pad = Matrix::from_fn(1, bins, |_, m| if empty[m] { T::one() } else { T::zero() });
    let keep = tape.leaf(keep);
    let pad = tape.leaf(pad);
    let denom = tape.add(sizes, pad)?;

    let correct = tape.leaf(batch.mask(|i| batch.correct[i]));
    let hit_mass = tape.mul(membership, correct)?;
    let hits = tape.sum_rows(hit_mass);
    let acc = tape.div(hits, denom)?;
    let conf_mass = tape.mul(membership, batch.confidence)?;
    let conf_sum = tape.sum_rows(conf_mass);
    let conf = tape.div(conf_sum, denom)?;

    let gap = tape.sub(acc, conf)?;
    let gap = tape.abs(gap);
    let gap_p = tape.powf(gap, p);
    let weight = tape.scale(sizes, T::one() / T::from_usize_lossy(n));
    let weighted = tape.mul(weight, gap_p)?;
    let kept = tape.mul(weighted, keep)?;
    let total = tape.sum(kept);
    if p == T::one() {
        Ok(total)
    } else {
        Ok(tape.powf(total, T::one() / p))
    }
}

/// Kernel calibration error with a Laplacian kernel
/// `exp(-|r_i - r_j| / width)`.
pub fn mmce_loss<T: Scalar>(tape: &mut Tape<T>, batch: &BatchView<T>, kernel_width: T) -> Result<Var, LossError> {
    let n = batch.len();
    let m = batch.count(|i| batch.correct[i]);
    let r = batch.confidence;
    let rt = tape.transpose(r);
    let diff = tape.sub(r, rt)?;
    let dist = tape.abs(diff);
    let scaled = tape.scale(dist, -T::one() / kernel_width);
    let kernel = tape.exp(scaled);

    let correct = tape.leaf(batch.mask(|i| batch.correct[i]));
    let incorrect = tape.leaf(batch.mask(|i| !batch.correct[i]));
    // a_i = r_i on incorrect samples, b_i = 1 - r_i on correct ones.
    let a = tape.mul(r, incorrect)?;
    let one_minus_r = tape.rsub(T::one(), r);
    let b = tape.mul(one_minus_r, correct)?;

    let pair_sum = |tape: &mut Tape<T>, u: Var, v: Var| -> Result<Var, LossError> {
        let vt = tape.transpose(v);
        let outer = tape.matmul(u, vt)?;
        let weighted = tape.mul(outer, kernel)?;
        Ok(tape.sum(weighted))
    };

    let mut total = tape.constant(T::zero());
    let wrong = n - m;
    if wrong > 0 {
        let s = pair_sum(tape, a, a)?;
        let t = tape.scale(s, T::one() / T::from_usize_lossy(wrong * wrong));
        total = tape.add(total, t)?;
    }
    if m > 0 {
        let s = pair_sum(tape, b, b)?;
        let t = tape.scale(s, T::one() / T::from_usize_lossy(m * m));
        total = tape.add(total, t)?;
    }
    if m > 0 && wrong > 0 {
        let s = pair_sum(tape, b, a)?;
        let t = tape.scale(s, T::lit(-2.0) / T::from_usize_lossy(m * wrong));
        total = tape.add(total, t)?;
    }
    let clipped = tape.relu(total);
    Ok(tape.sqrt(clipped))
}

/// Loss nodes from one evaluation of the composite objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    /// `L_C`, or the weighted variant for confidence weighting.
    pub classification: Var,
    /// `L_N` when the strategy has one.
    pub extra: Option<Var>,
}

/// State that varies during training rather than living in `LossSpec`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossContext {
    /// AvUC threshold for the current epoch; `None` uses the `LossSpec` value.
    pub avuc_threshold: Option<f64>,
}

/// The strategy's additional term `L_N`, if any.
pub fn extra_term<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &BatchView<T>,
    spec: &LossSpec,
    ctx: &LossContext,
) -> Result<Option<Var>, LossError> {
    let v = match spec.strategy {
        Strategy::Baseline | Strategy::ConfWeight => return Ok(None),
        Strategy::Paired => paired_confidence_loss(tape, batch, T::lit(spec.margin()))?,
        Strategy::Probability => probability_loss(tape, batch)?,
        Strategy::Avuc => {
            let th = ctx.avuc_threshold.unwrap_or_else(|| spec.avuc_threshold());
            avuc_loss(tape, batch, T::lit(th))?
        }
        Strategy::SoftEce => soft_ece_loss(
            tape,
            batch,
            spec.bins(),
            T::lit(spec.temperature()),
            T::lit(spec.norm_order()),
        )?,
        Strategy::Mmce => mmce_loss(tape, batch, T::lit(spec.kernel_width()))?,
    };
    Ok(Some(v))
}

/// `L_RE + lambda_kl * L_KL + lambda_c * L_C`.
pub fn baseline_loss<T: Scalar>(
    tape: &mut Tape<T>,
    reconstruction: Var,
    kl: Var,
    batch: &BatchView<T>,
    spec: &LossSpec,
) -> Result<LossTerms, LossError> {
    let classification = classification_loss(tape, batch)?;
    let total = combine(tape, reconstruction, kl, classification, spec)?;
    Ok(LossTerms {
        total,
        reconstruction,
        kl,
        classification,
        extra: None,
    })
}

fn combine<T: Scalar>(tape: &mut Tape<T>, re: Var, kl: Var, cls: Var, spec: &LossSpec) -> Result<Var, LossError> {
    let kl_w = tape.scale(kl, T::lit(spec.lambda_kl));
    let c_w = tape.scale(cls, T::lit(spec.lambda_c));
    let s = tape.add(re, kl_w)?;
    Ok(tape.add(s, c_w)?)
}

/// Full objective for the configured strategy. A zero `lambda_n` drops the
/// extra term so the result is the baseline objective exactly.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    reconstruction: Var,
    kl: Var,
    batch: &BatchView<T>,
    spec: &LossSpec,
    ctx: &LossContext,
) -> Result<LossTerms, LossError> {
    let classification = match spec.strategy {
        Strategy::ConfWeight => weighted_classification_loss(tape, batch, T::lit(spec.weight_floor()))?,
        _ => classification_loss(tape, batch)?,
    };
    let mut total = combine(tape, reconstruction, kl, classification, spec)?;
    let mut extra = None;
    if spec.strategy.has_extra_term() && spec.lambda_n() != 0.0 {
        let ln = extra_term(tape, batch, spec, ctx)?.expect("strategy has an extra term");
        let weighted = tape.scale(ln, T::lit(spec.lambda_n()));
        total = tape.add(total, weighted)?;
        extra = Some(ln);
    }
    Ok(LossTerms {
        total,
        reconstruction,
        kl,
        classification,
        extra,
    })
}
