//! Post-hoc evaluation: calibration errors, Brier score, balanced accuracy,
//! McNemar's test and reliability tables.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::scalar::Scalar;

/// Bin count used throughout evaluation unless overridden.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no prediction records")]
    Empty,
    #[error("bin count must be at least 1, got {0}")]
    InvalidBins(usize),
    #[error("record sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("record sets disagree on the label of sample {0}")]
    LabelMismatch(usize),
    #[error("balanced accuracy needs both classes; only class {0} present")]
    SingleClass(u8),
}

/// One binary prediction. `probs[k]` is the probability of label `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord<T> {
    probs: [T; 2],
    label: u8,
}

impl<T: Scalar> PredictionRecord<T> {
    pub fn new(probs: [T; 2], label: u8) -> Self {
        debug_assert!(label <= 1);
        Self { probs, label }
    }

    /// Record for a model reporting `P(positive) = p`.
    pub fn from_positive(p: T, label: u8) -> Self {
        Self::new([T::one() - p, p], label)
    }

    pub fn probs(&self) -> [T; 2] {
        self.probs
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// Predicted label; an exact tie goes to the positive class.
    pub fn predicted(&self) -> u8 {
        u8::from(self.probs[1] >= self.probs[0])
    }

    /// Probability of the predicted class.
    pub fn confidence(&self) -> T {
        self.probs[self.predicted() as usize]
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinScheme {
    EqualWidth,
    Adaptive,
}

impl BinScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            BinScheme::EqualWidth => "equal-width",
            BinScheme::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bin<T> {
    /// Edges: the fixed interval for equal-width bins, the observed
    /// confidence range for adaptive bins (absent when empty).
    pub lower: Option<T>,
    pub upper: Option<T>,
    /// Record indices falling into the bin.
    pub members: Vec<usize>,
    pub mean_confidence: Option<T>,
    pub accuracy: Option<T>,
}

impl<T: Scalar> Bin<T> {
    pub fn count(&self) -> usize {
        self.members.len()
    }

    /// `|acc - conf|`, absent for an empty bin.
    pub fn gap(&self) -> Option<T> {
        Some((self.accuracy? - self.mean_confidence?).abs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinTable<T> {
    pub scheme: BinScheme,
    pub bins: Vec<Bin<T>>,
    pub total: usize,
}

impl<T: Scalar> BinTable<T> {
    fn weight(&self, bin: &Bin<T>) -> T {
        T::from_usize_lossy(bin.count()) / T::from_usize_lossy(self.total)
    }

    /// Count-weighted mean gap; empty bins contribute nothing.
    pub fn expected_error(&self) -> T {
        self.bins
            .iter()
            .filter_map(|b| b.gap().map(|g| self.weight(b) * g))
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn max_error(&self) -> T {
        self.bins
            .iter()
            .filter_map(Bin::gap)
            .fold(T::zero(), T::max)
    }

    pub fn overconfidence_error(&self) -> T {
        self.bins
            .iter()
            .filter_map(|b| {
                let conf = b.mean_confidence?;
                let acc = b.accuracy?;
                Some(self.weight(b) * conf * (conf - acc).max(T::zero()))
            })
            .fold(T::zero(), |a, b| a + b)
    }
}

fn check<T>(records: &[PredictionRecord<T>], bins: usize) -> Result<(), MetricsError> {
    if bins < 1 {
        return Err(MetricsError::InvalidBins(bins));
    }
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn fill_stats<T: Scalar>(records: &[PredictionRecord<T>], members: Vec<usize>, lower: Option<T>, upper: Option<T>) -> Bin<T> {
    if members.is_empty() {
        return Bin {
            lower,
            upper,
            members,
            mean_confidence: None,
            accuracy: None,
        };
    }
    let n = T::from_usize_lossy(members.len());
    let conf: T = members.iter().map(|&i| records[i].confidence()).sum();
    let hits = members.iter().filter(|&&i| records[i].correct()).count();
    Bin {
        lower,
        upper,
        mean_confidence: Some(conf / n),
        accuracy: Some(T::from_usize_lossy(hits) / n),
        members,
    }
}

/// Index of the equal-width bin `(m/M, (m+1)/M]` containing `r`, with the
/// first bin closed at 0. The result agrees with edges computed as `m / M`.
pub fn equal_width_index<T: Scalar>(r: T, bins: usize) -> usize {
    let m_total = T::from_usize_lossy(bins);
    let edge = |m: usize| T::from_usize_lossy(m) / m_total;
    let guess = (r * m_total).ceil().to_f64_lossy();
    let mut idx = if guess.is_finite() && guess >= 1.0 {
        (guess as usize - 1).min(bins - 1)
    } else {
        0
    };
    while idx > 0 && r <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && r > edge(idx + 1) {
        idx += 1;
    }
    idx
}

pub fn bin_equal_width<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<BinTable<T>, MetricsError> {
    check(records, bins)?;
    let mut members = vec![Vec::new(); bins];
    for (i, rec) in records.iter().enumerate() {
        members[equal_width_index(rec.confidence(), bins)].push(i);
    }
    let m_total = T::from_usize_lossy(bins);
    let bins = members
        .into_iter()
        .enumerate()
        .map(|(m, mem)| {
            let lo = T::from_usize_lossy(m) / m_total;
            let hi = T::from_usize_lossy(m + 1) / m_total;
            fill_stats(records, mem, Some(lo), Some(hi))
        })
        .collect();
    Ok(BinTable {
        scheme: BinScheme::EqualWidth,
        bins,
        total: records.len(),
    })
}

/// Equal-mass bins over records sorted by confidence (ties by index). With
/// `n = qM + k`, the first `k` bins hold `q + 1` records and the rest `q`.
pub fn bin_adaptive<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<BinTable<T>, MetricsError> {
    check(records, bins)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .confidence()
            .partial_cmp(&records[b].confidence())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let q = records.len() / bins;
    let extra = records.len() % bins;
    let mut start = 0;
    let mut out = Vec::with_capacity(bins);
    for m in 0..bins {
        let size = q + usize::from(m < extra);
        let mem = order[start..start + size].to_vec();
        start += size;
        let lower = mem.first().map(|&i| records[i].confidence());
        let upper = mem.last().map(|&i| records[i].confidence());
        out.push(fill_stats(records, mem, lower, upper));
    }
    Ok(BinTable {
        scheme: BinScheme::Adaptive,
        bins: out,
        total: records.len(),
    })
}

pub fn bin<T: Scalar>(records: &[PredictionRecord<T>], scheme: BinScheme, bins: usize) -> Result<BinTable<T>, MetricsError> {
    match scheme {
        BinScheme::EqualWidth => bin_equal_width(records, bins),
        BinScheme::Adaptive => bin_adaptive(records, bins),
    }
}

pub fn ece<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<T, MetricsError> {
    Ok(bin_equal_width(records, bins)?.expected_error())
}

pub fn aece<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<T, MetricsError> {
    Ok(bin_adaptive(records, bins)?.expected_error())
}

pub fn mce<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<T, MetricsError> {
    Ok(bin_equal_width(records, bins)?.max_error())
}

pub fn oe<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<T, MetricsError> {
    Ok(bin_equal_width(records, bins)?.overconfidence_error())
}

/// Mean over samples of the squared distance between the probability
/// vector and the one-hot label, summed over both classes (range `[0, 2]`).
pub fn brier<T: Scalar>(records: &[PredictionRecord<T>]) -> Result<T, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: T = records
        .iter()
        .map(|r| {
            let [p0, p1] = r.probs();
            let (o0, o1) = if r.label() == 1 {
                (T::zero(), T::one())
            } else {
                (T::one(), T::zero())
            };
            (p0 - o0).powi(2) + (p1 - o1).powi(2)
        })
        .sum();
    Ok(total / T::from_usize_lossy(records.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics<T> {
    pub sensitivity: Option<T>,
    pub specificity: Option<T>,
}

impl<T: Scalar> ClassificationMetrics<T> {
    pub fn balanced_accuracy(&self) -> Result<T, MetricsError> {
        match (self.sensitivity, self.specificity) {
            (Some(sen), Some(spe)) => Ok((sen + spe) / T::lit(2.0)),
            (None, _) => Err(MetricsError::SingleClass(0)),
            (_, None) => Err(MetricsError::SingleClass(1)),
        }
    }
}

pub fn classification_metrics<T: Scalar>(records: &[PredictionRecord<T>]) -> Result<ClassificationMetrics<T>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.label(), r.predicted()) {
            (1, 1) => tp += 1,
            (1, _) => fn_ += 1,
            (_, 0) => tn += 1,
            _ => fp += 1,
        }
    }
    let rate = |a: usize, b: usize| {
        (a + b > 0).then(|| T::from_usize_lossy(a) / T::from_usize_lossy(a + b))
    };
    Ok(ClassificationMetrics {
        sensitivity: rate(tp, fn_),
        specificity: rate(tn, fp),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McNemar {
    /// Samples `a` got right and `b` got wrong.
    pub a_only: usize,
    /// Samples `b` got right and `a` got wrong.
    pub b_only: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Continuity-corrected McNemar test on paired predictions (1 dof).
pub fn mcnemar<T: Scalar>(a: &[PredictionRecord<T>], b: &[PredictionRecord<T>]) -> Result<McNemar, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let (mut a_only, mut b_only) = (0usize, 0usize);
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.label() != rb.label() {
            return Err(MetricsError::LabelMismatch(i));
        }
        match (ra.correct(), rb.correct()) {
            (true, false) => a_only += 1,
            (false, true) => b_only += 1,
            _ => {}
        }
    }
    let discordant = a_only + b_only;
    if discordant == 0 {
        return Ok(McNemar {
            a_only,
            b_only,
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let diff = (a_only as f64 - b_only as f64).abs() - 1.0;
    let statistic = diff * diff / discordant as f64;
    let chi2 = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok(McNemar {
        a_only,
        b_only,
        statistic,
        p_value: chi2.sf(statistic),
    })
}

/// Every scalar metric reported per model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub aece: f64,
    pub oe: f64,
    pub mce: f64,
    pub brier: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub bacc: Option<f64>,
}

impl CalibrationReport {
    pub fn compute<T: Scalar>(records: &[PredictionRecord<T>], bins: usize) -> Result<Self, MetricsError> {
        let equal = bin_equal_width(records, bins)?;
        let adaptive = bin_adaptive(records, bins)?;
        let cls = classification_metrics(records)?;
        Ok(Self {
            ece: equal.expected_error().to_f64_lossy(),
            aece: adaptive.expected_error().to_f64_lossy(),
            oe: equal.overconfidence_error().to_f64_lossy(),
            mce: equal.max_error().to_f64_lossy(),
            brier: brier(records)?.to_f64_lossy(),
            sensitivity: cls.sensitivity.map(Scalar::to_f64_lossy),
            specificity: cls.specificity.map(Scalar::to_f64_lossy),
            bacc: cls.balanced_accuracy().ok().map(Scalar::to_f64_lossy),
        })
    }
}

/// One reliability-diagram row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub count: usize,
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn reliability_table<T: Scalar>(
    records: &[PredictionRecord<T>],
    scheme: BinScheme,
    bins: usize,
) -> Result<Vec<ReliabilityRow>, MetricsError> {
    let table = bin(records, scheme, bins)?;
    Ok(table
        .bins
        .iter()
        .enumerate()
        .map(|(m, b)| ReliabilityRow {
            bin: m,
            lower: b.lower.map(Scalar::to_f64_lossy),
            upper: b.upper.map(Scalar::to_f64_lossy),
            count: b.count(),
            confidence: b.mean_confidence.map(Scalar::to_f64_lossy),
            accuracy: b.accuracy.map(Scalar::to_f64_lossy),
        })
        .collect())
}
