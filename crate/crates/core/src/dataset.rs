//! Seeded synthetic binary tasks with closed-form posteriors.
//!
//! Two unit-covariance Gaussians sit at `±separation/2` along the first
//! axis. Given a class prior `π`, the clean posterior is
//! `sigmoid(logit(π) + separation * x0)`. Label noise flips each label with
//! probability `ρ`, which moves the posterior of the observed label to
//! `p(1 - ρ) + (1 - p)ρ`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameter: {0}")]
    InvalidParameter(String),
    #[error("split `{0}` does not contain both classes")]
    MissingClass(&'static str),
    #[error("malformed data file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Observed label, 1 for the positive class.
    pub label: u8,
    /// `P(label = 1 | x)` under the generating model.
    pub posterior: f64,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            validation: 1000,
            test: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

/// `(negatives, positives)`.
pub fn class_counts(samples: &[Sample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.is_positive()).count();
    (samples.len() - pos, pos)
}

impl DataSplit {
    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.x.len())
    }

    pub fn parts(&self) -> [(&'static str, &[Sample]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Checks the split invariants: every part non-empty with both classes.
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, part) in self.parts() {
            let (neg, pos) = class_counts(part);
            if neg == 0 || pos == 0 {
                return Err(DataError::MissingClass(name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianMixture {
    pub dim: usize,
    pub separation: f64,
    pub noise_rate: f64,
    /// Prior probability of the positive class before label noise.
    pub positive_fraction: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self {
            dim: 8,
            separation: 2.5,
            noise_rate: 0.15,
            positive_fraction: 0.5,
        }
    }
}

impl GaussianMixture {
    /// 9:1 negative-to-positive preset.
    pub fn imbalanced() -> Self {
        Self {
            positive_fraction: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidParameter(msg));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be positive and finite, got {}", self.separation));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate must lie in [0, 0.5), got {}", self.noise_rate));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        Ok(())
    }

    /// Posterior of the clean label given the features.
    pub fn clean_posterior(&self, x: &[f64]) -> f64 {
        let prior_logit = (self.positive_fraction / (1.0 - self.positive_fraction)).ln();
        let logit = prior_logit + self.separation * x[0];
        1.0 / (1.0 + (-logit).exp())
    }

    /// Posterior of the observed (possibly flipped) label.
    pub fn posterior(&self, x: &[f64]) -> f64 {
        let p = self.clean_posterior(x);
        let rho = self.noise_rate;
        p * (1.0 - rho) + (1.0 - p) * rho
    }

    fn draw(&self, class: u8, rng: &mut ChaCha8Rng) -> Sample {
        let shift = if class == 1 { 0.5 } else { -0.5 } * self.separation;
        let mut x: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        x[0] += shift;
        let flip = rng.random::<f64>() < self.noise_rate;
        let label = if flip { 1 - class } else { class };
        let posterior = self.posterior(&x);
        Sample { x, label, posterior }
    }

    fn draw_part(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let positives = ((n as f64 * self.positive_fraction).round() as usize).clamp(1, n - 1);
        let mut classes: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
        classes.shuffle(rng);
        classes.into_iter().map(|c| self.draw(c, rng)).collect()
    }

    /// Draws disjoint train/validation/test parts. Clean class counts are
    /// stratified per part; observed labels then pass through label noise.
    pub fn generate(&self, sizes: SplitSizes, seed: u64) -> Result<DataSplit, DataError> {
        self.validate()?;
        if sizes.total() < 40 {
            return Err(DataError::InvalidParameter(format!(
                "need at least 40 samples in total, got {}",
                sizes.total()
            )));
        }
        if sizes.train < 2 || sizes.validation < 2 || sizes.test < 2 {
            return Err(DataError::InvalidParameter(
                "every split needs at least two samples".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = DataSplit {
            train: self.draw_part(sizes.train, &mut rng),
            validation: self.draw_part(sizes.validation, &mut rng),
            test: self.draw_part(sizes.test, &mut rng),
            seed,
        };
        split.validate()?;
        Ok(split)
    }

    /// Unlimited stream of i.i.d. samples without stratification.
    pub fn sample_iid(&self, n: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let class = u8::from(rng.random::<f64>() < self.positive_fraction);
                self.draw(class, &mut rng)
            })
            .collect())
    }
}

/// Mean accuracy of the Bayes-optimal rule, averaged over the samples.
pub fn expected_bayes_accuracy(samples: &[Sample]) -> f64 {
    samples.iter().map(|s| s.posterior.max(1.0 - s.posterior)).sum::<f64>() / samples.len() as f64
}

/// Adds isotropic Gaussian noise to the features. Label and recorded
/// posterior are carried over unchanged.
pub fn perturb<R: Rng + ?Sized>(sample: &Sample, sigma: f64, rng: &mut R) -> Result<Sample, DataError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(sample.clone());
    }
    let x = sample
        .x
        .iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Sample {
        x,
        label: sample.label,
        posterior: sample.posterior,
    })
}

/// Per-coordinate min-max scaling into `[0, 1]`, fitted on training data.
/// Values outside the fitted range are clamped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(samples: &[Sample]) -> Result<Self, DataError> {
        let dim = samples
            .first()
            .map(|s| s.x.len())
            .ok_or_else(|| DataError::InvalidParameter("cannot fit a scaler on no samples".into()))?;
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for s in samples {
            if s.x.len() != dim {
                return Err(DataError::Malformed(format!(
                    "feature length {} differs from {}",
                    s.x.len(),
                    dim
                )));
            }
            for (k, &v) in s.x.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect()
    }
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    h.push("label".into());
    h.push("posterior".into());
    h
}

/// Writes `x0..x{d-1},label,posterior`.
pub fn write_csv(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header(dim))?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(s.label.to_string());
        rec.push(format!("{:?}", s.posterior));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Sample>, DataError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let cols = r.headers()?.len();
    if cols < 3 {
        return Err(DataError::Malformed(format!("{}: too few columns", path.display())));
    }
    let expected = header(cols - 2);
    if r.headers()?.iter().ne(expected.iter().map(String::as_str)) {
        return Err(DataError::Malformed(format!("{}: unexpected header", path.display())));
    }
    let dim = cols - 2;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64, DataError> {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| DataError::Malformed(format!("{}: {e}", path.display())))
        };
        let x = (0..dim).map(num).collect::<Result<Vec<_>, _>>()?;
        let label = match rec[dim].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(DataError::Malformed(format!("label `{other}` not in {{0,1}}"))),
        };
        let posterior = num(dim + 1)?;
        out.push(Sample { x, label, posterior });
    }
    Ok(out)
}

/// Sidecar describing a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: GaussianMixture,
    pub sizes: SplitSizes,
    pub seed: u64,
    pub files: Vec<String>,
}

const SPLIT_FILES: [&str; 3] = ["train.csv", "validation.csv", "test.csv"];

/// Writes the three split CSVs and `manifest.json` into `dir`.
pub fn save_split(
    dir: &Path,
    split: &DataSplit,
    generator: &GaussianMixture,
    sizes: SplitSizes,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    for ((_, part), file) in split.parts().into_iter().zip(SPLIT_FILES) {
        write_csv(&dir.join(file), part)?;
    }
    let manifest = DatasetManifest {
        generator: generator.clone(),
        sizes,
        seed: split.seed,
        files: SPLIT_FILES.iter().map(|s| s.to_string()).collect(),
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<(DataSplit, DatasetManifest), DataError> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let split = DataSplit {
        train: read_csv(&dir.join(SPLIT_FILES[0]))?,
        validation: read_csv(&dir.join(SPLIT_FILES[1]))?,
        test: read_csv(&dir.join(SPLIT_FILES[2]))?,
        seed: manifest.seed,
    };
    split.validate()?;
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SplitSizes {
        SplitSizes {
            train: 200,
            validation: 50,
            test: 50,
        }
    }

    #[test]
    fn degenerate_parameters_rejected() {
        let zero_sep = GaussianMixture {
            separation: 0.0,
            ..Default::default()
        };
        assert!(zero_sep.generate(small(), 1).is_err());
        let half_noise = GaussianMixture {
            noise_rate: 0.5,
            ..Default::default()
        };
        assert!(half_noise.generate(small(), 1).is_err());
        let tiny = SplitSizes {
            train: 20,
            validation: 5,
            test: 5,
        };
        assert!(GaussianMixture::default().generate(tiny, 1).is_err());
    }

    #[test]
    fn midpoint_posterior_is_half() {
        let g = GaussianMixture {
            dim: 1,
            separation: 2.0,
            noise_rate: 0.0,
            positive_fraction: 0.5,
        };
        assert!((g.posterior(&[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn separable_limit_has_bayes_accuracy_one() {
        let g = GaussianMixture {
            separation: 40.0,
            noise_rate: 0.0,
            ..Default::default()
        };
        let split = g.generate(small(), 3).unwrap();
        assert!(expected_bayes_accuracy(&split.test) > 0.999_999);
        for s in &split.test {
            assert_eq!(s.label == 1, s.posterior > 0.5);
        }
    }

    #[test]
    fn same_seed_same_split() {
        let g = GaussianMixture::default();
        assert_eq!(g.generate(small(), 9).unwrap(), g.generate(small(), 9).unwrap());
        assert_ne!(g.generate(small(), 9).unwrap(), g.generate(small(), 10).unwrap());
    }

    #[test]
    fn imbalanced_preset_ratio() {
        let split = GaussianMixture {
            noise_rate: 0.0,
            ..GaussianMixture::imbalanced()
        }
        .generate(SplitSizes::default(), 4)
        .unwrap();
        let (neg, pos) = class_counts(&split.train);
        assert_eq!((neg, pos), (3600, 400));
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let s = Sample {
            x: vec![0.1, -2.0],
            label: 1,
            posterior: 0.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&s, 0.0, &mut rng).unwrap(), s);
        assert!(perturb(&s, -1.0, &mut rng).is_err());
    }

    #[test]
    fn perturb_is_reproducible_and_unbiased() {
        let s = Sample {
            x: vec![0.3, -1.0, 2.0],
            label: 0,
            posterior: 0.2,
        };
        let a = perturb(&s, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = perturb(&s, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.label, a.posterior), (0, 0.2));

        let sigma = 0.1;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mean = vec![0.0; 3];
        for _ in 0..n {
            let p = perturb(&s, sigma, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&p.x) {
                *m += v / n as f64;
            }
        }
        for (m, v) in mean.iter().zip(&s.x) {
            assert!((m - v).abs() < 3.0 * sigma / 100.0);
        }
    }

    #[test]
    fn scaler_maps_into_unit_interval() {
        let split = GaussianMixture::default().generate(small(), 2).unwrap();
        let scaler = MinMaxScaler::fit(&split.train).unwrap();
        for s in split.test.iter().chain(&split.train) {
            assert!(scaler.transform(&s.x).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GaussianMixture::default();
        let split = g.generate(small(), 8).unwrap();
        save_split(dir.path(), &split, &g, small()).unwrap();
        let (back, manifest) = load_split(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(manifest.seed, 8);
        let text = std::fs::read_to_string(dir.path().join("test.csv")).unwrap();
        assert!(text.starts_with("x0,x1,x2,x3,x4,x5,x6,x7,label,posterior\n"));
    }
}
