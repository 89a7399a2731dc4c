use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::dataset::{load_split, DataSplit, GaussianMixture, SplitSizes};
use crate::losses::{LossSpec, Strategy};
use crate::metrics::DEFAULT_BINS;
use crate::model::Architecture;
use crate::uncertainty::{UncertaintyParams, DEFAULT_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    MaxValBacc,
    MinValEce,
}

impl SelectionCriterion {
    pub const ALL: [SelectionCriterion; 2] = [SelectionCriterion::MaxValBacc, SelectionCriterion::MinValEce];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionCriterion::MaxValBacc => "max-val-bacc",
            SelectionCriterion::MinValEce => "min-val-ece",
        }
    }

    /// Whether `candidate` beats `incumbent`. Strict, so ties keep the
    /// earlier epoch; NaN never wins.
    pub fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionCriterion::MaxValBacc => candidate > incumbent || (incumbent.is_nan() && !candidate.is_nan()),
            SelectionCriterion::MinValEce => candidate < incumbent || (incumbent.is_nan() && !candidate.is_nan()),
        }
    }
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionCriterion {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown selection criterion `{s}`")))
    }
}

/// Where the data comes from: a generated mixture, or a directory written
/// by `save_split`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub generator: GaussianMixture,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: GaussianMixture::default(),
            sizes: SplitSizes::default(),
            seed: 0,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<DataSplit, HarnessError> {
        match &self.path {
            Some(dir) => Ok(load_split(dir)?.0),
            None => Ok(self.generator.generate(self.sizes, self.seed)?),
        }
    }

    pub fn dim(&self) -> usize {
        self.generator.dim
    }
}

/// Every strategy on the shared baseline weights, each with its own
/// extra-term settings.
pub fn preset_strategies() -> Vec<LossSpec> {
    let spec = |s: Strategy, kv: &[(&str, f64)]| {
        kv.iter()
            .try_fold(LossSpec::new(s), |acc, &(k, v)| acc.with(k, v))
            .expect("preset keys are valid")
    };
    vec![
        spec(Strategy::Baseline, &[]),
        spec(Strategy::Paired, &[("lambda_n", 0.4), ("margin", 0.8)]),
        spec(Strategy::Probability, &[("lambda_n", 1.2)]),
        spec(Strategy::ConfWeight, &[("weight_floor", 2.0)]),
        spec(Strategy::Avuc, &[("lambda_n", 3.0)]),
        spec(Strategy::SoftEce, &[("lambda_n", 1.5), ("temperature", 0.01)]),
        spec(Strategy::Mmce, &[("lambda_n", 2.0)]),
    ]
}

fn default_strategies() -> Vec<LossSpec> {
    preset_strategies()
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    25
}
fn default_lr() -> f64 {
    1e-3
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_folds() -> usize {
    2
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_warmup() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<LossSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_vae: f64,
    #[serde(default = "default_lr")]
    pub lr_classifier: f64,
    /// Criterion for grid search; suites always report both.
    #[serde(default = "default_selection")]
    pub selection: SelectionCriterion,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Hyperparameter name to candidate values.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_folds")]
    pub inner_folds: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_samples")]
    pub uncertainty_samples: usize,
    /// Aleatoric input noise; defaults to a tenth of the class separation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aleatoric_sigma: Option<f64>,
    /// Latent draws per sample when estimating `C_i` during training.
    #[serde(default = "default_samples")]
    pub conf_weight_samples: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_warmup")]
    pub avuc_warmup_epochs: usize,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
    /// Worker threads for independent jobs; `None` uses every core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_selection() -> SelectionCriterion {
    SelectionCriterion::MaxValBacc
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// The subset of the config a single training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_classifier: f64,
    pub bins: usize,
    pub avuc_warmup_epochs: usize,
    pub conf_weight_samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        ExperimentConfig::default().train_settings()
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies must be nonempty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_vae >= 0.0 && self.lr_classifier >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.bins == 0 {
            return bad("bins must be positive".into());
        }
        if self.uncertainty_samples == 0 || self.conf_weight_samples == 0 {
            return bad("uncertainty sample counts must be positive".into());
        }
        if self.inner_folds < 2 {
            return bad(format!("inner_folds must be at least 2, got {}", self.inner_folds));
        }
        if let Some(s) = self.aleatoric_sigma {
            if !(s >= 0.0) {
                return bad(format!("aleatoric_sigma must be >= 0, got {s}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if self.dataset.path.is_none() {
            self.dataset.generator.validate()?;
            if self.architecture.input_dim != self.dataset.dim() {
                return bad(format!(
                    "architecture.input_dim {} does not match dataset dim {}",
                    self.architecture.input_dim,
                    self.dataset.dim()
                ));
            }
        }
        for key in self.grid.keys() {
            if !LossSpec::KEYS.contains(&key.as_str()) {
                return bad(format!("grid key `{key}` is not a loss hyperparameter"));
            }
        }
        for spec in &self.strategies {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            architecture: self.architecture.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_vae: self.lr_vae,
            lr_classifier: self.lr_classifier,
            bins: self.bins,
            avuc_warmup_epochs: self.avuc_warmup_epochs,
            conf_weight_samples: self.conf_weight_samples,
        }
    }

    pub fn aleatoric_sigma(&self) -> f64 {
        self.aleatoric_sigma
            .unwrap_or(0.1 * self.dataset.generator.separation)
    }

    pub fn uncertainty_params(&self) -> UncertaintyParams {
        UncertaintyParams {
            samples: self.uncertainty_samples,
            sigma: self.aleatoric_sigma(),
        }
    }

    /// SHA-256 over the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.workers = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.architecture.classifier_hidden), (50, 25, 32));
        assert_eq!(c.dataset.sizes, SplitSizes::default());
        assert!((c.aleatoric_sigma() - 0.25).abs() < 1e-15);
        assert_eq!(c.strategies.len(), Strategy::ALL.len());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_grid_key_rejected() {
        let mut c = ExperimentConfig::default();
        c.grid.insert("learning_rate".into(), vec![0.1]);
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn empty_seeds_rejected() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seeds": []}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.epochs = 3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn criterion_ties_keep_incumbent() {
        assert!(!SelectionCriterion::MaxValBacc.improves(0.5, 0.5));
        assert!(SelectionCriterion::MinValEce.improves(0.1, 0.2));
        assert!(!SelectionCriterion::MinValEce.improves(f64::NAN, 0.2));
        assert_eq!("min-val-ece".parse::<SelectionCriterion>().unwrap(), SelectionCriterion::MinValEce);
    }
}
