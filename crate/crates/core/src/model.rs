//! Fully connected VAE whose latent code feeds a small softmax classifier.
//!
//! ```text
//! x -> hidden -> (mu, logvar) -> z -> hidden -> x_hat      (decoder)
//!                                 z -> hidden -> 2 logits  (classifier)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MinMaxScaler, Sample};
use crate::diffcore::{Bound, DiffError, Matrix, ParamSet, Tape, Var};
use crate::scalar::Scalar;

/// Bounds applied to the encoder's log-variance before sampling.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite activation in layer `{0}`")]
    NonFinite(&'static str),
    #[error("input has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("reconstruction target outside [0, 1]: {0}")]
    TargetRange(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub classifier_hidden: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: 32,
            latent_dim: 8,
            classifier_hidden: 32,
            activation: Activation::Tanh,
        }
    }
}

/// Parameter layout, in registration order.
const LAYERS: [&str; 14] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w_mu",
    "encoder.b_mu",
    "encoder.w_logvar",
    "encoder.b_logvar",
    "decoder.w1",
    "decoder.b1",
    "decoder.w2",
    "decoder.b2",
    "classifier.w1",
    "classifier.b1",
    "classifier.w2",
    "classifier.b2",
];

/// Which head a parameter belongs to, for per-head learning rates.
pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("classifier.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeClassifier<T> {
    arch: Architecture,
    params: ParamSet<T>,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub reconstruction: Var,
    pub mu: Var,
    /// Clamped log-variance.
    pub logvar: Var,
    pub z: Var,
    pub logits: Var,
    /// Row-wise softmax; column `k` is `P(label = k)`.
    pub probs: Var,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<T> {
    pub reconstruction: Matrix<T>,
    pub mu: Matrix<T>,
    pub logvar: Matrix<T>,
    pub z: Matrix<T>,
    pub probs: Matrix<T>,
}

impl<T: Scalar> ForwardResult<T> {
    /// `P(positive)` per row.
    pub fn positive_probs(&self) -> Vec<T> {
        (0..self.probs.rows()).map(|i| self.probs.get(i, 1)).collect()
    }
}

fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-limit..limit)))
}

impl<T: Scalar> VaeClassifier<T> {
    /// Xavier-uniform weights and zero biases from a seeded stream.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Architecture {
            input_dim: d,
            hidden: h,
            latent_dim: l,
            classifier_hidden: c,
            ..
        } = arch;
        let shapes = [
            (d, h),
            (1, h),
            (h, l),
            (1, l),
            (h, l),
            (1, l),
            (l, h),
            (1, h),
            (h, d),
            (1, d),
            (l, c),
            (1, c),
            (c, 2),
            (1, 2),
        ];
        let mut params = ParamSet::new();
        for (name, (r, cols)) in LAYERS.iter().zip(shapes) {
            let value = if r == 1 { Matrix::zeros(1, cols) } else { xavier(r, cols, &mut rng) };
            params.insert(*name, value).expect("layer names are unique");
        }
        Self { arch, params }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn layer(&self, bound: &Bound, name: &str) -> Var {
        bound.get(self.params.index_of(name).expect("known layer"))
    }

    fn dense(&self, tape: &mut Tape<T>, bound: &Bound, input: Var, prefix: &str, w: &str, b: &str) -> Result<Var, DiffError> {
        let w = self.layer(bound, &format!("{prefix}.{w}"));
        let b = self.layer(bound, &format!("{prefix}.{b}"));
        let xw = tape.matmul(input, w)?;
        tape.add(xw, b)
    }

    fn activate(&self, tape: &mut Tape<T>, v: Var) -> Var {
        match self.arch.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }

    fn finite(tape: &Tape<T>, v: Var, layer: &'static str) -> Result<(), ModelError> {
        if tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite(layer))
        }
    }

    /// Records a forward pass. `noise`, when given, is the `n x latent` draw
    /// used for `z = mu + exp(logvar / 2) * noise`; otherwise `z = mu`.
    pub fn forward_with_noise(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        noise: Option<&Matrix<T>>,
    ) -> Result<ForwardNodes, ModelError> {
        let (_, cols) = tape.shape(x);
        if cols != self.arch.input_dim {
            return Err(ModelError::InputDim {
                expected: self.arch.input_dim,
                got: cols,
            });
        }
        let pre = self.dense(tape, bound, x, "encoder", "w1", "b1")?;
        let hidden = self.activate(tape, pre);
        Self::finite(tape, hidden, "encoder.hidden")?;
        let mu = self.dense(tape, bound, hidden, "encoder", "w_mu", "b_mu")?;
        Self::finite(tape, mu, "encoder.mu")?;
        let raw_logvar = self.dense(tape, bound, hidden, "encoder", "w_logvar", "b_logvar")?;
        let logvar = tape.clamp(raw_logvar, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        Self::finite(tape, logvar, "encoder.logvar")?;

        let z = match noise {
            Some(eps) => {
                let eps = tape.leaf(eps.clone());
                let half = tape.scale(logvar, T::lit(0.5));
                let std = tape.exp(half);
                let shift = tape.mul(std, eps)?;
                tape.add(mu, shift)?
            }
            None => mu,
        };
        Self::finite(tape, z, "latent")?;

        let pre = self.dense(tape, bound, z, "decoder", "w1", "b1")?;
        let dh = self.activate(tape, pre);
        let out = self.dense(tape, bound, dh, "decoder", "w2", "b2")?;
        let reconstruction = tape.sigmoid(out);
        Self::finite(tape, reconstruction, "decoder.output")?;

        let pre = self.dense(tape, bound, z, "classifier", "w1", "b1")?;
        let ch = self.activate(tape, pre);
        let logits = self.dense(tape, bound, ch, "classifier", "w2", "b2")?;
        Self::finite(tape, logits, "classifier.logits")?;
        let probs = tape.softmax_rows(logits);
        Ok(ForwardNodes {
            reconstruction,
            mu,
            logvar,
            z,
            logits,
            probs,
        })
    }

    /// Standard-normal latent draw for a batch of `rows`.
    pub fn latent_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix<T> {
        Matrix::from_fn(rows, self.arch.latent_dim, |_, _| T::lit(rng.sample(StandardNormal)))
    }

    /// Records a forward pass, sampling the latent code when asked.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        rng: &mut R,
        sample_latent: bool,
    ) -> Result<ForwardNodes, ModelError> {
        let noise = sample_latent.then(|| self.latent_noise(tape.shape(x).0, rng));
        self.forward_with_noise(tape, bound, x, noise.as_ref())
    }

    /// Evaluates without keeping the graph.
    pub fn evaluate(&self, x: &Matrix<T>, noise: Option<&Matrix<T>>) -> Result<ForwardResult<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = self.forward_with_noise(&mut tape, &bound, xv, noise)?;
        Ok(ForwardResult {
            reconstruction: tape.value(f.reconstruction).clone(),
            mu: tape.value(f.mu).clone(),
            logvar: tape.value(f.logvar).clone(),
            z: tape.value(f.z).clone(),
            probs: tape.value(f.probs).clone(),
        })
    }

    /// Deterministic (`z = mu`) class probabilities.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        Ok(self.evaluate(x, None)?.probs)
    }
}

/// Scaled feature matrix for a batch of samples.
pub fn input_matrix<T: Scalar>(samples: &[Sample], scaler: &MinMaxScaler) -> Matrix<T> {
    let d = scaler.dim();
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        data.extend(scaler.transform(&s.x).into_iter().map(T::lit));
    }
    Matrix::from_vec(samples.len(), d, data)
}

/// Column of labels as scalars.
pub fn label_column<T: Scalar>(samples: &[Sample]) -> Matrix<T> {
    Matrix::from_fn(samples.len(), 1, |i, _| T::lit(f64::from(samples[i].label)))
}

/// Mean per-coordinate binary cross-entropy between targets in `[0, 1]`
/// and reconstructions.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, target: Var, reconstruction: Var) -> Result<Var, ModelError> {
    if let Some(bad) = tape
        .value(target)
        .as_slice()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(ModelError::TargetRange(bad.to_f64_lossy()));
    }
    let log_r = tape.log(reconstruction);
    let one_minus_r = tape.rsub(T::one(), reconstruction);
    let log_1r = tape.log(one_minus_r);
    let one_minus_x = tape.rsub(T::one(), target);
    let a = tape.mul(target, log_r)?;
    let b = tape.mul(one_minus_x, log_1r)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -T::one()))
}

/// KL divergence to a unit Gaussian: `-1/2 * mean_batch sum_l (1 + lv - mu^2 - e^lv)`.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var, ModelError> {
    let rows = tape.shape(mu).0;
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar);
    let a = tape.offset(logvar, T::one());
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, ev)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, T::lit(-0.5) / T::from_usize_lossy(rows)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON half of a checkpoint; the parameters live in a sibling blob of
/// little-endian `f64` values in `params` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<MinMaxScaler>,
}

/// Writes `<stem>.json` and `<stem>.bin`. Returns the manifest path.
pub fn save_checkpoint<T: Scalar>(
    path_stem: &Path,
    model: &VaeClassifier<T>,
    epoch: usize,
    seed: u64,
    scaler: Option<&MinMaxScaler>,
) -> Result<PathBuf, ModelError> {
    if let Some(parent) = path_stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let blob_path = path_stem.with_extension("bin");
    let json_path = path_stem.with_extension("json");
    let params = model.params();
    let mut blob = BufWriter::new(File::create(&blob_path)?);
    for v in params.flatten() {
        blob.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    blob.flush()?;
    let manifest = CheckpointManifest {
        architecture: model.architecture().clone(),
        epoch,
        seed,
        params: (0..params.len())
            .map(|i| ParamEntry {
                name: params.name(i).to_string(),
                rows: params.value(i).rows(),
                cols: params.value(i).cols(),
            })
            .collect(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        scaler: scaler.cloned(),
    };
    let mut f = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(json_path)
}

pub fn load_checkpoint<T: Scalar>(manifest_path: &Path) -> Result<(VaeClassifier<T>, CheckpointManifest), ModelError> {
    let manifest: CheckpointManifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
    let mut model = VaeClassifier::new(manifest.architecture.clone(), 0);
    let params = model.params();
    if params.len() != manifest.params.len() {
        return Err(ModelError::Checkpoint("parameter count mismatch".into()));
    }
    for (i, entry) in manifest.params.iter().enumerate() {
        let v = params.value(i);
        if entry.name != params.name(i) || (entry.rows, entry.cols) != v.shape() {
            return Err(ModelError::Checkpoint(format!("unexpected parameter `{}`", entry.name)));
        }
    }
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let mut bytes = Vec::new();
    File::open(blob_path)?.read_to_end(&mut bytes)?;
    let expected = params.num_scalars() * 8;
    if bytes.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "blob holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let flat: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    model.params_mut().assign_flat(&flat)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: 5,
            latent_dim: 2,
            classifier_hidden: 4,
            activation: Activation::Tanh,
        }
    }

    fn batch() -> Matrix<f64> {
        Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.3]])
    }

    #[test]
    fn deterministic_path_is_repeatable() {
        let m = VaeClassifier::<f64>::new(arch(), 1);
        let a = m.predict(&batch()).unwrap();
        let b = m.predict(&batch()).unwrap();
        assert_eq!(a, b);
        for i in 0..a.rows() {
            assert!((a.get(i, 0) + a.get(i, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_probs() {
        let mut m = VaeClassifier::<f64>::new(arch(), 1);
        let idx = m.params().index_of("classifier.w2").unwrap();
        m.params_mut().value_mut(idx).fill(0.0);
        let p = m.predict(&batch()).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn clamped_variance_keeps_z_near_mu() {
        let mut m = VaeClassifier::<f64>::new(arch(), 2);
        let w = m.params().index_of("encoder.w_logvar").unwrap();
        let b = m.params().index_of("encoder.b_logvar").unwrap();
        m.params_mut().value_mut(w).fill(0.0);
        m.params_mut().value_mut(b).fill(-1e6);
        let noise = Matrix::filled(2, 2, 1.0);
        let r = m.evaluate(&batch(), Some(&noise)).unwrap();
        assert!(r.logvar.as_slice().iter().all(|&v| v == LOGVAR_MIN));
        for (z, mu) in r.z.as_slice().iter().zip(r.mu.as_slice()) {
            assert!((z - mu).abs() <= (LOGVAR_MIN / 2.0).exp() + 1e-15);
        }
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let m = VaeClassifier::<f64>::new(arch(), 1);
        let x = Matrix::zeros(1, 4);
        assert!(matches!(m.predict(&x), Err(ModelError::InputDim { expected: 3, got: 4 })));
    }

    #[test]
    fn non_finite_layer_named() {
        let mut m = VaeClassifier::<f64>::new(arch(), 1);
        let idx = m.params().index_of("encoder.b_mu").unwrap();
        m.params_mut().value_mut(idx).fill(f64::NAN);
        assert!(matches!(m.predict(&batch()), Err(ModelError::NonFinite("encoder.mu"))));
    }

    #[test]
    fn kl_closed_form_values() {
        let mut t = Tape::<f64>::new();
        let mu = t.leaf(Matrix::zeros(3, 2));
        let lv = t.leaf(Matrix::zeros(3, 2));
        let kl = kl_loss(&mut t, mu, lv).unwrap();
        assert_eq!(t.scalar_value(kl), 0.0);

        let mut t = Tape::<f64>::new();
        let mu = t.leaf(Matrix::scalar(1.0));
        let lv = t.leaf(Matrix::scalar(0.0));
        let kl = kl_loss(&mut t, mu, lv).unwrap();
        assert!((t.scalar_value(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_of_binary_targets() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Matrix::row(&[0.0, 1.0, 1.0]));
        let loss = reconstruction_loss(&mut t, x, x).unwrap();
        assert!(t.scalar_value(loss).abs() < 1e-11);

        let mut t = Tape::<f64>::new();
        let x = t.leaf(Matrix::row(&[1.5]));
        let r = t.leaf(Matrix::row(&[0.5]));
        assert!(matches!(reconstruction_loss(&mut t, x, r), Err(ModelError::TargetRange(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = VaeClassifier::<f64>::new(arch(), 11);
        let path = save_checkpoint(&dir.path().join("best"), &m, 4, 11, None).unwrap();
        let (back, manifest) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!((manifest.epoch, manifest.seed), (4, 11));
        let blob = std::fs::read(dir.path().join("best.bin")).unwrap();
        assert_eq!(blob.len(), m.params().num_scalars() * 8);
        let first = f64::from_le_bytes(blob[..8].try_into().unwrap());
        assert_eq!(first, m.params().value(0).as_slice()[0]);
    }
}
