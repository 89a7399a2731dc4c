use super::{DiffError, Matrix, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one bias-corrected Adam update with a per-parameter learning
    /// rate, then zeroes the gradients. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: impl Fn(&str) -> T) -> Result<(), DiffError> {
        params.check_finite_grads()?;
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        for ((name, value, grad), (m, v)) in params
            .iter_mut()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let rate = lr(name);
            let g = grad.as_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, x) in value.as_mut_slice().iter_mut().enumerate() {
                ms[k] = b1 * ms[k] + (one - b1) * g[k];
                vs[k] = b2 * vs[k] + (one - b2) * g[k] * g[k];
                let m_hat = ms[k] / c1;
                let v_hat = vs[k] / c2;
                *x = *x - rate * m_hat / (v_hat.sqrt() + eps);
            }
            grad.fill(T::zero());
        }
        Ok(())
    }
}
