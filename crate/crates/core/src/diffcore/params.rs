use super::{DiffError, Matrix, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct Param<T> {
    name: String,
    value: Matrix<T>,
    grad: Matrix<T>,
}

/// Named trainable matrices, iterated in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

/// Tape handles for every parameter of a [`ParamSet`], in set order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<usize, DiffError> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(DiffError::DuplicateName(name));
        }
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            value,
            grad: Matrix::zeros(r, c),
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn value(&self, index: usize) -> &Matrix<T> {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Matrix<T> {
        &mut self.params[index].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.index_of(name).map(|i| self.value(i))
    }

    pub fn grad(&self, index: usize) -> &Matrix<T> {
        &self.params[index].grad
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Adds the tape gradients of bound parameters into the set.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad.add_assign(tape.grad(v));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// First parameter whose gradient holds a NaN or infinity.
    pub fn check_finite_grads(&self) -> Result<(), DiffError> {
        match self.params.iter().find(|p| !p.grad.is_finite()) {
            Some(p) => Err(DiffError::NonFiniteGradient(p.name.clone())),
            None => Ok(()),
        }
    }

    /// Concatenated values in set order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.as_slice().iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.grad.as_slice().iter().copied()).collect()
    }

    /// Overwrites values from a flat buffer laid out as [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), DiffError> {
        let total = self.num_scalars();
        if flat.len() != total {
            return Err(DiffError::ShapeMismatch {
                op: "assign_flat",
                left: (total, 1),
                right: (flat.len(), 1),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub(super) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix<T>, &mut Matrix<T>)> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut p.value, &mut p.grad))
    }

    pub(super) fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.value.shape()).collect()
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Matrix::zeros(1, 1)).unwrap();
        assert!(matches!(ps.insert("w", Matrix::zeros(2, 2)), Err(DiffError::DuplicateName(_))));
    }

    #[test]
    fn every_reachable_param_gets_grad() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("a", Matrix::from_rows(&[vec![1.0, 2.0]])).unwrap();
        ps.insert("b", Matrix::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let prod = tape.mul(bound.get(0), bound.get(1)).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        ps.accumulate_grads(&tape, &bound);
        assert_eq!(ps.grad(0).as_slice(), &[3.0, 3.0]);
        assert_eq!(ps.grad(1).item(), 3.0);
    }

    #[test]
    fn flat_roundtrip() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("a", Matrix::zeros(2, 2)).unwrap();
        ps.insert("b", Matrix::zeros(1, 3)).unwrap();
        let flat: Vec<f64> = (0..7).map(f64::from).collect();
        ps.assign_flat(&flat).unwrap();
        assert_eq!(ps.flatten(), flat);
        assert!(ps.assign_flat(&flat[..3]).is_err());
    }
}
