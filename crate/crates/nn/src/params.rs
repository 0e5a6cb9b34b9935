//! Named parameter storage shared by every network in the workspace.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

/// An ordered set of named parameter tensors. Gradients and optimizer
/// moments use a second `ParamSet` with identical layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    /// He-normal weights: `N(0, gain² / fan_in)`.
    pub fn add_he<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: [usize; 4], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.tensors[id].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Read scalar `i` of the flattened parameter vector.
    pub fn flat_get(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return t.data[i];
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_set(&mut self, mut i: usize, v: T) {
        for t in &mut self.tensors {
            if i < t.len() {
                t.data[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copy values from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<(), String> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .id(name)
                .map(|i| &other.tensors[i])
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if src.shape != t.shape {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape, src.shape
                ));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = ParamSet::<f64>::new();
        p.add_const("a", [2, 1, 1, 1], 1.0);
        p.add_const("b", [3, 1, 1, 1], 2.0);
        assert_eq!(p.numel(), 5);
        p.flat_set(3, 7.0);
        assert_eq!(p.flat_get(3), 7.0);
        assert_eq!(p.data(1), &[2.0, 7.0, 2.0]);
    }

    #[test]
    fn he_init_is_seeded() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        a.add_he("w", [4, 4, 3, 3], 36, 1.4, &mut ChaCha8Rng::seed_from_u64(1));
        b.add_he("w", [4, 4, 3, 3], 36, 1.4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn load_from_rejects_shape_mismatch() {
        let mut a = ParamSet::<f32>::new();
        a.add_const("w", [2, 1, 1, 1], 0.0);
        let mut b = ParamSet::<f32>::new();
        b.add_const("w", [3, 1, 1, 1], 0.0);
        assert!(a.load_from(&b).is_err());
    }
}
