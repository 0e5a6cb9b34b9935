//! Feature-major activation tensors.
//!
//! Every activation is stored as `[channels, batch, height, width]`, so the
//! data of a tensor is directly a `channels × (batch·height·width)` matrix.
//! Dense activations use `height = width = 1`.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    /// Dense `[features, batch, 1, 1]` tensor.
    pub fn dense(features: usize, batch: usize, data: Vec<T>) -> Self {
        Self::from_vec([features, batch, 1, 1], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn batch(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Pixels per (channel, sample) plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Columns of the channel-major matrix view.
    pub fn cols(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + n) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, n, y, x)]
    }

    pub fn plane_slice(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let start = (c * self.shape[1] + n) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.plane();
        let start = (c * self.shape[1] + n) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select samples `idx` along the batch axis.
    pub fn gather_batch(&self, idx: &[usize]) -> Self {
        let [c, n, h, w] = self.shape;
        let p = h * w;
        let mut out = Tensor::zeros([c, idx.len(), h, w]);
        for ci in 0..c {
            for (j, &i) in idx.iter().enumerate() {
                assert!(i < n, "batch index out of range");
                let src = (ci * n + i) * p;
                let dst = (ci * idx.len() + j) * p;
                out.data[dst..dst + p].copy_from_slice(&self.data[src..src + p]);
            }
        }
        out
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let [c, _, h, w] = parts[0].shape;
        for t in parts {
            assert_eq!(
                (t.shape[0], t.shape[2], t.shape[3]),
                (c, h, w),
                "concat_batch shape mismatch"
            );
        }
        let n: usize = parts.iter().map(|t| t.shape[1]).sum();
        let p = h * w;
        let mut out = Tensor::zeros([c, n, h, w]);
        for ci in 0..c {
            let mut off = 0;
            for t in parts {
                let tn = t.shape[1];
                let src = ci * tn * p;
                let dst = (ci * n + off) * p;
                out.data[dst..dst + tn * p].copy_from_slice(&t.data[src..src + tn * p]);
                off += tn;
            }
        }
        out
    }

    /// Split the batch axis at `at`.
    pub fn split_batch(&self, at: usize) -> (Self, Self) {
        let n = self.shape[1];
        assert!(at <= n);
        let left: Vec<usize> = (0..at).collect();
        let right: Vec<usize> = (at..n).collect();
        (self.gather_batch(&left), self.gather_batch(&right))
    }

    /// Sample `n` as a standalone `[c, 1, h, w]` tensor.
    pub fn sample(&self, n: usize) -> Self {
        self.gather_batch(&[n])
    }

    /// Per-sample feature vector of a dense tensor.
    pub fn column(&self, n: usize) -> Vec<T> {
        let [f, b, h, w] = self.shape;
        assert_eq!(h * w, 1, "column() expects a dense tensor");
        (0..f).map(|i| self.data[i * b + n]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::<f32>::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f32>::from_vec([2, 2, 1, 2], (10..18).map(|v| v as f32).collect());
        let c = Tensor::concat_batch(&[&a, &b]);
        assert_eq!(c.shape, [2, 3, 1, 2]);
        assert_eq!(c.at(1, 0, 0, 1), 4.0);
        assert_eq!(c.at(1, 2, 0, 0), 16.0);
        let (l, r) = c.split_batch(1);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn column_reads_one_sample() {
        let t = Tensor::<f64>::dense(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.column(1), vec![2.0, 4.0, 6.0]);
    }
}
