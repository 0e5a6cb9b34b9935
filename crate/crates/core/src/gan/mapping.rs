//! Mapping network `f: Z → W`: pixel normalization followed by three fully
//! connected layers (the last one linear).

use deid_nn::{ParamSet, Scalar, Sequential, Tensor, Trace, LRELU_GAIN};
use rand::Rng;

const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Mapping {
    pub d_z: usize,
    pub d_w: usize,
    net: Sequential,
}

pub struct MappingTrace<T> {
    z: Tensor<T>,
    inv_rms: Vec<T>,
    net: Trace<T>,
}

impl<T: Scalar> MappingTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.net.output
    }
}

impl Mapping {
    pub fn new<T: Scalar, R: Rng>(params: &mut ParamSet<T>, d_z: usize, d_w: usize, rng: &mut R) -> Self {
        let mut net = Sequential::new();
        net.dense(params, "fc0", d_z, d_w, LRELU_GAIN, rng)
            .lrelu()
            .dense(params, "fc1", d_w, d_w, LRELU_GAIN, rng)
            .lrelu()
            .dense(params, "fc2", d_w, d_w, 1.0, rng);
        Mapping { d_z, d_w, net }
    }

    fn normalize<T: Scalar>(z: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let [f, n, _, _] = z.shape;
        let mut out = z.clone();
        let mut inv = Vec::with_capacity(n);
        for ni in 0..n {
            let ms: T = (0..f).map(|i| z.data[i * n + ni] * z.data[i * n + ni]).sum::<T>() / T::lit(f as f64);
            let r = T::one() / (ms + T::lit(PIXEL_NORM_EPS)).sqrt();
            for i in 0..f {
                out.data[i * n + ni] *= r;
            }
            inv.push(r);
        }
        (out, inv)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, z: &Tensor<T>) -> MappingTrace<T> {
        assert_eq!(z.channels(), self.d_z, "latent width mismatch");
        let (zn, inv_rms) = Self::normalize(z);
        MappingTrace {
            z: z.clone(),
            inv_rms,
            net: self.net.forward(p, zn),
        }
    }

    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, z: &Tensor<T>) -> Tensor<T> {
        assert_eq!(z.channels(), self.d_z, "latent width mismatch");
        self.net.infer(p, &Self::normalize(z).0)
    }

    /// Returns the gradient with respect to `z`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &MappingTrace<T>,
        g_w: Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let g_zn = self.net.backward(p, &trace.net, g_w, grads);
        let [f, n, _, _] = trace.z.shape;
        let mut g_z = g_zn.clone();
        for ni in 0..n {
            let r = trace.inv_rms[ni];
            let dot: T = (0..f).map(|i| g_zn.data[i * n + ni] * trace.z.data[i * n + ni]).sum();
            let k = r * r * r * dot / T::lit(f as f64);
            for i in 0..f {
                g_z.data[i * n + ni] = r * g_zn.data[i * n + ni] - k * trace.z.data[i * n + ni];
            }
        }
        g_z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        let m = Mapping::new(&mut p, 4, 3, &mut rng);
        p.fill_zero();
        let bias = p.id("fc2.bias").unwrap();
        p.data_mut(bias).copy_from_slice(&[0.5, -1.0, 2.0]);
        let z = Tensor::dense(4, 2, vec![1.0, 2.0, -3.0, 0.1, 0.4, 0.4, 9.0, -2.0]);
        let w = m.infer(&p, &z);
        assert_eq!(w.column(0), vec![0.5, -1.0, 2.0]);
        assert_eq!(w.column(1), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        let m = Mapping::new(&mut p, 5, 4, &mut rng);
        let z = Tensor::dense(5, 2, (0..10).map(|i| (i as f64 * 0.7).cos()).collect());
        let coef: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
        let f = |z: &Tensor<f64>| m.infer(&p, z).data.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
        let tr = m.forward(&p, &z);
        let g = m.backward(&p, &tr, Tensor::dense(4, 2, coef.clone()), None);
        for i in 0..10 {
            let mut a = z.clone();
            a.data[i] += 1e-6;
            let mut b = z.clone();
            b.data[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - g.data[i]).abs() < 1e-6 * num.abs().max(1.0), "{i}: {num} vs {}", g.data[i]);
        }
    }
}
