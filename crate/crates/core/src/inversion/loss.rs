//! The composite encoder objective
//! `total = code_term + λ_img · image_term + λ_df · region_term`,
//! written against two small traits so it can run on the real networks or
//! on hand-solvable miniatures.

use deid_nn::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_df: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_img: 1.0,
            lambda_df: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_img: f64, lambda_df: f64) -> Result<Self> {
        if !(lambda_img >= 0.0 && lambda_df >= 0.0) {
            return Err(arg(format!("loss weights must be ≥ 0, got ({lambda_img}, {lambda_df})")));
        }
        Ok(LossWeights { lambda_img, lambda_df })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub code_term: f64,
    pub image_term: f64,
    pub region_term: f64,
    pub total: f64,
}

/// A trainable map from images `[c, n, h, w]` to codes `[d, n, 1, 1]`.
pub trait CodeEncoder<T: Scalar> {
    type Trace;
    fn forward(&self, params: &ParamSet<T>, images: Tensor<T>) -> (Tensor<T>, Self::Trace);
    /// Accumulate parameter gradients for the code gradient `g_code`.
    fn backward(&self, params: &ParamSet<T>, trace: &Self::Trace, g_code: Tensor<T>, grads: &mut ParamSet<T>);
}

/// A frozen map from codes to images with a code gradient.
pub trait CodeGenerator<T: Scalar> {
    type Trace;
    fn generate(&self, codes: &Tensor<T>) -> Tensor<T>;
    fn forward(&self, codes: &Tensor<T>) -> (Tensor<T>, Self::Trace);
    fn backward(&self, trace: &Self::Trace, g_images: &Tensor<T>) -> Tensor<T>;
}

/// Real images and their region masks (`[1, n, h, w]`).
pub struct RealBatch<'a, T> {
    pub images: &'a Tensor<T>,
    pub masks: &'a Tensor<T>,
}

/// Evaluate the composite loss and, when `grads` is given, accumulate its
/// gradient with respect to the encoder parameters.
///
/// `codes` are sampled codes in the encoder's output space; `reals` carry
/// the pixel-supervised part. Either may be absent, and an absent part
/// contributes zero to every term it feeds.
pub fn composite_loss<T, E, G>(
    encoder: &E,
    params: &ParamSet<T>,
    generator: &G,
    codes: Option<&Tensor<T>>,
    reals: Option<RealBatch<'_, T>>,
    weights: LossWeights,
    mut grads: Option<&mut ParamSet<T>>,
) -> Result<LossBreakdown>
where
    T: Scalar,
    E: CodeEncoder<T>,
    G: CodeGenerator<T>,
{
    let codes = codes.filter(|c| c.batch() > 0);
    let reals = reals.filter(|r| r.images.batch() > 0);
    if codes.is_none() && reals.is_none() {
        return Err(arg("encoder loss needs sampled codes or real images"));
    }
    let mut out = LossBreakdown::default();

    if let Some(c) = codes {
        let images = generator.generate(c);
        let (c_hat, trace) = encoder.forward(params, images);
        assert_eq!(c_hat.shape, c.shape, "encoder output does not match code shape");
        let denom = T::lit(c.data.len() as f64);
        let mut sq = T::zero();
        let mut g = Tensor::zeros(c.shape);
        for ((gv, &a), &b) in g.data.iter_mut().zip(&c_hat.data).zip(&c.data) {
            let d = a - b;
            sq += d * d;
            *gv = T::lit(2.0) * d / denom;
        }
        out.code_term = (sq / denom).as_f64();
        if let Some(gr) = grads.as_deref_mut() {
            encoder.backward(params, &trace, g, gr);
        }
    }

    if let Some(r) = reals {
        let x = r.images;
        let m = r.masks;
        let [ch, n, h, w] = x.shape;
        if m.shape != [1, n, h, w] {
            return Err(arg(format!("mask shape {:?} does not match images {:?}", m.shape, x.shape)));
        }
        let plane = h * w;
        let mask_totals: Vec<T> = (0..n).map(|i| m.plane_slice(0, i).iter().copied().sum()).collect();
        if let Some(i) = mask_totals.iter().position(|&t| t <= T::zero()) {
            return Err(arg(format!("mask {i} of the real batch has zero total weight")));
        }
        let (code, enc_trace) = encoder.forward(params, x.clone());
        let (x_hat, gen_trace) = generator.forward(&code);
        assert_eq!(x_hat.shape, x.shape, "generator output does not match image shape");
        let lam_img = T::lit(weights.lambda_img);
        let lam_df = T::lit(weights.lambda_df);
        let nf = T::lit(n as f64);
        let full_denom = T::lit((n * ch * plane) as f64);
        let mut image_sum = T::zero();
        let mut region_sum = T::zero();
        let mut g = Tensor::zeros(x.shape);
        for i in 0..n {
            let mi = m.plane_slice(0, i);
            let region_denom = T::lit(ch as f64) * mask_totals[i];
            let mut region_i = T::zero();
            for c in 0..ch {
                let xs = x.plane_slice(c, i);
                let ys = x_hat.plane_slice(c, i);
                let gs = g.plane_slice_mut(c, i);
                for p in 0..plane {
                    let d = ys[p] - xs[p];
                    image_sum += d * d;
                    region_i += mi[p] * d * d;
                    gs[p] = T::lit(2.0) * d * (lam_img / full_denom + lam_df * mi[p] / (nf * region_denom));
                }
            }
            region_sum += region_i / region_denom;
        }
        out.image_term = (image_sum / full_denom).as_f64();
        out.region_term = (region_sum / nf).as_f64();
        if let Some(gr) = grads {
            if weights.lambda_img > 0.0 || weights.lambda_df > 0.0 {
                let g_code = generator.backward(&gen_trace, &g);
                encoder.backward(params, &enc_trace, g_code, gr);
            }
        }
    }

    out.total = out.code_term + weights.lambda_img * out.image_term + weights.lambda_df * out.region_term;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod miniature {
    //! One-pixel, one-channel linear pair: `g(w) = a·w`, `e(x) = b·x`.
    use super::*;

    pub struct LinearGenerator {
        pub a: f64,
    }

    impl CodeGenerator<f64> for LinearGenerator {
        type Trace = ();
        fn generate(&self, codes: &Tensor<f64>) -> Tensor<f64> {
            codes.map(|w| self.a * w)
        }
        fn forward(&self, codes: &Tensor<f64>) -> (Tensor<f64>, ()) {
            (self.generate(codes), ())
        }
        fn backward(&self, _: &(), g: &Tensor<f64>) -> Tensor<f64> {
            g.map(|v| self.a * v)
        }
    }

    pub struct LinearEncoder;

    impl CodeEncoder<f64> for LinearEncoder {
        type Trace = Tensor<f64>;
        fn forward(&self, p: &ParamSet<f64>, x: Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
            let b = p.data(0)[0];
            (x.map(|v| b * v), x)
        }
        fn backward(&self, _: &ParamSet<f64>, x: &Tensor<f64>, g: Tensor<f64>, grads: &mut ParamSet<f64>) {
            grads.data_mut(0)[0] += x.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn encoder_params(b: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("b", Tensor::full([1, 1, 1, 1], b));
        p
    }
}
