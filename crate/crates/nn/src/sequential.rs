//! Feed-forward stacks with explicit forward, backward and tangent passes.
//!
//! Besides ordinary backpropagation a [`Sequential`] can compute the exact
//! parameter gradient of the R1 penalty `γ/2 · mean ‖∇ₓ f(x)‖²` without
//! double backpropagation. For a stack of linear maps and leaky ReLUs the
//! input gradient is linear in every weight tensor once the activation
//! masks are fixed, and the gradient of the penalty with respect to a weight
//! `W_k` is the usual weight gradient formed from the tangent `P_k v`
//! (the penalty's input-gradient pushed forward through the linearized
//! layers below `k`) and the backward signal arriving at layer `k`'s output.
//! Biases receive no R1 gradient.

use rand::Rng;

use crate::ops;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Same-padded stride-1 convolution.
    Conv {
        w: ParamId,
        b: ParamId,
        cin: usize,
        cout: usize,
        k: usize,
    },
    /// Fully connected layer on a `[features, batch, 1, 1]` tensor.
    Dense {
        w: ParamId,
        b: ParamId,
        fin: usize,
        fout: usize,
    },
    LeakyRelu,
    AvgPool2,
    Upsample2,
    Flatten,
    /// `lrelu(x + conv₂(lrelu(conv₁(x))))` with `c` channels.
    Residual {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        c: usize,
        k: usize,
    },
}

impl Layer {
    fn has_weights(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. } | Layer::Residual { .. })
    }
}

/// Activations recorded by [`Sequential::forward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Input of every layer, in order.
    pub inputs: Vec<Tensor<T>>,
    /// Internal activations of residual layers (`[h1, a1, s]`), empty otherwise.
    aux: Vec<Vec<Tensor<T>>>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

fn slope<T: Scalar>() -> T {
    T::lit(LRELU_SLOPE)
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv<T: Scalar, R: Rng>(
        &mut self,
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut R,
    ) -> &mut Self {
        let w = params.add_he(format!("{name}.weight"), [cout, cin, k, k], cin * k * k, gain, rng);
        let b = params.add_const(format!("{name}.bias"), [cout, 1, 1, 1], 0.0);
        self.layers.push(Layer::Conv { w, b, cin, cout, k });
        self
    }

    pub fn dense<T: Scalar, R: Rng>(
        &mut self,
        params: &mut ParamSet<T>,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut R,
    ) -> &mut Self {
        let w = params.add_he(format!("{name}.weight"), [fout, fin, 1, 1], fin, gain, rng);
        let b = params.add_const(format!("{name}.bias"), [fout, 1, 1, 1], 0.0);
        self.layers.push(Layer::Dense { w, b, fin, fout });
        self
    }

    pub fn residual<T: Scalar, R: Rng>(
        &mut self,
        params: &mut ParamSet<T>,
        name: &str,
        c: usize,
        k: usize,
        rng: &mut R,
    ) -> &mut Self {
        let w1 = params.add_he(format!("{name}.conv1.weight"), [c, c, k, k], c * k * k, LRELU_GAIN, rng);
        let b1 = params.add_const(format!("{name}.conv1.bias"), [c, 1, 1, 1], 0.0);
        // Second conv starts small so each block begins close to identity.
        let w2 = params.add_he(format!("{name}.conv2.weight"), [c, c, k, k], c * k * k, 0.25, rng);
        let b2 = params.add_const(format!("{name}.conv2.bias"), [c, 1, 1, 1], 0.0);
        self.layers.push(Layer::Residual { w1, b1, w2, b2, c, k });
        self
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn lrelu(&mut self) -> &mut Self {
        self.push(Layer::LeakyRelu)
    }

    pub fn pool(&mut self) -> &mut Self {
        self.push(Layer::AvgPool2)
    }

    pub fn flatten(&mut self) -> &mut Self {
        self.push(Layer::Flatten)
    }

    /// True when every layer admits the exact R1 computation.
    pub fn supports_r1(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::Residual { .. }))
    }

    fn apply<T: Scalar>(layer: &Layer, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        match *layer {
            Layer::Conv { w, b, cout, k, .. } => (ops::conv2d(x, p.data(w), Some(p.data(b)), cout, k), vec![]),
            Layer::Dense { w, b, fin, fout } => {
                assert_eq!(x.channels(), fin, "dense input width mismatch");
                (ops::conv2d(x, p.data(w), Some(p.data(b)), fout, 1), vec![])
            }
            Layer::LeakyRelu => (ops::leaky_relu(x, slope()), vec![]),
            Layer::AvgPool2 => (ops::avg_pool2(x), vec![]),
            Layer::Upsample2 => (ops::upsample2(x), vec![]),
            Layer::Flatten => (ops::flatten(x), vec![]),
            Layer::Residual { w1, b1, w2, b2, c, k } => {
                let h1 = ops::conv2d(x, p.data(w1), Some(p.data(b1)), c, k);
                let a1 = ops::leaky_relu(&h1, slope());
                let mut s = ops::conv2d(&a1, p.data(w2), Some(p.data(b2)), c, k);
                s.add_assign(x);
                let y = ops::leaky_relu(&s, slope());
                (y, vec![h1, a1, s])
            }
        }
    }

    /// Forward pass without keeping activations.
    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = Self::apply(layer, p, &cur).0;
        }
        cur
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Trace<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let (next, a) = Self::apply(layer, p, &cur);
            inputs.push(cur);
            aux.push(a);
            cur = next;
        }
        Trace { inputs, aux, output: cur }
    }

    /// Backpropagate `gy` through the recorded pass, returning the input
    /// gradient. Parameter gradients are accumulated when `grads` is given.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &Trace<T>,
        gy: Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        self.backward_impl(p, trace, gy, grads, false).0
    }

    /// Like [`Self::backward`] but also returns the gradient arriving at each
    /// layer's output.
    pub fn backward_recording<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &Trace<T>,
        gy: Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        self.backward_impl(p, trace, gy, grads, true)
    }

    fn backward_impl<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &Trace<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
        record: bool,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        assert_eq!(gy.shape, trace.output.shape, "output gradient shape mismatch");
        let mut out_grads = Vec::new();
        if record {
            out_grads.resize(self.layers.len(), Tensor::zeros([0, 0, 0, 0]));
        }
        let mut g = gy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            if record {
                out_grads[i] = g.clone();
            }
            g = match *layer {
                Layer::Conv { w, b, cin, k, .. } => {
                    if let Some(gr) = grads.as_deref_mut() {
                        ops::conv2d_weight_grad(x, &g, k, gr.data_mut(w));
                        ops::bias_grad(&g, gr.data_mut(b));
                    }
                    ops::conv2d_backward_input(&g, p.data(w), cin, k)
                }
                Layer::Dense { w, b, fin, .. } => {
                    if let Some(gr) = grads.as_deref_mut() {
                        ops::conv2d_weight_grad(x, &g, 1, gr.data_mut(w));
                        ops::bias_grad(&g, gr.data_mut(b));
                    }
                    ops::conv2d_backward_input(&g, p.data(w), fin, 1)
                }
                Layer::LeakyRelu => ops::leaky_relu_backward(x, &g, slope()),
                Layer::AvgPool2 => ops::avg_pool2_backward(&g),
                Layer::Upsample2 => ops::upsample2_backward(&g),
                Layer::Flatten => {
                    let [c, _, h, w] = x.shape;
                    ops::unflatten(&g, c, h, w)
                }
                Layer::Residual { w1, b1, w2, b2, c, k } => {
                    let aux = &trace.aux[i];
                    let (h1, a1, s) = (&aux[0], &aux[1], &aux[2]);
                    let gs = ops::leaky_relu_backward(s, &g, slope());
                    let ga1 = ops::conv2d_backward_input(&gs, p.data(w2), c, k);
                    let gh1 = ops::leaky_relu_backward(h1, &ga1, slope());
                    if let Some(gr) = grads.as_deref_mut() {
                        ops::conv2d_weight_grad(a1, &gs, k, gr.data_mut(w2));
                        ops::bias_grad(&gs, gr.data_mut(b2));
                        ops::conv2d_weight_grad(x, &gh1, k, gr.data_mut(w1));
                        ops::bias_grad(&gh1, gr.data_mut(b1));
                    }
                    let mut gx = ops::conv2d_backward_input(&gh1, p.data(w1), c, k);
                    gx.add_assign(&gs);
                    gx
                }
            };
        }
        (g, out_grads)
    }

    /// Push a tangent through the network linearized at `trace` (activation
    /// masks fixed, biases dropped). Returns the tangent at every layer input.
    pub fn tangent<T: Scalar>(&self, p: &ParamSet<T>, trace: &Trace<T>, t0: Tensor<T>) -> Vec<Tensor<T>> {
        let mut ts = Vec::with_capacity(self.layers.len());
        let mut t = t0;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = &trace.inputs[i];
            let next = match *layer {
                Layer::Conv { w, cout, k, .. } => ops::conv2d(&t, p.data(w), None, cout, k),
                Layer::Dense { w, fout, .. } => ops::conv2d(&t, p.data(w), None, fout, 1),
                Layer::LeakyRelu => ops::leaky_relu_backward(x, &t, slope()),
                Layer::AvgPool2 => ops::avg_pool2(&t),
                Layer::Upsample2 => ops::upsample2(&t),
                Layer::Flatten => ops::flatten(&t),
                Layer::Residual { .. } => panic!("tangent pass is not available for residual layers"),
            };
            ts.push(t);
            t = next;
        }
        ts
    }

    /// R1 penalty `γ/2 · mean_i ‖∇ₓ f(x_i)‖²` for a network with scalar
    /// output per sample. Accumulates its exact parameter gradient into
    /// `grads` and returns the penalty value.
    pub fn r1_penalty<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &Trace<T>,
        gamma: f64,
        grads: Option<&mut ParamSet<T>>,
    ) -> T {
        assert!(self.supports_r1(), "R1 requires a piecewise-linear stack");
        let out = &trace.output;
        assert_eq!(out.channels() * out.plane(), 1, "R1 expects one logit per sample");
        let n = out.batch();
        let ones = Tensor::full(out.shape, T::one());
        let (gx, out_grads) = self.backward_recording(p, trace, ones, None);
        let penalty = T::lit(gamma * 0.5 / n as f64) * gx.sum_sq();
        if let Some(gr) = grads {
            let mut v = gx;
            v.scale(T::lit(gamma / n as f64));
            let tangents = self.tangent(p, trace, v);
            for (i, layer) in self.layers.iter().enumerate() {
                if !layer.has_weights() {
                    continue;
                }
                match *layer {
                    Layer::Conv { w, k, .. } => ops::conv2d_weight_grad(&tangents[i], &out_grads[i], k, gr.data_mut(w)),
                    Layer::Dense { w, .. } => ops::conv2d_weight_grad(&tangents[i], &out_grads[i], 1, gr.data_mut(w)),
                    _ => unreachable!(),
                }
            }
        }
        penalty
    }
}
