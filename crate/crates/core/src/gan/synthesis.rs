//! Style-modulated synthesis network: a learned 4×4 constant followed by
//! upsample + modulated 3×3 convolution blocks, each with a modulated 1×1
//! projection to RGB accumulated through skip connections, and a final tanh.

use deid_nn::ops;
use deid_nn::{ParamId, ParamSet, Scalar, Tensor, LRELU_GAIN, LRELU_SLOPE};
use rand::Rng;

const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Block {
    cin: usize,
    cout: usize,
    affine_w: ParamId,
    affine_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    rgb_affine_w: ParamId,
    rgb_affine_b: ParamId,
    rgb_w: ParamId,
    rgb_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub d_w: usize,
    pub resolution: usize,
    pub channels: Vec<usize>,
    konst: ParamId,
    blocks: Vec<Block>,
}

struct BlockTrace<T> {
    x_in: Tensor<T>,
    s: Tensor<T>,
    xs: Tensor<T>,
    y: Tensor<T>,
    d: Vec<T>,
    pre: Tensor<T>,
    h: Tensor<T>,
    s_rgb: Tensor<T>,
    hs: Tensor<T>,
}

pub struct SynthesisTrace<T> {
    w: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    /// `[3, n, res, res]` output in `[-1, 1]`.
    pub image: Tensor<T>,
}

/// Multiply plane `(c, n)` of `x` by `s[c, n]`.
fn scale_planes<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let [c, n, _, _] = x.shape;
    assert_eq!(s.shape, [c, n, 1, 1]);
    let mut out = x.clone();
    for ci in 0..c {
        for ni in 0..n {
            let k = s.data[ci * n + ni];
            for v in out.plane_slice_mut(ci, ni) {
                *v *= k;
            }
        }
    }
    out
}

/// `out[c, n] = Σ_pixels a[c, n, ·] · b[c, n, ·]`.
fn plane_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [c, n, _, _] = a.shape;
    let mut out = Tensor::zeros([c, n, 1, 1]);
    for ci in 0..c {
        for ni in 0..n {
            out.data[ci * n + ni] = a.plane_slice(ci, ni).iter().zip(b.plane_slice(ci, ni)).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `Q[o, i] = Σ_k W[o, i, k]²`.
fn weight_energy<T: Scalar>(w: &[T], cout: usize, cin: usize, kk: usize) -> Vec<T> {
    (0..cout * cin).map(|oi| w[oi * kk..(oi + 1) * kk].iter().map(|&v| v * v).sum()).collect()
}

impl Synthesis {
    /// `channels[0]` is the constant's width, `channels[b + 1]` the output
    /// width of block `b`; `resolution = 4 · 2^(channels.len() - 1)`.
    pub fn new<T: Scalar, R: Rng>(params: &mut ParamSet<T>, d_w: usize, channels: &[usize], rng: &mut R) -> Self {
        assert!(channels.len() >= 2, "synthesis needs at least one block");
        let konst = params.add_he("const", [channels[0], 1, 4, 4], 1, 1.0, rng);
        let mut blocks = Vec::new();
        for b in 0..channels.len() - 1 {
            let (cin, cout) = (channels[b], channels[b + 1]);
            let pre = format!("block{b}");
            blocks.push(Block {
                cin,
                cout,
                affine_w: params.add_he(format!("{pre}.affine.weight"), [cin, d_w, 1, 1], d_w, 1.0, rng),
                affine_b: params.add_const(format!("{pre}.affine.bias"), [cin, 1, 1, 1], 1.0),
                conv_w: params.add_he(format!("{pre}.conv.weight"), [cout, cin, 3, 3], cin * 9, LRELU_GAIN, rng),
                conv_b: params.add_const(format!("{pre}.conv.bias"), [cout, 1, 1, 1], 0.0),
                rgb_affine_w: params.add_he(format!("{pre}.rgb.affine.weight"), [cout, d_w, 1, 1], d_w, 1.0, rng),
                rgb_affine_b: params.add_const(format!("{pre}.rgb.affine.bias"), [cout, 1, 1, 1], 1.0),
                rgb_w: params.add_he(format!("{pre}.rgb.weight"), [3, cout, 1, 1], cout, 1.0, rng),
                rgb_b: params.add_const(format!("{pre}.rgb.bias"), [3, 1, 1, 1], 0.0),
            });
        }
        Synthesis {
            d_w,
            resolution: 4 << blocks.len(),
            channels: channels.to_vec(),
            konst,
            blocks,
        }
    }

    fn demod<T: Scalar>(&self, p: &ParamSet<T>, blk: &Block, s: &Tensor<T>) -> Vec<T> {
        let n = s.batch();
        let q = weight_energy(p.data(blk.conv_w), blk.cout, blk.cin, 9);
        let mut d = vec![T::zero(); blk.cout * n];
        for o in 0..blk.cout {
            for ni in 0..n {
                let mut acc = T::lit(DEMOD_EPS);
                for i in 0..blk.cin {
                    let si = s.data[i * n + ni];
                    acc += q[o * blk.cin + i] * si * si;
                }
                d[o * n + ni] = T::one() / acc.sqrt();
            }
        }
        d
    }

    /// `w` is a dense `[d_w, n, 1, 1]` tensor of style codes.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, w: &Tensor<T>) -> SynthesisTrace<T> {
        assert_eq!(w.channels(), self.d_w, "style code width mismatch");
        let n = w.batch();
        let c0 = self.channels[0];
        let mut x = Tensor::zeros([c0, n, 4, 4]);
        let k = p.data(self.konst);
        for c in 0..c0 {
            for ni in 0..n {
                x.plane_slice_mut(c, ni).copy_from_slice(&k[c * 16..(c + 1) * 16]);
            }
        }
        let mut rgb: Option<Tensor<T>> = None;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let x_in = ops::upsample2(&x);
            let s = ops::conv2d(w, p.data(blk.affine_w), Some(p.data(blk.affine_b)), blk.cin, 1);
            let xs = scale_planes(&x_in, &s);
            let y = ops::conv2d(&xs, p.data(blk.conv_w), None, blk.cout, 3);
            let d = self.demod(p, blk, &s);
            let dt = Tensor::from_vec([blk.cout, n, 1, 1], d.clone());
            let mut pre = scale_planes(&y, &dt);
            ops::add_channel_bias(&mut pre, p.data(blk.conv_b));
            let h = ops::leaky_relu(&pre, T::lit(LRELU_SLOPE));
            let s_rgb = ops::conv2d(w, p.data(blk.rgb_affine_w), Some(p.data(blk.rgb_affine_b)), blk.cout, 1);
            let hs = scale_planes(&h, &s_rgb);
            let r = ops::conv2d(&hs, p.data(blk.rgb_w), Some(p.data(blk.rgb_b)), 3, 1);
            rgb = Some(match rgb {
                None => r,
                Some(prev) => {
                    let mut up = ops::upsample2(&prev);
                    up.add_assign(&r);
                    up
                }
            });
            x = h.clone();
            blocks.push(BlockTrace {
                x_in,
                s,
                xs,
                y,
                d,
                pre,
                h,
                s_rgb,
                hs,
            });
        }
        let image = rgb.expect("at least one block").map(|v| v.tanh());
        SynthesisTrace {
            w: w.clone(),
            blocks,
            image,
        }
    }

    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, w: &Tensor<T>) -> Tensor<T> {
        self.forward(p, w).image
    }

    fn affine_backward<T: Scalar>(
        p: &ParamSet<T>,
        w: &Tensor<T>,
        aw: ParamId,
        ab: ParamId,
        g_s: &Tensor<T>,
        g_w: &mut Tensor<T>,
        grads: Option<&mut ParamSet<T>>,
    ) {
        if let Some(gr) = grads {
            ops::conv2d_weight_grad(w, g_s, 1, gr.data_mut(aw));
            ops::bias_grad(g_s, gr.data_mut(ab));
        }
        g_w.add_assign(&ops::conv2d_backward_input(g_s, p.data(aw), w.channels(), 1));
    }

    /// Backpropagate `g_img` (gradient with respect to the output image).
    /// Returns the gradient with respect to the style codes; parameter
    /// gradients are accumulated when `grads` is given.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &SynthesisTrace<T>,
        g_img: &Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        assert_eq!(g_img.shape, trace.image.shape);
        let n = trace.w.batch();
        let mut g_w = Tensor::zeros(trace.w.shape);
        let mut g_rgb = Tensor {
            shape: g_img.shape,
            data: g_img.data.iter().zip(&trace.image.data).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
        };
        let mut g_h_next: Option<Tensor<T>> = None;
        for (b, blk) in self.blocks.iter().enumerate().rev() {
            let bt = &trace.blocks[b];
            if let Some(gr) = grads.as_deref_mut() {
                ops::conv2d_weight_grad(&bt.hs, &g_rgb, 1, gr.data_mut(blk.rgb_w));
                ops::bias_grad(&g_rgb, gr.data_mut(blk.rgb_b));
            }
            let g_hs = ops::conv2d_backward_input(&g_rgb, p.data(blk.rgb_w), blk.cout, 1);
            let mut g_h = scale_planes(&g_hs, &bt.s_rgb);
            if let Some(next) = g_h_next.take() {
                g_h.add_assign(&next);
            }
            let g_srgb = plane_dot(&g_hs, &bt.h);
            Self::affine_backward(
                p,
                &trace.w,
                blk.rgb_affine_w,
                blk.rgb_affine_b,
                &g_srgb,
                &mut g_w,
                grads.as_deref_mut(),
            );
            if b > 0 {
                g_rgb = ops::upsample2_backward(&g_rgb);
            }

            let g_pre = ops::leaky_relu_backward(&bt.pre, &g_h, T::lit(LRELU_SLOPE));
            if let Some(gr) = grads.as_deref_mut() {
                ops::bias_grad(&g_pre, gr.data_mut(blk.conv_b));
            }
            let dt = Tensor::from_vec([blk.cout, n, 1, 1], bt.d.clone());
            let g_y = scale_planes(&g_pre, &dt);
            let g_d = plane_dot(&g_pre, &bt.y);
            // t = -d³ · ∂L/∂d
            let t: Vec<T> = bt.d.iter().zip(&g_d.data).map(|(&d, &g)| -(d * d * d) * g).collect();
            let q = weight_energy(p.data(blk.conv_w), blk.cout, blk.cin, 9);
            let mut g_s = Tensor::zeros([blk.cin, n, 1, 1]);
            for i in 0..blk.cin {
                for ni in 0..n {
                    let si = bt.s.data[i * n + ni];
                    let mut acc = T::zero();
                    for o in 0..blk.cout {
                        acc += t[o * n + ni] * q[o * blk.cin + i];
                    }
                    g_s.data[i * n + ni] = acc * si;
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                let w = p.data(blk.conv_w);
                let gw = gr.data_mut(blk.conv_w);
                for o in 0..blk.cout {
                    for i in 0..blk.cin {
                        let mut gq = T::zero();
                        for ni in 0..n {
                            let si = bt.s.data[i * n + ni];
                            gq += t[o * n + ni] * T::lit(0.5) * si * si;
                        }
                        let base = (o * blk.cin + i) * 9;
                        for kk in 0..9 {
                            gw[base + kk] += T::lit(2.0) * w[base + kk] * gq;
                        }
                    }
                }
                ops::conv2d_weight_grad(&bt.xs, &g_y, 3, gr.data_mut(blk.conv_w));
            }
            let g_xs = ops::conv2d_backward_input(&g_y, p.data(blk.conv_w), blk.cin, 3);
            g_s.add_assign(&plane_dot(&g_xs, &bt.x_in));
            let g_xin = scale_planes(&g_xs, &bt.s);
            Self::affine_backward(p, &trace.w, blk.affine_w, blk.affine_b, &g_s, &mut g_w, grads.as_deref_mut());
            let g_x = ops::upsample2_backward(&g_xin);
            if b > 0 {
                g_h_next = Some(g_x);
            } else if let Some(gr) = grads.as_deref_mut() {
                let gk = gr.data_mut(self.konst);
                for c in 0..self.channels[0] {
                    for ni in 0..n {
                        for (acc, &v) in gk[c * 16..(c + 1) * 16].iter_mut().zip(g_x.plane_slice(c, ni)) {
                            *acc += v;
                        }
                    }
                }
            }
        }
        g_w
    }
}
