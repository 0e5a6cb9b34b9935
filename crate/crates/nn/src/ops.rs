//! Stateless kernels: convolution via im2col, pooling, resampling,
//! activations and layout changes. Every forward kernel has the matching
//! backward kernel next to it.

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Unfold `x` into a `(cin·k·k) × (n·h·w)` patch matrix, zero padded so the
/// convolution keeps spatial size (stride 1, odd `k`).
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let [c, n, h, w] = x.shape;
    let pad = (k / 2) as isize;
    let cols = n * h * w;
    let mut col = vec![T::zero(); c * k * k * cols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let src_plane = x.plane_slice(ci, ni);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut dst_row[(ni * h + y) * w..(ni * h + y + 1) * w];
                        copy_shifted(src, dst, dx);
                    }
                }
            }
        }
    }
    col
}

/// `dst[x] = src[x + dx]` where in range, untouched elsewhere.
fn copy_shifted<T: Copy>(src: &[T], dst: &mut [T], dx: isize) {
    let w = src.len() as isize;
    let lo = (-dx).max(0);
    let hi = (w - dx).min(w);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s0 = (lo as isize + dx) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back into `gx`.
pub fn col2im_add<T: Scalar>(col: &[T], gx: &mut Tensor<T>, k: usize) {
    let [c, n, h, w] = gx.shape;
    let pad = (k / 2) as isize;
    let cols = n * h * w;
    assert_eq!(col.len(), c * k * k * cols);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for ni in 0..n {
                    let plane = gx.plane_slice_mut(ci, ni);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(ni * h + y) * w..(ni * h + y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        let lo = (-dx).max(0) as usize;
                        let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                        for xo in lo..hi {
                            dst[(xo as isize + dx) as usize] += src[xo];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padding, stride-1 convolution. `w` is `cout × cin × k × k`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &[T], b: Option<&[T]>, cout: usize, k: usize) -> Tensor<T> {
    let [cin, n, h, wd] = x.shape;
    assert_eq!(w.len(), cout * cin * k * k, "conv weight shape mismatch");
    let cols = n * h * wd;
    let mut y = Tensor::zeros([cout, n, h, wd]);
    if k == 1 {
        gemm(false, false, cout, cols, cin, T::one(), w, &x.data, T::zero(), &mut y.data);
    } else {
        let col = im2col(x, k);
        gemm(false, false, cout, cols, cin * k * k, T::one(), w, &col, T::zero(), &mut y.data);
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b);
    }
    y
}

pub fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, b: &[T]) {
    let cols = y.cols();
    assert_eq!(b.len(), y.channels());
    for (c, &bc) in b.iter().enumerate() {
        for v in &mut y.data[c * cols..(c + 1) * cols] {
            *v += bc;
        }
    }
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(gy: &Tensor<T>, w: &[T], cin: usize, k: usize) -> Tensor<T> {
    let [cout, n, h, wd] = gy.shape;
    let cols = n * h * wd;
    let mut gx = Tensor::zeros([cin, n, h, wd]);
    if k == 1 {
        gemm(true, false, cin, cols, cout, T::one(), w, &gy.data, T::zero(), &mut gx.data);
    } else {
        let mut gcol = vec![T::zero(); cin * k * k * cols];
        gemm(true, false, cin * k * k, cols, cout, T::one(), w, &gy.data, T::zero(), &mut gcol);
        col2im_add(&gcol, &mut gx, k);
    }
    gx
}

/// Accumulate the weight gradient `gw += gy · patches(x)ᵀ`.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, k: usize, gw: &mut [T]) {
    let cin = x.channels();
    let cout = gy.channels();
    let cols = x.cols();
    assert_eq!(cols, gy.cols());
    assert_eq!(gw.len(), cout * cin * k * k);
    if k == 1 {
        gemm(false, true, cout, cin, cols, T::one(), &gy.data, &x.data, T::one(), gw);
    } else {
        let col = im2col(x, k);
        gemm(false, true, cout, cin * k * k, cols, T::one(), &gy.data, &col, T::one(), gw);
    }
}

/// Accumulate per-channel sums of `gy` into `gb`.
pub fn bias_grad<T: Scalar>(gy: &Tensor<T>, gb: &mut [T]) {
    let cols = gy.cols();
    for (c, g) in gb.iter_mut().enumerate() {
        *g += gy.data[c * cols..(c + 1) * cols].iter().copied().sum::<T>();
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Multiply `g` by the leaky-ReLU derivative evaluated at the pre-activation `x`.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, slope: T) -> Tensor<T> {
    Tensor {
        shape: g.shape,
        data: x
            .data
            .iter()
            .zip(&g.data)
            .map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * slope })
            .collect(),
    }
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [c, n, h, w] = x.shape;
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut y = Tensor::zeros([c, n, ho, wo]);
    for ci in 0..c {
        for ni in 0..n {
            let src = x.plane_slice(ci, ni);
            let dst = y.plane_slice_mut(ci, ni);
            for yy in 0..ho {
                let r0 = &src[2 * yy * w..(2 * yy + 1) * w];
                let r1 = &src[(2 * yy + 1) * w..(2 * yy + 2) * w];
                for xx in 0..wo {
                    dst[yy * wo + xx] =
                        (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [c, n, ho, wo] = g.shape;
    let (h, w) = (ho * 2, wo * 2);
    let quarter = T::lit(0.25);
    let mut gx = Tensor::zeros([c, n, h, w]);
    for ci in 0..c {
        for ni in 0..n {
            let src = g.plane_slice(ci, ni);
            let dst = gx.plane_slice_mut(ci, ni);
            for yy in 0..h {
                for xx in 0..w {
                    dst[yy * w + xx] = src[(yy / 2) * wo + xx / 2] * quarter;
                }
            }
        }
    }
    gx
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [c, n, h, w] = x.shape;
    let (ho, wo) = (h * 2, w * 2);
    let mut y = Tensor::zeros([c, n, ho, wo]);
    for ci in 0..c {
        for ni in 0..n {
            let src = x.plane_slice(ci, ni);
            let dst = y.plane_slice_mut(ci, ni);
            for yy in 0..ho {
                let row = &src[(yy / 2) * w..(yy / 2 + 1) * w];
                let out = &mut dst[yy * wo..(yy + 1) * wo];
                for xx in 0..wo {
                    out[xx] = row[xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [c, n, ho, wo] = g.shape;
    let (h, w) = (ho / 2, wo / 2);
    let mut gx = Tensor::zeros([c, n, h, w]);
    for ci in 0..c {
        for ni in 0..n {
            let src = g.plane_slice(ci, ni);
            let dst = gx.plane_slice_mut(ci, ni);
            for yy in 0..ho {
                for xx in 0..wo {
                    dst[(yy / 2) * w + xx / 2] += src[yy * wo + xx];
                }
            }
        }
    }
    gx
}

/// `[c, n, h, w] → [c·h·w, n, 1, 1]`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [c, n, h, w] = x.shape;
    let p = h * w;
    let mut y = Tensor::zeros([c * p, n, 1, 1]);
    for ci in 0..c {
        for ni in 0..n {
            let src = x.plane_slice(ci, ni);
            for (pi, &v) in src.iter().enumerate() {
                y.data[(ci * p + pi) * n + ni] = v;
            }
        }
    }
    y
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(y: &Tensor<T>, c: usize, h: usize, w: usize) -> Tensor<T> {
    let n = y.batch();
    let p = h * w;
    assert_eq!(y.channels(), c * p);
    let mut x = Tensor::zeros([c, n, h, w]);
    for ci in 0..c {
        for ni in 0..n {
            let dst = x.plane_slice_mut(ci, ni);
            for (pi, v) in dst.iter_mut().enumerate() {
                *v = y.data[(ci * p + pi) * n + ni];
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn naive_conv(x: &Tensor<f64>, w: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let [cin, n, h, wd] = x.shape;
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros([cout, n, h, wd]);
        for co in 0..cout {
            for ni in 0..n {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    s += w[((co * cin + ci) * k + ky) * k + kx]
                                        * x.at(ci, ni, sy as usize, sx as usize);
                                }
                            }
                        }
                        let i = y.index(co, ni, yy, xx);
                        y.data[i] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &k in &[1usize, 3, 5] {
            let x = random([2, 3, 5, 6], &mut rng);
            let w: Vec<f64> = (0..4 * 2 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d(&x, &w, None, 4, k);
            let want = naive_conv(&x, &w, 4, k);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv_backward_input(g)> and == <w, weight_grad(x, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &k in &[1usize, 3] {
            let x = random([3, 2, 4, 5], &mut rng);
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = random([2, 2, 4, 5], &mut rng);
            let y = conv2d(&x, &w, None, 2, k);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let gx = conv2d_backward_input(&g, &w, 3, k);
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let mut gw = vec![0.0; w.len()];
            conv2d_weight_grad(&x, &g, k, &mut gw);
            let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random([2, 2, 4, 6], &mut rng);
        let g = random([2, 2, 2, 3], &mut rng);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let gu = random([2, 2, 8, 12], &mut rng);
        let lhs: f64 = upsample2(&x).data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&gu).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([3, 2, 2, 2], &mut rng);
        let f = flatten(&x);
        assert_eq!(f.shape, [12, 2, 1, 1]);
        assert_eq!(unflatten(&f, 3, 2, 2), x);
    }
}
