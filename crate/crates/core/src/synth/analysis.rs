//! Statistics read back from rendered or generated canonical-frame images.

use super::render::{MOUTH_INTERIOR, TEETH_BOTTOM, TEETH_LEFT, TEETH_RIGHT, TEETH_TOP, TOOTH};
use crate::image::ImageTensor;

pub const TOOTH_COLOR: [f64; 3] = TOOTH;

/// Pixels whose whole footprint lies inside `[lo, hi]` (unit coordinates).
fn inner_pixels(lo: f64, hi: f64, res: usize) -> std::ops::Range<usize> {
    let r = res as f64;
    let start = (lo * r - 1e-9).ceil() as usize;
    let end = ((hi * r + 1e-9).floor() as usize).min(res);
    start..end.max(start)
}

/// Estimated gap fraction of the teeth row in the canonical mouth window.
///
/// Each pixel is unmixed between the mouth-interior color and the tooth
/// color; the result is one minus the mean tooth coverage. Returns `None`
/// when the window shows essentially no teeth (closed mouth).
pub fn tooth_gap_proxy(image: &ImageTensor) -> Option<f64> {
    let (h, w) = image.dims();
    let rows = inner_pixels(TEETH_TOP, TEETH_BOTTOM, h);
    let cols = inner_pixels(TEETH_LEFT, TEETH_RIGHT, w);
    let axis: [f64; 3] = std::array::from_fn(|c| TOOTH[c] - MOUTH_INTERIOR[c]);
    let norm: f64 = axis.iter().map(|a| a * a).sum();
    let mut coverage = 0.0;
    let mut n = 0.0;
    for y in rows {
        for x in cols.clone() {
            let p = image.pixel(y, x);
            let proj: f64 = (0..3).map(|c| ((p[c] + 1.0) / 2.0 - MOUTH_INTERIOR[c]) * axis[c]).sum::<f64>() / norm;
            coverage += proj.clamp(0.0, 1.0);
            n += 1.0;
        }
    }
    if n == 0.0 {
        return None;
    }
    let coverage = coverage / n;
    (coverage > 0.3).then_some(1.0 - coverage)
}

/// Mean color (in `[0, 1]`) of a cheek-and-nose window of the head.
pub fn head_mean_color(image: &ImageTensor) -> [f64; 3] {
    let (h, w) = image.dims();
    let rows = inner_pixels(0.48, 0.64, h);
    let cols = inner_pixels(0.30, 0.70, w);
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in rows {
        for x in cols.clone() {
            let p = image.pixel(y, x);
            for c in 0..3 {
                acc[c] += (p[c] + 1.0) / 2.0;
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_face, spec_from_seed, Distribution, FaceSpec, RACE_CLASSES};

    #[test]
    fn proxy_tracks_tooth_gap() {
        let base = FaceSpec {
            smiling: true,
            ..spec_from_seed(2, Distribution::Base)
        };
        let mut last = -1.0;
        for gap in [0.0, 0.1, 0.2, 0.3] {
            let face = render_face(&FaceSpec { tooth_gap: gap, ..base }, 64).unwrap();
            let p = tooth_gap_proxy(&face.image).unwrap();
            assert!(p > last, "gap {gap}: proxy {p} not above {last}");
            assert!((p - gap).abs() < 0.08, "gap {gap}: proxy {p}");
            last = p;
        }
        let closed = render_face(&FaceSpec { smiling: false, ..base }, 64).unwrap();
        assert_eq!(tooth_gap_proxy(&closed.image), None);
    }

    /// Multinomial logistic regression on mean head color, trained by
    /// full-batch gradient descent.
    #[test]
    fn race_is_linearly_separable() {
        let n = 1000;
        let data: Vec<([f64; 4], usize)> = (0..2 * n as u64)
            .map(|seed| {
                let spec = spec_from_seed(10_000 + seed, Distribution::Base);
                let m = head_mean_color(&render_face(&spec, 32).unwrap().image);
                ([m[0], m[1], m[2], 1.0], spec.race_class)
            })
            .collect();
        let (train, test) = data.split_at(n);
        let k = RACE_CLASSES;
        let mut wts = vec![[0.0f64; 4]; k];
        for _ in 0..4000 {
            let mut grad = vec![[0.0f64; 4]; k];
            for (x, y) in train {
                let logits: Vec<f64> = wts.iter().map(|w| (0..4).map(|i| w[i] * x[i]).sum()).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..k {
                    let g = e[c] / z - (c == *y) as u8 as f64;
                    for i in 0..4 {
                        grad[c][i] += g * x[i] / n as f64;
                    }
                }
            }
            for c in 0..k {
                for i in 0..4 {
                    wts[c][i] -= 20.0 * grad[c][i];
                }
            }
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let scores: Vec<f64> = wts.iter().map(|w| (0..4).map(|i| w[i] * x[i]).sum()).collect();
                let best = (0..k).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                best == *y
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.99, "accuracy {}", correct as f64 / n as f64);
    }
}
