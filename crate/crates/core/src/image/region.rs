use deid_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionSpec {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionSpec {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        RegionSpec { x0, y0, x1, y1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        RegionSpec::new(0, 0, width, height)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height {
            Ok(())
        } else {
            Err(arg(format!(
                "region {self:?} is not a nonempty rectangle inside {width}x{height}"
            )))
        }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Continuous containment: pixel `i` covers `[i - 0.5, i + 0.5)`.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 - 0.5 && x < self.x1 as f64 - 0.5 && y >= self.y0 as f64 - 0.5 && y < self.y1 as f64 - 0.5
    }

    pub fn intersection_area(&self, other: &RegionSpec) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || weights.len() != height * width {
            return Err(arg("mask weights do not match mask dimensions"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(arg(format!("mask weight {w} outside [0, 1]")));
        }
        Ok(RegionMask { height, width, weights })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            weights: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            weights: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Pack masks into a `[1, n, h, w]` engine tensor.
    pub fn batch_to_tensor<T: Scalar>(masks: &[&RegionMask]) -> Result<Tensor<T>> {
        let first = masks.first().ok_or_else(|| arg("empty mask batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dims() != (h, w) {
                return Err(arg("mask batch has mixed dimensions"));
            }
            data.extend(m.weights.iter().map(|&v| T::lit(v)));
        }
        Ok(Tensor::from_vec([1, masks.len(), h, w], data))
    }
}

pub fn make_region_mask(region: RegionSpec, height: usize, width: usize) -> Result<RegionMask> {
    region.validate(height, width)?;
    let mut m = RegionMask::zeros(height, width);
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            m.weights[y * width + x] = 1.0;
        }
    }
    Ok(m)
}

/// Soften a mask outward: each pixel takes the largest value of
/// `m(q) · max(0, 1 - ‖p - q‖ / (radius + 1))` over all pixels `q`, so a
/// binary region gains a linear ramp `radius` pixels wide outside its
/// boundary while its interior stays at 1.
pub fn feather_mask(mask: &RegionMask, radius: usize) -> RegionMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let reach = radius as isize;
    let denom = (radius + 1) as f64;
    let mut out = RegionMask::zeros(h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut best: f64 = 0.0;
            for qy in (y - reach).max(0)..=(y + reach).min(h as isize - 1) {
                for qx in (x - reach).max(0)..=(x + reach).min(w as isize - 1) {
                    let mq = mask.weights[qy as usize * w + qx as usize];
                    if mq <= best {
                        continue;
                    }
                    let d = (((qy - y) * (qy - y) + (qx - x) * (qx - x)) as f64).sqrt();
                    let v = mq * (1.0 - d / denom).max(0.0);
                    best = best.max(v);
                }
            }
            out.weights[y as usize * w + x as usize] = best;
        }
    }
    out
}
