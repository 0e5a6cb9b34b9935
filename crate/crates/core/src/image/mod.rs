//! Pixel-level algebra shared by every stage: images in `[-1, 1]`, dental
//! region masks, stitching, masked metrics and similarity alignment.

mod align;
mod blend;
pub mod io;
mod region;

pub use align::{estimate_similarity_transform, warp_image, LandmarkSet, Point, SimilarityTransform};
pub use blend::{masked_mse, masked_psnr, mse, stitch};
pub use region::{feather_mask, make_region_mask, RegionMask, RegionSpec};

use deid_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

pub const CHANNELS: usize = 3;

/// `height × width × 3` raster, row-major with interleaved channels, every
/// value in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(arg("image dimensions must be positive"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(arg(format!(
                "expected {} values for a {height}x{width} image, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(arg(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(ImageTensor { height, width, data })
    }

    /// Build from values that may stray outside `[-1, 1]`; they are clamped.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Pack images into a `[3, n, h, w]` engine tensor.
    pub fn batch_to_tensor<T: Scalar>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| arg("empty image batch"))?;
        let (h, w) = first.dims();
        let n = images.len();
        let mut t = Tensor::zeros([CHANNELS, n, h, w]);
        for (ni, img) in images.iter().enumerate() {
            if img.dims() != (h, w) {
                return Err(arg("image batch has mixed dimensions"));
            }
            for c in 0..CHANNELS {
                let plane = t.plane_slice_mut(c, ni);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = T::lit(img.data[p * CHANNELS + c]);
                }
            }
        }
        Ok(t)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::batch_to_tensor(&[self]).expect("single image batch")
    }

    /// Unpack sample `n` of a `[3, n, h, w]` tensor, clamping into range.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.channels() != CHANNELS {
            return Err(arg(format!("expected 3 channels, got {}", t.channels())));
        }
        let (h, w) = (t.height(), t.width());
        let mut data = vec![0.0; h * w * CHANNELS];
        for c in 0..CHANNELS {
            for (p, v) in t.plane_slice(c, n).iter().enumerate() {
                data[p * CHANNELS + c] = v.as_f64();
            }
        }
        Self::from_clamped(h, w, data)
    }
}
