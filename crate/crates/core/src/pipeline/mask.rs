use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::image::{feather_mask, make_region_mask, LandmarkSet, RegionMask, RegionSpec};

/// Dental-region margins as fractions of the mouth-corner span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DentalMargins {
    pub horizontal: f64,
    pub vertical: f64,
}

impl Default for DentalMargins {
    fn default() -> Self {
        DentalMargins {
            horizontal: 0.25,
            vertical: 0.60,
        }
    }
}

/// The landmark-anchored dental rectangle and its feathered mask.
///
/// The mouth-corner bounding box is grown by `horizontal · span` left and
/// right and `vertical · span` up and down, where `span` is the corner
/// distance. Every pixel whose cell meets the grown box is included, so the
/// region is at least one pixel in each direction.
pub fn derive_dental_mask(
    landmarks: &LandmarkSet,
    margins: DentalMargins,
    resolution: usize,
    feather_radius: usize,
) -> Result<(RegionSpec, RegionMask)> {
    if !(margins.horizontal >= 0.0 && margins.vertical >= 0.0) {
        return Err(arg(format!(
            "dental margins must be ≥ 0, got ({}, {})",
            margins.horizontal, margins.vertical
        )));
    }
    if resolution == 0 {
        return Err(arg("resolution must be positive"));
    }
    let (l, r) = (landmarks.left_mouth(), landmarks.right_mouth());
    let span = l.dist(&r);
    if !(span > 0.0 && span.is_finite()) {
        return Err(arg("mouth corners coincide; dental region is undefined"));
    }
    let dx = margins.horizontal * span;
    let dy = margins.vertical * span;
    let res = resolution as f64;
    let lo = |v: f64| (v + 0.5).floor().clamp(0.0, res) as usize;
    let hi = |v: f64| ((v + 0.5).floor() + 1.0).clamp(0.0, res) as usize;
    let x0 = lo(l.x.min(r.x) - dx);
    let x1 = hi(l.x.max(r.x) + dx);
    let y0 = lo(l.y.min(r.y) - dy);
    let y1 = hi(l.y.max(r.y) + dy);
    if x0 >= x1 || y0 >= y1 {
        return Err(arg("dental region lies outside the image"));
    }
    let region = RegionSpec::new(x0, y0, x1, y1);
    let mask = feather_mask(&make_region_mask(region, resolution, resolution)?, feather_radius);
    Ok((region, mask))
}
