use serde::{Deserialize, Serialize};

use super::{ImageTensor, CHANNELS};
use crate::error::{Error, Result};

/// Continuous pixel coordinates; pixel `i` is centered at `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Five facial landmarks: left eye, right eye, nose, left and right mouth corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [Point; 5],
}

impl LandmarkSet {
    pub const LEFT_EYE: usize = 0;
    pub const RIGHT_EYE: usize = 1;
    pub const NOSE: usize = 2;
    pub const LEFT_MOUTH: usize = 3;
    pub const RIGHT_MOUTH: usize = 4;

    pub fn new(points: [Point; 5]) -> Self {
        LandmarkSet { points }
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 10);
        let mut points = [Point::new(0.0, 0.0); 5];
        for (i, p) in points.iter_mut().enumerate() {
            *p = Point::new(v[2 * i], v[2 * i + 1]);
        }
        LandmarkSet { points }
    }

    pub fn to_flat(&self) -> [f64; 10] {
        let mut v = [0.0; 10];
        for (i, p) in self.points.iter().enumerate() {
            v[2 * i] = p.x;
            v[2 * i + 1] = p.y;
        }
        v
    }

    pub fn left_mouth(&self) -> Point {
        self.points[Self::LEFT_MOUTH]
    }

    pub fn right_mouth(&self) -> Point {
        self.points[Self::RIGHT_MOUTH]
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.points
            .iter()
            .all(|p| p.x >= -0.5 && p.x < width as f64 - 0.5 && p.y >= -0.5 && p.y < height as f64 - 0.5)
    }

    pub fn map(&self, t: &SimilarityTransform) -> LandmarkSet {
        LandmarkSet {
            points: self.points.map(|p| t.apply(p)),
        }
    }

    /// Mean point-to-point distance.
    pub fn mean_error(&self, other: &LandmarkSet) -> f64 {
        self.points.iter().zip(&other.points).map(|(a, b)| a.dist(b)).sum::<f64>() / 5.0
    }
}

/// `p ↦ scale · R(rotation) · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: 0.0,
            translation: (0.0, 0.0),
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let a = self.scale * c;
        let b = self.scale * s;
        Point::new(a * p.x - b * p.y + self.translation.0, b * p.x + a * p.y + self.translation.1)
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_scale = 1.0 / self.scale;
        let rot = -self.rotation;
        let (s, c) = rot.sin_cos();
        let (tx, ty) = self.translation;
        SimilarityTransform {
            scale: inv_scale,
            rotation: rot,
            translation: (-inv_scale * (c * tx - s * ty), -inv_scale * (s * tx + c * ty)),
        }
    }

    /// Similarity about `center`: rotate and scale around it, then translate.
    pub fn about(center: Point, scale: f64, rotation: f64, shift: (f64, f64)) -> Self {
        let base = SimilarityTransform {
            scale,
            rotation,
            translation: (0.0, 0.0),
        };
        let moved = base.apply(center);
        SimilarityTransform {
            scale,
            rotation,
            translation: (center.x - moved.x + shift.0, center.y - moved.y + shift.1),
        }
    }
}

/// Least-squares similarity transform taking `detected` onto `canonical`
/// (orthogonal Procrustes with scale, closed form).
pub fn estimate_similarity_transform(detected: &LandmarkSet, canonical: &LandmarkSet) -> Result<SimilarityTransform> {
    let n = 5.0;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in detected.points.iter().zip(&canonical.points) {
        sx += s.x;
        sy += s.y;
        dx += d.x;
        dy += d.y;
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let (mut norm, mut a, mut b) = (0.0, 0.0, 0.0);
    for (s, d) in detected.points.iter().zip(&canonical.points) {
        let (px, py) = (s.x - sx, s.y - sy);
        let (qx, qy) = (d.x - dx, d.y - dy);
        norm += px * px + py * py;
        a += px * qx + py * qy;
        b += px * qy - py * qx;
    }
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numerical(
            "cannot estimate a similarity transform: detected landmarks are coincident".into(),
        ));
    }
    let (a, b) = (a / norm, b / norm);
    let scale = (a * a + b * b).sqrt();
    if scale < 1e-12 {
        return Err(Error::Numerical(
            "cannot estimate a similarity transform: canonical landmarks are coincident".into(),
        ));
    }
    Ok(SimilarityTransform {
        scale,
        rotation: b.atan2(a),
        translation: (dx - (a * sx - b * sy), dy - (b * sx + a * sy)),
    })
}

/// Resample `image` into an `out_height × out_width` frame where output
/// pixel `p` takes the source value at `transform⁻¹(p)`. Bilinear
/// interpolation; samples outside the source read as -1.
pub fn warp_image(image: &ImageTensor, transform: &SimilarityTransform, out_height: usize, out_width: usize) -> ImageTensor {
    let inv = transform.inverse();
    let (h, w) = image.dims();
    let mut data = Vec::with_capacity(out_height * out_width * CHANNELS);
    let fetch = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            -1.0
        } else {
            image.get(y as usize, x as usize, c)
        }
    };
    for oy in 0..out_height {
        for ox in 0..out_width {
            let src = inv.apply(Point::new(ox as f64, oy as f64));
            // Snap tiny numerical noise so exact integer shifts stay exact.
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            let (fx, fy) = (snap(src.x), snap(src.y));
            let x0 = fx.floor();
            let y0 = fy.floor();
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..CHANNELS {
                let v = if ax == 0.0 && ay == 0.0 {
                    fetch(x0, y0, c)
                } else {
                    let v00 = fetch(x0, y0, c);
                    let v10 = fetch(x0 + 1, y0, c);
                    let v01 = fetch(x0, y0 + 1, c);
                    let v11 = fetch(x0 + 1, y0 + 1, c);
                    (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11)
                };
                data.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    ImageTensor::from_clamped(out_height, out_width, data).expect("warp output dimensions are positive")
}
