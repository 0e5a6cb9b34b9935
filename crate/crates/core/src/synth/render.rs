use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgeGroup, FaceSpec, Gender, SUPPORTED_RESOLUTIONS};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LandmarkSet, Point, RegionSpec, SimilarityTransform};

type Rgb = [f64; 3];

const SUPERSAMPLE: usize = 3;

pub(crate) const EYE_Y: f64 = 0.44;
pub(crate) const NOSE_Y: f64 = 0.60;
pub(crate) const MOUTH_Y: f64 = 0.74;
pub(crate) const MOUTH_HALF_SPAN: f64 = 0.1425;
const HEAD_HALF_WIDTH: f64 = 0.31;
const DENTAL_TOP: f64 = 0.65;
const DENTAL_BOTTOM: f64 = 0.87;
/// Teeth row and opening geometry of a smiling mouth.
pub(crate) const TEETH_LEFT: f64 = 0.385;
pub(crate) const TEETH_RIGHT: f64 = 0.615;
pub(crate) const TEETH_TOP: f64 = 0.715;
pub(crate) const TEETH_BOTTOM: f64 = 0.755;

pub(crate) const TOOTH: Rgb = [0.95, 0.94, 0.88];
pub(crate) const MOUTH_INTERIOR: Rgb = [0.25, 0.08, 0.08];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedFace {
    pub image: ImageTensor,
    pub landmarks: LandmarkSet,
    pub dental_region: RegionSpec,
    pub labels: FaceSpec,
}

fn eye_half_spacing(gender: Gender) -> f64 {
    match gender {
        Gender::A => 0.13,
        Gender::B => 0.14,
    }
}

fn to_pixel(u: f64, res: usize) -> f64 {
    u * res as f64 - 0.5
}

/// Landmarks of an unposed face with the given gender at `res`.
fn landmarks_for(gender: Gender, res: usize) -> LandmarkSet {
    let e = eye_half_spacing(gender);
    let p = |u: f64, v: f64| Point::new(to_pixel(u, res), to_pixel(v, res));
    LandmarkSet::new([
        p(0.5 - e, EYE_Y),
        p(0.5 + e, EYE_Y),
        p(0.5, NOSE_Y),
        p(0.5 - MOUTH_HALF_SPAN, MOUTH_Y),
        p(0.5 + MOUTH_HALF_SPAN, MOUTH_Y),
    ])
}

/// Mean landmark layout over both genders; the alignment target.
pub fn canonical_landmarks(res: usize) -> LandmarkSet {
    let a = landmarks_for(Gender::A, res);
    let b = landmarks_for(Gender::B, res);
    let mut points = a.points;
    for (p, q) in points.iter_mut().zip(b.points) {
        p.x = 0.5 * (p.x + q.x);
        p.y = 0.5 * (p.y + q.y);
    }
    LandmarkSet::new(points)
}

fn dental_region(spec: &FaceSpec, res: usize) -> RegionSpec {
    let half = HEAD_HALF_WIDTH * spec.jaw_width;
    let r = res as f64;
    let x0 = ((0.5 - half) * r).floor().max(0.0) as usize;
    let x1 = ((0.5 + half) * r).ceil().min(r) as usize;
    let y0 = (DENTAL_TOP * r).floor() as usize;
    let y1 = ((DENTAL_BOTTOM * r).ceil() as usize).min(res);
    RegionSpec::new(x0, y0, x1, y1)
}

fn check_resolution(res: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&res) {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported resolution {res} (expected 32, 64 or 128)")))
    }
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(a: Rgb, k: f64) -> Rgb {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Everything the painter needs, resolved from a spec.
struct Scene {
    spec: FaceSpec,
    background: Rgb,
    skin: Rgb,
    hair: Rgb,
    lip: Rgb,
    iris: Rgb,
    cranium_top: f64,
    eye_rx: f64,
    eye_ry: f64,
    iris_r: f64,
}

impl Scene {
    fn new(spec: &FaceSpec) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.identity_seed ^ 0x5eed_face_0000_0001);
        let background = hsv(rng.gen(), rng.gen_range(0.1..0.35), rng.gen_range(0.35..0.75));
        let base_skin: Rgb = match spec.race_class {
            0 => [0.88, 0.72, 0.60],
            1 => [0.68, 0.50, 0.36],
            _ => [0.42, 0.29, 0.21],
        };
        let skin = scale(base_skin, 1.0 + rng.gen_range(-0.03..0.03));
        let palette: [Rgb; 4] = [[0.10, 0.08, 0.07], [0.30, 0.18, 0.10], [0.62, 0.48, 0.25], [0.45, 0.20, 0.10]];
        let mut hair = palette[rng.gen_range(0..palette.len())];
        if spec.age_group == AgeGroup::Senior {
            let g = rng.gen_range(0.62..0.72);
            hair = [g, g, g * 1.02];
        }
        let lip = scale([0.62, 0.24, 0.26], rng.gen_range(0.85..1.05));
        let iris = palette[rng.gen_range(0..2)];
        let (cranium_top, eye_rx, eye_ry, iris_r) = match spec.age_group {
            AgeGroup::Child => (0.05, 0.062, 0.034, 0.025),
            AgeGroup::Teenager => (0.08, 0.05, 0.025, 0.02),
            AgeGroup::Adult => (0.10, 0.05, 0.024, 0.02),
            AgeGroup::Senior => (0.11, 0.048, 0.02, 0.019),
        };
        Scene {
            spec: *spec,
            background,
            skin,
            hair,
            lip,
            iris,
            cranium_top,
            eye_rx,
            eye_ry,
            iris_r,
        }
    }

    fn head_half_width(&self, v: f64) -> Option<f64> {
        let mid = 0.52;
        let jaw_y = 0.86;
        let chin = 0.92;
        if v < self.cranium_top || v > chin {
            return None;
        }
        if v < mid {
            let t = (v - mid) / (mid - self.cranium_top);
            Some(HEAD_HALF_WIDTH * (1.0 - t * t).max(0.0).sqrt())
        } else if v <= jaw_y {
            let t = (v - mid) / (jaw_y - mid);
            let s = t * t * (3.0 - 2.0 * t);
            Some(HEAD_HALF_WIDTH * (1.0 - s * (1.0 - self.spec.jaw_width)))
        } else {
            let t = (v - jaw_y) / (chin - jaw_y);
            Some(HEAD_HALF_WIDTH * self.spec.jaw_width * (1.0 - t * t).max(0.0).sqrt())
        }
    }

    fn shade(&self, u: f64, v: f64) -> Rgb {
        let spec = &self.spec;
        let du = u - 0.5;
        let mut c = scale(self.background, 1.0 - 0.12 * v);

        if spec.gender == Gender::B && du.abs() < 0.37 && v > 0.07 && v < 0.80 {
            c = self.hair;
        }
        if du.abs() < 0.11 && v > 0.80 {
            c = scale(self.skin, 0.82);
        }
        let Some(hw) = self.head_half_width(v) else {
            return c;
        };
        if du.abs() > hw {
            return c;
        }
        c = self.skin;

        if spec.age_group == AgeGroup::Child {
            for side in [-1.0, 1.0] {
                let d = ((u - 0.5 - side * 0.19).powi(2) + (v - 0.60).powi(2)).sqrt();
                if d < 0.05 {
                    c = mix(c, [0.95, 0.45, 0.50], 0.35 * (1.0 - d / 0.05));
                }
            }
        }
        let wrinkles: &[f64] = match spec.age_group {
            AgeGroup::Adult => &[0.27],
            AgeGroup::Senior => &[0.245, 0.275, 0.305],
            _ => &[],
        };
        for &wy in wrinkles {
            if du.abs() < 0.12 && (v - wy - 0.01 * (du / 0.12).powi(2)).abs() < 0.006 {
                c = scale(self.skin, 0.7);
            }
        }

        let hairline = match (spec.age_group, spec.gender) {
            (AgeGroup::Teenager, _) if du.abs() < 0.26 => 0.32,
            (_, Gender::A) => 0.21,
            (_, Gender::B) => 0.19 + 0.04 * (du.abs() / HEAD_HALF_WIDTH),
        };
        if v < hairline {
            c = self.hair;
        }

        let e = eye_half_spacing(spec.gender);
        for side in [-1.0, 1.0] {
            let cx = 0.5 + side * e;
            let dx = u - cx;
            let brow = match spec.gender {
                Gender::A => dx.abs() < 0.07 && (v - 0.385).abs() < 0.014,
                Gender::B => {
                    let arc = 0.39 - 0.022 * (1.0 - (dx / 0.07).powi(2));
                    dx.abs() < 0.07 && (v - arc).abs() < 0.006
                }
            };
            if brow {
                c = scale(self.hair, 0.8);
            }
            let ex = dx / self.eye_rx;
            let ey = (v - EYE_Y) / self.eye_ry;
            if ex * ex + ey * ey <= 1.0 {
                c = [0.96, 0.96, 0.97];
                let r = (dx * dx + (v - EYE_Y).powi(2)).sqrt();
                if r < self.iris_r {
                    c = if r < self.iris_r * 0.45 { [0.02, 0.02, 0.02] } else { self.iris };
                }
            }
        }

        if du.abs() < 0.012 && v > 0.50 && v < NOSE_Y - 0.01 {
            c = scale(self.skin, 0.86);
        }
        for side in [-1.0, 1.0] {
            let d = ((u - 0.5 - side * 0.024).powi(2) + (v - NOSE_Y).powi(2)).sqrt();
            if d < 0.012 {
                c = scale(self.skin, 0.55);
            }
        }

        self.shade_mouth(u, v, c)
    }

    fn shade_mouth(&self, u: f64, v: f64, c: Rgb) -> Rgb {
        let spec = &self.spec;
        let du = u - 0.5;
        let ry = if spec.smiling {
            0.035 + spec.lip_thickness / 2.0
        } else {
            spec.lip_thickness / 2.0 + 0.004
        };
        let ex = du / MOUTH_HALF_SPAN;
        let ey = (v - MOUTH_Y) / ry;
        if ex * ex + ey * ey > 1.0 {
            return c;
        }
        if !spec.smiling {
            if du.abs() < 0.125 && (v - MOUTH_Y).abs() < 0.003 {
                return scale(self.lip, 0.55);
            }
            return self.lip;
        }
        let half_open = (TEETH_RIGHT - TEETH_LEFT) / 2.0;
        let open_bottom = TEETH_BOTTOM + 0.02 * (1.0 - (du / half_open).powi(2)).max(0.0).sqrt();
        if du.abs() >= half_open || v < TEETH_TOP || v > open_bottom {
            return self.lip;
        }
        if v > TEETH_BOTTOM {
            return MOUTH_INTERIOR;
        }
        let n = spec.tooth_count as f64;
        let w = TEETH_RIGHT - TEETH_LEFT;
        let gap = spec.tooth_gap * w / (n + 1.0);
        let tooth = (1.0 - spec.tooth_gap) * w / n;
        let mut x = u - TEETH_LEFT - gap;
        for _ in 0..spec.tooth_count {
            if x < 0.0 {
                return MOUTH_INTERIOR;
            }
            if x < tooth {
                return TOOTH;
            }
            x -= tooth + gap;
        }
        MOUTH_INTERIOR
    }
}

fn rasterize(res: usize, canonical_of: impl Fn(f64, f64) -> (f64, f64), shade: impl Fn(f64, f64) -> Rgb) -> ImageTensor {
    let r = res as f64;
    let k = SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(res * res * 3);
    for y in 0..res {
        for x in 0..res {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) / k;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / k;
                    let (qx, qy) = canonical_of(px, py);
                    let col = shade((qx + 0.5) / r, (qy + 0.5) / r);
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for a in acc {
                data.push(2.0 * a / (k * k) - 1.0);
            }
        }
    }
    ImageTensor::from_clamped(res, res, data).expect("positive resolution")
}

/// Render `spec` in the canonical pose.
pub fn render_face(spec: &FaceSpec, resolution: usize) -> Result<RenderedFace> {
    check_resolution(resolution)?;
    spec.validate()?;
    let scene = Scene::new(spec);
    let image = rasterize(resolution, |x, y| (x, y), |u, v| scene.shade(u, v));
    Ok(RenderedFace {
        image,
        landmarks: landmarks_for(spec.gender, resolution),
        dental_region: dental_region(spec, resolution),
        labels: *spec,
    })
}

/// Render `spec` with the whole scene moved by `pose` (pixel coordinates).
/// Landmarks are mapped through `pose`; the dental region becomes the
/// clamped bounding box of the moved rectangle.
pub fn render_face_posed(spec: &FaceSpec, resolution: usize, pose: &SimilarityTransform) -> Result<RenderedFace> {
    check_resolution(resolution)?;
    spec.validate()?;
    let scene = Scene::new(spec);
    let inv = pose.inverse();
    let image = rasterize(
        resolution,
        |x, y| {
            let q = inv.apply(Point::new(x, y));
            (q.x, q.y)
        },
        |u, v| scene.shade(u, v),
    );
    let rect = dental_region(spec, resolution);
    let corners = [
        (rect.x0 as f64 - 0.5, rect.y0 as f64 - 0.5),
        (rect.x1 as f64 - 0.5, rect.y0 as f64 - 0.5),
        (rect.x0 as f64 - 0.5, rect.y1 as f64 - 0.5),
        (rect.x1 as f64 - 0.5, rect.y1 as f64 - 0.5),
    ]
    .map(|(x, y)| pose.apply(Point::new(x, y)));
    let r = resolution as f64;
    let lo = |f: fn(&Point) -> f64| corners.iter().map(f).fold(f64::INFINITY, f64::min);
    let hi = |f: fn(&Point) -> f64| corners.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (lo(|p| p.x) + 0.5).floor().clamp(0.0, r - 1.0) as usize;
    let y0 = (lo(|p| p.y) + 0.5).floor().clamp(0.0, r - 1.0) as usize;
    let x1 = ((hi(|p| p.x) + 0.5).ceil().clamp(1.0, r) as usize).max(x0 + 1);
    let y1 = ((hi(|p| p.y) + 0.5).ceil().clamp(1.0, r) as usize).max(y0 + 1);
    Ok(RenderedFace {
        image,
        landmarks: landmarks_for(spec.gender, resolution).map(pose),
        dental_region: RegionSpec::new(x0, y0, x1, y1),
        labels: *spec,
    })
}

/// A face-free procedural texture.
pub fn render_negative(seed: u64, resolution: usize) -> Result<ImageTensor> {
    check_resolution(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e6a_7e00_0000_0002);
    let col = |rng: &mut ChaCha8Rng| hsv(rng.gen(), rng.gen_range(0.0..0.8), rng.gen_range(0.1..0.95));
    let a = col(&mut rng);
    let b = col(&mut rng);
    let kind = rng.gen_range(0..6);
    let freq = rng.gen_range(2.0..10.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let blobs: Vec<(f64, f64, f64, Rgb)> = (0..rng.gen_range(2..7))
        .map(|_| (rng.gen(), rng.gen(), rng.gen_range(0.05..0.3), col(&mut rng)))
        .collect();
    let noise: Vec<f64> = (0..resolution * resolution * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = resolution as f64;
    let shade = |u: f64, v: f64| -> Rgb {
        let proj = u * ca + v * sa;
        match kind {
            0 => a,
            1 => {
                let px = ((u * r) as usize).min(resolution - 1);
                let py = ((v * r) as usize).min(resolution - 1);
                let i = (py * resolution + px) * 3;
                let amp = 0.5;
                [
                    0.5 + amp * noise[i] * 0.9,
                    0.5 + amp * noise[i + 1] * 0.9,
                    0.5 + amp * noise[i + 2] * 0.9,
                ]
            }
            2 => {
                if (proj * freq).fract() < 0.5 {
                    a
                } else {
                    b
                }
            }
            3 => {
                let mut c = a;
                for &(bx, by, br, bc) in &blobs {
                    if (u - bx).powi(2) + (v - by).powi(2) < br * br {
                        c = bc;
                    }
                }
                c
            }
            4 => mix(a, b, proj.clamp(0.0, 1.0)),
            _ => {
                let cells = freq.round();
                if (((u * cells).floor() + (v * cells).floor()) as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    };
    Ok(rasterize(resolution, |x, y| (x, y), shade))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{spec_from_seed, Distribution};

    #[test]
    fn rendering_is_deterministic() {
        let spec = spec_from_seed(7, Distribution::Base);
        let a = render_face(&spec, 64).unwrap();
        let b = render_face(&spec, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unsupported_resolution() {
        let spec = spec_from_seed(1, Distribution::Base);
        assert!(matches!(render_face(&spec, 48), Err(Error::Config(_))));
        assert!(render_negative(1, 100).is_err());
    }

    fn tooth_band_count(face: &RenderedFace) -> usize {
        let r = face.dental_region;
        let mut n = 0;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let p = face.image.pixel(y, x);
                let near = (0..3).all(|c| ((p[c] + 1.0) / 2.0 - TOOTH[c]).abs() <= 0.06);
                n += near as usize;
            }
        }
        n
    }

    #[test]
    fn closed_mouth_hides_teeth() {
        for seed in 0..300 {
            let spec = spec_from_seed(seed, Distribution::Base);
            let face = render_face(&spec, 64).unwrap();
            if spec.smiling {
                assert!(crate::synth::tooth_gap_proxy(&face.image).is_some(), "seed {seed}: smiling face shows no teeth");
            } else {
                assert_eq!(tooth_band_count(&face), 0, "seed {seed}");
            }
        }
    }

    #[test]
    fn jaw_width_scales_dental_region() {
        let spec = spec_from_seed(3, Distribution::Base);
        for res in SUPPORTED_RESOLUTIONS {
            let wide = render_face(&FaceSpec { jaw_width: 1.0, ..spec }, res).unwrap();
            let narrow = render_face(&FaceSpec { jaw_width: 0.5, ..spec }, res).unwrap();
            let ratio = wide.dental_region.width() as f64 / narrow.dental_region.width() as f64;
            assert!((ratio - 2.0).abs() <= 0.1, "res {res}: ratio {ratio}");
        }
    }

    #[test]
    fn dental_region_contains_mouth_corners() {
        for seed in 0..1000 {
            let spec = spec_from_seed(seed, Distribution::Base);
            for res in [32, 64] {
                let face = render_face(&spec, res).unwrap();
                face.dental_region.validate(res, res).unwrap();
                assert!(face.dental_region.contains_point(face.landmarks.left_mouth().x, face.landmarks.left_mouth().y));
                assert!(face.dental_region.contains_point(face.landmarks.right_mouth().x, face.landmarks.right_mouth().y));
                assert!(face.landmarks.in_bounds(res, res));
            }
        }
    }

    #[test]
    fn canonical_mouth_is_symmetric() {
        let t = canonical_landmarks(64);
        let mid = 31.5;
        assert!((t.left_mouth().x + t.right_mouth().x - 2.0 * mid).abs() < 1e-12);
        assert_eq!(t.left_mouth().y, t.right_mouth().y);
    }

    #[test]
    fn posed_render_moves_landmarks() {
        let spec = spec_from_seed(9, Distribution::Base);
        let shift = SimilarityTransform {
            scale: 1.0,
            rotation: 0.0,
            translation: (8.0, 0.0),
        };
        let base = render_face(&spec, 64).unwrap();
        let posed = render_face_posed(&spec, 64, &shift).unwrap();
        for (a, b) in base.landmarks.points.iter().zip(posed.landmarks.points) {
            assert!((b.x - a.x - 8.0).abs() < 1e-12);
        }
        let mut diff = 0.0;
        for y in 0..64 {
            for x in 8..64 {
                diff += (posed.image.get(y, x, 0) - base.image.get(y, x - 8, 0)).abs();
            }
        }
        assert!(diff / (64.0 * 56.0) < 1e-3);
        let identity = render_face_posed(&spec, 64, &SimilarityTransform::identity()).unwrap();
        assert_eq!(identity, base);
    }

    #[test]
    fn negatives_are_deterministic_and_varied() {
        let a = render_negative(4, 64).unwrap();
        assert_eq!(a, render_negative(4, 64).unwrap());
        assert_ne!(a, render_negative(5, 64).unwrap());
    }
}
