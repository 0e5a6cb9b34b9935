use super::{ImageTensor, RegionMask, CHANNELS};
use crate::error::{arg, Result};

fn check_dims(a: &ImageTensor, b: &ImageTensor, mask: Option<&RegionMask>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(arg(format!("image dimensions differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if let Some(m) = mask {
        if m.dims() != a.dims() {
            return Err(arg(format!("mask {:?} does not match image {:?}", m.dims(), a.dims())));
        }
    }
    Ok(())
}

/// `mask ⊙ target + (1 - mask) ⊙ context`, per pixel and channel.
pub fn stitch(target: &ImageTensor, context: &ImageTensor, mask: &RegionMask) -> Result<ImageTensor> {
    check_dims(target, context, Some(mask))?;
    let (h, w) = target.dims();
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for (p, &m) in mask.weights().iter().enumerate() {
        for c in 0..CHANNELS {
            let i = p * CHANNELS + c;
            data.push(m * target.data[i] + (1.0 - m) * context.data[i]);
        }
    }
    ImageTensor::from_clamped(h, w, data)
}

/// `Σ m·(a-b)² / (channels · Σ m)`.
pub fn masked_mse(a: &ImageTensor, b: &ImageTensor, mask: &RegionMask) -> Result<f64> {
    check_dims(a, b, Some(mask))?;
    let total = mask.total();
    if total <= 0.0 {
        return Err(arg("masked_mse needs a mask with nonzero total weight"));
    }
    let mut acc = 0.0;
    for (p, &m) in mask.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..CHANNELS {
            let d = a.data[p * CHANNELS + c] - b.data[p * CHANNELS + c];
            sq += d * d;
        }
        acc += m * sq;
    }
    Ok(acc / (CHANNELS as f64 * total))
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b, None)?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR over the mask for the `[-1, 1]` range (peak-to-peak 2).
pub fn masked_psnr(a: &ImageTensor, b: &ImageTensor, mask: &RegionMask) -> Result<f64> {
    let e = masked_mse(a, b, mask)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / e).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{make_region_mask, RegionSpec};

    fn ramp(h: usize, w: usize, k: f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c) as f64 * k).sin() * 0.9).unwrap()
    }

    #[test]
    fn degenerate_masks_pick_one_side() {
        let t = ramp(4, 5, 0.3);
        let c = ramp(4, 5, 0.7);
        assert_eq!(stitch(&t, &c, &RegionMask::ones(4, 5)).unwrap(), t);
        assert_eq!(stitch(&t, &c, &RegionMask::zeros(4, 5)).unwrap(), c);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let t = ramp(4, 5, 0.3);
        let c = ramp(5, 4, 0.7);
        assert!(stitch(&t, &c, &RegionMask::ones(4, 5)).is_err());
        assert!(masked_mse(&t, &t, &RegionMask::ones(5, 4)).is_err());
    }

    #[test]
    fn masked_mse_basic_values() {
        let a = ramp(3, 3, 0.2);
        assert_eq!(masked_mse(&a, &a, &RegionMask::ones(3, 3)).unwrap(), 0.0);
        let b = ImageTensor::from_fn(3, 3, |y, x, c| a.get(y, x, c) * 0.5 + 0.1).unwrap();
        let shifted = ImageTensor::from_fn(3, 3, |y, x, c| b.get(y, x, c) + 0.1).unwrap();
        let e = masked_mse(&b, &shifted, &RegionMask::ones(3, 3)).unwrap();
        assert!((e - 0.01).abs() < 1e-12);
        assert!(masked_mse(&a, &b, &RegionMask::zeros(3, 3)).is_err());
    }

    #[test]
    fn masked_mse_ignores_content_outside_mask() {
        let a = ramp(6, 6, 0.2);
        let b = ramp(6, 6, 0.5);
        let m = make_region_mask(RegionSpec::new(1, 1, 4, 3), 6, 6).unwrap();
        let b2 = ImageTensor::from_fn(6, 6, |y, x, c| {
            if m.at(y, x) > 0.0 {
                b.get(y, x, c)
            } else {
                -b.get(y, x, c)
            }
        })
        .unwrap();
        assert_eq!(masked_mse(&a, &b, &m).unwrap(), masked_mse(&a, &b2, &m).unwrap());
        let full = RegionMask::ones(6, 6);
        assert!((masked_mse(&a, &b, &full).unwrap() - mse(&a, &b).unwrap()).abs() < 1e-15);
    }
}
