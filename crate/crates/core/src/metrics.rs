//! Image and pose error measures.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::image::Image;
use crate::pose::Quat;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        / n
}

pub fn mae(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f64::from(x - y).abs())
        .sum::<f64>()
        / n
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
}

pub fn psnr(pred: &Image, target: &Image) -> f64 {
    psnr_from_mse(mse(pred, target))
}

/// PSNR over pixels where `target` is not pure white background.
pub fn foreground_psnr(pred: &Image, target: &Image) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.data().chunks(3).zip(target.data().chunks(3)) {
        if t.iter().all(|&v| v >= 1.0) {
            continue;
        }
        total += p.iter().zip(t).map(|(&a, &b)| f64::from(a - b).powi(2)).sum::<f64>();
        count += 3;
    }
    if count == 0 {
        return PSNR_CAP;
    }
    psnr_from_mse(total / count as f64)
}

/// Rotation angle (degrees) between two orientations.
pub fn rotation_error_deg(a: &Quat, b: &Quat) -> f64 {
    a.angle_to(b).to_degrees()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
