use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Square RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(Error::Validation(format!(
                "image of size {size} needs {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Image { size, data }
    }

    pub fn from_rgb8(size: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != size * size * 3 {
            return Err(Error::Validation(format!(
                "expected {} RGB bytes, got {}",
                size * size * 3,
                bytes.len()
            )));
        }
        Ok(Image {
            size,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first `[3, H, W]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let hw = self.size * self.size;
        Tensor::from_fn(&[3, self.size, self.size], |i| {
            T::lit(f64::from(self.data[(i % hw) * 3 + i / hw]))
        })
    }

    /// Stacks images into `[N, 3, H, W]`.
    pub fn batch_chw<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let size = images
            .first()
            .ok_or_else(|| Error::Validation("empty image batch".into()))?
            .size;
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for img in images {
            if img.size != size {
                return Err(Error::Validation("mixed image sizes in batch".into()));
            }
            data.extend_from_slice(img.to_chw::<T>().data());
        }
        Tensor::new(&[images.len(), 3, size, size], data)
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw<T: Real>(t: &[T], size: usize) -> Result<Self> {
        let hw = size * size;
        if t.len() != 3 * hw {
            return Err(Error::Validation(format!(
                "expected {} values, got {}",
                3 * hw,
                t.len()
            )));
        }
        let mut data = vec![0.0f32; 3 * hw];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (t[(i % 3) * hw + i / 3].to_f64_lossy() as f32).clamp(0.0, 1.0);
        }
        Ok(Image { size, data })
    }
}
