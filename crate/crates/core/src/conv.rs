//! Spatial kernels behind the tape's image ops. Tensors are `[N, C, H, W]` or
//! `[C, H, W]` (treated as `N = 1`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strided};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Border pixels are repeated, so constant inputs stay exactly constant.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize, mode: Padding) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
            mode,
        }
    }

    /// Output extent for an input extent, or a configuration error when the
    /// kernel does not tile the padded input exactly.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if self.padding >= self.kernel {
            return Err(Error::Config(format!(
                "padding {} must be smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel || !(padded - self.kernel).is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "kernel {} with stride {} and padding {} does not tile input {input}",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0, 0])),
    }
}

fn out_shape(input: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if input.len() == 3 {
        vec![c, h, w]
    } else {
        vec![input[0], c, h, w]
    }
}

/// Source coordinate for a padded coordinate, `None` for zero padding.
fn source(coord: isize, extent: usize, mode: Padding) -> Option<usize> {
    if coord >= 0 && (coord as usize) < extent {
        return Some(coord as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Replicate => Some(coord.clamp(0, extent as isize - 1) as usize),
    }
}

/// Returns the output and the per-image im2col buffers (kept for backward).
pub fn forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, wd) = nchw(x.shape(), "conv2d")?;
    let [o, wc, kh, kw] = *w.shape() else {
        return Err(Error::shape(
            "conv2d weight",
            w.shape(),
            &[0, c, geom.kernel, geom.kernel],
        ));
    };
    if wc != c || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.len() != o {
            return Err(Error::shape("conv2d bias", b.shape(), &[o]));
        }
    }
    let ho = geom.output_size(h)?;
    let wo = geom.output_size(wd)?;
    let ckk = c * kh * kw;
    let p = ho * wo;
    let mut cols = vec![T::zero(); n * ckk * p];
    for img in 0..n {
        let src = &x.data()[img * c * h * wd..(img + 1) * c * h * wd];
        im2col(
            src,
            (c, h, wd),
            (ho, wo),
            geom,
            &mut cols[img * ckk * p..(img + 1) * ckk * p],
        );
    }
    let mut out = vec![T::zero(); n * o * p];
    for img in 0..n {
        gemm(
            o,
            ckk,
            p,
            T::one(),
            w.data(),
            Strided::row_major(0, ckk),
            &cols,
            Strided::row_major(img * ckk * p, p),
            T::zero(),
            &mut out,
            Strided::row_major(img * o * p, p),
        );
    }
    if let Some(b) = b {
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bias = b.data()[i % o];
            for v in chunk {
                *v += bias;
            }
        }
    }
    Ok((Tensor::from_parts(out_shape(x.shape(), o, ho, wo), out), cols))
}

/// Source index along one axis for every (kernel offset, output position)
/// pair; `usize::MAX` marks zero padding.
fn axis_map(extent: usize, out: usize, geom: ConvGeometry) -> Vec<usize> {
    let mut map = Vec::with_capacity(geom.kernel * out);
    for ki in 0..geom.kernel {
        for o in 0..out {
            let coord = (o * geom.stride + ki) as isize - geom.padding as isize;
            map.push(source(coord, extent, geom.mode).unwrap_or(usize::MAX));
        }
    }
    map
}

fn im2col<T: Real>(
    src: &[T],
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    geom: ConvGeometry,
    cols: &mut [T],
) {
    let k = geom.kernel;
    let p = ho * wo;
    let (ymap, xmap) = (axis_map(h, ho, geom), axis_map(w, wo, geom));
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let xs = &xmap[kj * wo..(kj + 1) * wo];
                for (oy, &sy) in ymap[ki * ho..(ki + 1) * ho].iter().enumerate() {
                    if sy == usize::MAX {
                        continue;
                    }
                    let line = &plane[sy * w..(sy + 1) * w];
                    for (d, &sx) in dst[oy * wo..(oy + 1) * wo].iter_mut().zip(xs) {
                        if sx != usize::MAX {
                            *d = line[sx];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (ho, wo): (usize, usize),
    geom: ConvGeometry,
    dst: &mut [T],
) {
    let k = geom.kernel;
    let p = ho * wo;
    let (ymap, xmap) = (axis_map(h, ho, geom), axis_map(w, wo, geom));
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let xs = &xmap[kj * wo..(kj + 1) * wo];
                for (oy, &sy) in ymap[ki * ho..(ki + 1) * ho].iter().enumerate() {
                    if sy == usize::MAX {
                        continue;
                    }
                    let line = &mut plane[sy * w..(sy + 1) * w];
                    for (&v, &sx) in src[oy * wo..(oy + 1) * wo].iter().zip(xs) {
                        if sx != usize::MAX {
                            line[sx] += v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::type_complexity)]
pub fn backward<T: Real>(
    x_shape: &[usize],
    w: &Tensor<T>,
    cols: &[T],
    g: &Tensor<T>,
    geom: ConvGeometry,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = nchw(x_shape, "conv2d")?;
    let o = w.shape()[0];
    let (ho, wo) = (geom.output_size(h)?, geom.output_size(wd)?);
    let ckk = c * geom.kernel * geom.kernel;
    let p = ho * wo;
    let gd = g.data();

    let mut dw = vec![T::zero(); o * ckk];
    let mut db = vec![T::zero(); o];
    for img in 0..n {
        gemm(
            o,
            p,
            ckk,
            T::one(),
            gd,
            Strided::row_major(img * o * p, p),
            cols,
            Strided::transposed(img * ckk * p, p),
            T::one(),
            &mut dw,
            Strided::row_major(0, ckk),
        );
        for ch in 0..o {
            db[ch] += gd[(img * o + ch) * p..(img * o + ch + 1) * p]
                .iter()
                .copied()
                .sum::<T>();
        }
    }

    let dx = if need_x {
        let mut dx = vec![T::zero(); n * c * h * wd];
        let mut dcols = vec![T::zero(); ckk * p];
        for img in 0..n {
            gemm(
                ckk,
                o,
                p,
                T::one(),
                w.data(),
                Strided::transposed(0, ckk),
                gd,
                Strided::row_major(img * o * p, p),
                T::zero(),
                &mut dcols,
                Strided::row_major(0, p),
            );
            col2im(
                &dcols,
                (c, h, wd),
                (ho, wo),
                geom,
                &mut dx[img * c * h * wd..(img + 1) * c * h * wd],
            );
        }
        Some(Tensor::from_parts(x_shape.to_vec(), dx))
    } else {
        None
    };
    Ok((
        dx,
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    ))
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x.shape(), "upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(out_shape(x.shape(), c, h2, w2), out))
}

pub fn upsample2x_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = nchw(x_shape, "upsample2x").expect("validated in forward");
    let w2 = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..w2 {
                dx[plane * h * w + (y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

pub fn chw_to_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x.shape(), "chw_to_rows")?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for img in 0..n {
        for ch in 0..c {
            for s in 0..hw {
                out[(img * hw + s) * c + ch] = x.data()[(img * c + ch) * hw + s];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n * hw, c], out))
}

pub fn rows_to_chw<T: Real>(x: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (rows, c) = x.dims2("rows_to_chw")?;
    if rows != n * h * w {
        return Err(Error::shape("rows_to_chw", x.shape(), &[n * h * w, c]));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for img in 0..n {
        for s in 0..hw {
            for ch in 0..c {
                out[(img * c + ch) * hw + s] = x.data()[(img * hw + s) * c + ch];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

pub fn diff<T: Real>(x: &Tensor<T>, vertical: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x.shape(), "diff")?;
    let (ho, wo) = if vertical { (h - 1, w) } else { (h, w - 1) };
    if ho == 0 || wo == 0 {
        return Err(Error::shape("diff", x.shape(), &[n, c, 2, 2]));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let next = if vertical {
                    src[(y + 1) * w + xx]
                } else {
                    src[y * w + xx + 1]
                };
                out.push(next - src[y * w + xx]);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape(x.shape(), c, ho, wo), out))
}

pub fn diff_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize], vertical: bool) -> Tensor<T> {
    let (n, c, h, w) = nchw(x_shape, "diff").expect("validated in forward");
    let (ho, wo) = if vertical { (h - 1, w) } else { (h, w - 1) };
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let gp = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let gv = gp[y * wo + xx];
                let next = if vertical { (y + 1) * w + xx } else { y * w + xx + 1 };
                dp[next] += gv;
                dp[y * w + xx] -= gv;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}
