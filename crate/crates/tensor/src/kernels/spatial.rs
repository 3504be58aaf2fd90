//! Pooling and bilinear resampling over NCHW planes.

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ceil_mode: bool,
}

impl PoolSpec {
    pub fn out_size(&self, input: usize) -> usize {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return 1;
        }
        let span = padded - self.kernel;
        let mut out = if self.ceil_mode { span.div_ceil(self.stride) } else { span / self.stride } + 1;
        // The last window must start inside the input or left padding.
        if self.ceil_mode && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        out
    }
}

/// Max pooling; returns the output and the flat input index chosen per output element.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let ho = spec.out_size(h);
    let wo = spec.out_size(w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * spec.stride) as isize - spec.padding as isize;
            let ys = y0.max(0) as usize;
            let ye = ((y0 + spec.kernel as isize) as usize).min(h);
            for ox in 0..wo {
                let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                let xs = x0.max(0) as usize;
                let xe = ((x0 + spec.kernel as isize) as usize).min(w);
                let mut best = T::neg_infinity();
                let mut best_i = base + ys * w + xs;
                for iy in ys..ye {
                    for ix in xs..xe {
                        let i = base + iy * w + ix;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Non-overlapping `k x k` average pooling; spatial dims must be divisible by `k`.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::InvalidArgument(format!("avgpool: {h}x{w} not divisible by {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        for iy in 0..h {
            for ix in 0..w {
                out[(plane * ho + iy / k) * wo + ix / k] += xd[(plane * h + iy) * w + ix];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn avgpool2d_backward<T: Scalar>(input_shape: &[usize], k: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    let gd = grad_out.data();
    Tensor::from_vec(
        input_shape,
        (0..n * c * h * w)
            .map(|i| {
                let plane = i / (h * w);
                let iy = (i / w) % h;
                let ix = i % w;
                gd[(plane * ho + iy / k) * wo + ix / k] * inv
            })
            .collect(),
    )
}

/// How bilinear sampling treats source coordinates beyond the outermost sample centres.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Clamp to the edge sample (half-pixel-centre convention).
    Clamp,
    /// Continue the edge segment linearly, so affine signals are reproduced exactly.
    Extrapolate,
}

/// Per output coordinate: (i0, i1, weight of i1).
fn axis_taps<T: Scalar>(input: usize, output: usize, border: Border) -> Vec<(usize, usize, T)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            if input == 1 {
                return (0, 0, T::zero());
            }
            let src = (o as f64 + 0.5) * ratio - 0.5;
            match border {
                Border::Clamp => {
                    let s = src.max(0.0);
                    let i0 = (s.floor() as usize).min(input - 1);
                    let i1 = (i0 + 1).min(input - 1);
                    (i0, i1, T::lit(s - i0 as f64))
                }
                Border::Extrapolate => {
                    let i0 = (src.floor().max(0.0) as usize).min(input - 2);
                    (i0, i0 + 1, T::lit(src - i0 as f64))
                }
            }
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, border: Border) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let ty = axis_taps::<T>(h, out_h, border);
    let tx = axis_taps::<T>(w, out_w, border);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>, border: Border) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let ty = axis_taps::<T>(h, out_h, border);
    let tx = axis_taps::<T>(w, out_w, border);
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let p = &mut dx[plane * h * w..(plane + 1) * h * w];
        let g = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let a = v * (T::one() - ly);
                let b = v * ly;
                p[y0 * w + x0] += a * (T::one() - lx);
                p[y0 * w + x1] += a * lx;
                p[y1 * w + x0] += b * (T::one() - lx);
                p[y1 * w + x1] += b * lx;
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}
