//! 2-D convolution through im2col + GEMM, NCHW layout.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatLayout};
use crate::{Scalar, Tensor};

/// Square-kernel convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(kernel: usize) -> Self {
        Self { kernel, stride: 1, padding: 0, dilation: 1, groups: 1 }
    }

    /// `kernel x kernel`, stride 1, padding that preserves spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { kernel, stride: 1, padding: dilation * (kernel - 1) / 2, dilation, groups: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-accumulate count for one forward pass.
    pub fn macs(&self, batch: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
        (batch * self.kernel * self.kernel * (c_in / self.groups) * c_out * h_out * w_out) as u64
    }
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    kdim: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: &Conv2dSpec) -> Result<Geometry> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, cig, kh, kw) = weight.dims4()?;
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 || cig * g != c_in || kh != spec.kernel || kw != spec.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![c_out, c_in / g.max(1), spec.kernel, spec.kernel],
            got: weight.shape().to_vec(),
        });
    }
    let (ho, wo) = match (spec.out_size(h), spec.out_size(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(TensorError::InvalidArgument(format!("conv2d: input {h}x{w} smaller than kernel span"))),
    };
    Ok(Geometry { n, c_in, h, w, c_out, ho, wo, cig, cog: c_out / g, kdim: cig * spec.kernel * spec.kernel })
}

/// Output columns `[lo, hi)` whose input column `ox*stride - pad + off` lies in `[0, len)`.
fn valid_range(len: usize, out: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    // ix = ox*s + off - pad >= 0  <=>  ox >= ceil((pad - off) / s)
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    // ix < len  <=>  ox*s < len + pad - off
    let hi = if len + pad <= off { 0 } else { (len + pad - off).div_ceil(stride) };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, spec: &Conv2dSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cig {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(g.w, g.wo, spec.stride, spec.padding, kj * spec.dilation);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    let base = kj * spec.dilation;
                    for (ox, v) in line[xlo..xhi].iter_mut().enumerate() {
                        *v = src[(xlo + ox) * spec.stride + base - spec.padding];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, spec: &Conv2dSpec, dx: &mut [T]) {
    let k = spec.kernel;
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cig {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (xlo, xhi) = valid_range(g.w, g.wo, spec.stride, spec.padding, kj * spec.dilation);
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = kj * spec.dilation;
                    for ox in xlo..xhi {
                        dst[ox * spec.stride + base - spec.padding] += line[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &Conv2dSpec) -> Result<Tensor<T>> {
    let g = geometry(x, weight, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv2d bias", expected: vec![g.c_out], got: b.shape().to_vec() });
        }
    }
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    let mut cols = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); g.kdim * hw_out] };
    let xd = x.data();
    let wd = weight.data();
    for ni in 0..g.n {
        for gi in 0..spec.groups {
            let xs = &xd[(ni * g.c_in + gi * g.cig) * hw_in..(ni * g.c_in + (gi + 1) * g.cig) * hw_in];
            let colref: &[T] = if spec.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, spec, &mut cols);
                &cols
            };
            let ws = &wd[gi * g.cog * g.kdim..(gi + 1) * g.cog * g.kdim];
            let os = &mut out[(ni * g.c_out + gi * g.cog) * hw_out..(ni * g.c_out + (gi + 1) * g.cog) * hw_out];
            gemm(T::one(), ws, MatLayout::new(g.cog, g.kdim, false), colref, MatLayout::new(g.kdim, hw_out, false), T::zero(), os);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let o = (ni * g.c_out + co) * hw_out;
                for v in &mut out[o..o + hw_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.c_out, g.ho, g.wo], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &Conv2dSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(x, weight, spec)?;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    if grad_out.shape() != [g.n, g.c_out, g.ho, g.wo] {
        return Err(TensorError::ShapeMismatch { op: "conv2d backward", expected: vec![g.n, g.c_out, g.ho, g.wo], got: grad_out.shape().to_vec() });
    }
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut dx = need_input.then(|| vec![T::zero(); xd.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); wd.len()]);
    let pointwise = spec.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise && !need_input { 0 } else { g.kdim * hw_out }];
    for ni in 0..g.n {
        for gi in 0..spec.groups {
            let xrange = (ni * g.c_in + gi * g.cig) * hw_in..(ni * g.c_in + (gi + 1) * g.cig) * hw_in;
            let gs = &gd[(ni * g.c_out + gi * g.cog) * hw_out..(ni * g.c_out + (gi + 1) * g.cog) * hw_out];
            let wrange = gi * g.cog * g.kdim..(gi + 1) * g.cog * g.kdim;
            if let Some(dw) = dw.as_mut() {
                let colref: &[T] = if pointwise {
                    &xd[xrange.clone()]
                } else {
                    im2col(&xd[xrange.clone()], &g, spec, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    gs,
                    MatLayout::new(g.cog, hw_out, false),
                    colref,
                    MatLayout::new(hw_out, g.kdim, true),
                    T::one(),
                    &mut dw[wrange.clone()],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let ws = &wd[wrange];
                if pointwise {
                    gemm(T::one(), ws, MatLayout::new(g.kdim, g.cog, true), gs, MatLayout::new(g.cog, hw_out, false), T::one(), &mut dx[xrange]);
                } else {
                    gemm(T::one(), ws, MatLayout::new(g.kdim, g.cog, true), gs, MatLayout::new(g.cog, hw_out, false), T::zero(), &mut cols);
                    col2im(&cols, &g, spec, &mut dx[xrange]);
                }
            }
        }
    }
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for ni in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let o = (ni * g.c_out + co) * hw_out;
                *acc += gd[o..o + hw_out].iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::from_vec(&[g.c_out], d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: &Conv2dSpec) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (co, cig, k, _) = w.dims4().unwrap();
        let ho = s.out_size(h).unwrap();
        let wo = s.out_size(wd).unwrap();
        let cog = co / s.groups;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for ni in 0..n {
            for o in 0..co {
                let gi = o / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..cig {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(&[o, ci, ki, kj]) * x.at(&[ni, gi * cig + ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[ni, o, oy, ox], acc);
                    }
                }
            }
        }
        let _ = c;
        out
    }

    fn check(spec: Conv2dSpec, c_in: usize, c_out: usize, h: usize, w: usize) {
        let x = Tensor::from_fn(&[2, c_in, h, w], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let wt = Tensor::from_fn(&[c_out, c_in / spec.groups, spec.kernel, spec.kernel], |i| ((i * 104729) % 17) as f64 / 8.0 - 1.0);
        let b = Tensor::from_fn(&[c_out], |i| i as f64 * 0.1);
        let got = conv2d_forward(&x, &wt, Some(&b), &spec).unwrap();
        let want = naive(&x, &wt, Some(&b), &spec);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10, "{spec:?}");
    }

    #[test]
    fn forward_matches_naive() {
        check(Conv2dSpec::new(3), 2, 3, 5, 6);
        check(Conv2dSpec::same(3, 1), 2, 3, 5, 6);
        check(Conv2dSpec::same(3, 2), 2, 2, 7, 7);
        check(Conv2dSpec::new(7).stride(2).padding(3), 3, 4, 9, 8);
        check(Conv2dSpec::new(1), 4, 2, 3, 3);
        check(Conv2dSpec::new(1).stride(2), 4, 2, 5, 5);
        check(Conv2dSpec::new(1).groups(2), 4, 6, 3, 4);
        check(Conv2dSpec::same(3, 1).groups(2).stride(2), 4, 2, 6, 5);
    }

    #[test]
    fn single_channel_flops_example() {
        // 3x3 conv producing a 4x4 map, one channel in and out.
        let s = Conv2dSpec::new(3);
        assert_eq!(s.out_size(6), Some(4));
        assert_eq!(2 * s.macs(1, 1, 1, 4, 4), 288);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, dX(g)> and == <w, dW(g)> by linearity.
        for spec in [Conv2dSpec::same(3, 2).stride(2), Conv2dSpec::new(1).groups(2), Conv2dSpec::new(3).padding(2)] {
            let x = Tensor::from_fn(&[2, 4, 6, 5], |i| ((i * 31) % 13) as f64 - 6.0);
            let w = Tensor::from_fn(&[4, 4 / spec.groups, spec.kernel, spec.kernel], |i| ((i * 17) % 7) as f64 - 3.0);
            let y = conv2d_forward(&x, &w, None, &spec).unwrap();
            let gout = Tensor::from_fn(y.shape(), |i| ((i * 29) % 11) as f64 - 5.0);
            let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
            let gr = conv2d_backward(&x, &w, &spec, &gout, true, true, false).unwrap();
            let via_x: f64 = x.data().iter().zip(gr.input.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(gr.weight.unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-8 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-8 * lhs.abs().max(1.0));
        }
    }
}
