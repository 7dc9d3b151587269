use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView4, Ix2};
use rand::Rng;

use super::{join, Param, Parameters};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on im2col buffer elements; batches are processed in chunks below it.
const COLS_BUDGET: usize = 1 << 22;
/// Smaller forward budget so each chunk is still in cache when it is multiplied.
const FORWARD_COLS_BUDGET: usize = 1 << 20;

/// 3×3 convolution, stride 1, one pixel of zero padding, no bias
/// (every convolution here is followed by batch norm).
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    in_channels: usize,
    out_channels: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * 9;
        Self {
            weight: Param::he_uniform(&[out_channels, in_channels, 3, 3], fan_in, rng),
            in_channels,
            out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn chunk_len(&self, hw: usize, budget: usize) -> usize {
        (budget / (self.in_channels * 9 * hw).max(1)).max(1)
    }

    pub fn forward(&self, x: &Array4<S>) -> Result<Array4<S>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape {
                context: "conv2d input".into(),
                expected: vec![n, self.in_channels, h, w],
                received: vec![n, c, h, w],
            });
        }
        let x = x.as_standard_layout();
        let hw = h * w;
        let wmat = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight is 4-d")
            .into_shape_with_order((self.out_channels, c * 9))
            .expect("contiguous conv weight");
        let mut out = Array4::<S>::zeros((n, self.out_channels, h, w));
        let step = self.chunk_len(hw, FORWARD_COLS_BUDGET);
        let mut b0 = 0;
        while b0 < n {
            let b1 = (b0 + step).min(n);
            let cols = im2col(x.view(), b0, b1);
            for (bi, b) in (b0..b1).enumerate() {
                let mut dst = out.slice_mut(s![b, .., .., ..]);
                let mut dst = dst
                    .view_mut()
                    .into_shape_with_order((self.out_channels, hw))
                    .expect("contiguous output plane");
                general_mat_mul(S::one(), &wmat, &cols.slice(s![.., bi * hw..(bi + 1) * hw]), S::zero(), &mut dst);
            }
            b0 = b1;
        }
        Ok(out)
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Array4<S>, dy: &Array4<S>, need_dx: bool) -> Option<Array4<S>> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let cout = self.out_channels;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, c * 9))
            .expect("contiguous conv weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d view");
        let mut dw = Array2::<S>::zeros((cout, c * 9));
        let mut dx = need_dx.then(|| Array4::<S>::zeros((n, c, h, w)));
        let step = self.chunk_len(hw, COLS_BUDGET);
        let mut b0 = 0;
        while b0 < n {
            let b1 = (b0 + step).min(n);
            let stride = (b1 - b0) * hw;
            let mut dyc = Array2::<S>::zeros((cout, stride));
            {
                let dst = dyc.as_slice_mut().expect("standard layout");
                for (bi, b) in (b0..b1).enumerate() {
                    for co in 0..cout {
                        let src = dy.slice(s![b, co, .., ..]);
                        dst[co * stride + bi * hw..co * stride + (bi + 1) * hw]
                            .copy_from_slice(src.as_slice().expect("standard layout"));
                    }
                }
            }
            let cols = im2col(x.view(), b0, b1);
            general_mat_mul(S::one(), &dyc, &cols.t(), S::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                let mut dcols = Array2::<S>::zeros((c * 9, stride));
                general_mat_mul(S::one(), &wmat.t(), &dyc, S::zero(), &mut dcols);
                col2im_add(&dcols, dx, b0, b1);
            }
            b0 = b1;
        }
        let mut grad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((cout, c * 9))
            .expect("contiguous conv grad")
            .into_dimensionality::<Ix2>()
            .expect("2-d view");
        grad += &dw;
        dx
    }
}

impl<S: Scalar> Parameters<S> for Conv2d<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        out.push((join(prefix, "weight"), &self.weight));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
    }
}

/// Unfolds images `b0..b1` into a `[c*9, (b1-b0)*h*w]` patch matrix.
fn im2col<S: Scalar>(x: ArrayView4<S>, b0: usize, b1: usize) -> Array2<S> {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    let ncols = (b1 - b0) * hw;
    let mut cols = Array2::<S>::zeros((c * 9, ncols));
    let data = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let dst_row = &mut data[row * ncols..(row + 1) * ncols];
                for (bi, b) in (b0..b1).enumerate() {
                    let plane = x.slice(s![b, ci, .., ..]);
                    let plane = plane.as_slice().expect("standard layout");
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut dst_row[bi * hw + y * w..bi * hw + (y + 1) * w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(dcols: &Array2<S>, dx: &mut Array4<S>, b0: usize, b1: usize) {
    let (_, c, h, w) = dx.dim();
    let hw = h * w;
    let ncols = (b1 - b0) * hw;
    let data = dcols.as_slice().expect("standard layout");
    for (bi, b) in (b0..b1).enumerate() {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![b, ci, .., ..]);
            let plane = plane.as_slice_mut().expect("standard layout");
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 3 + ky) * 3 + kx;
                    let src_row = &data[row * ncols + bi * hw..row * ncols + (bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_row[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => add_into(&mut dst[..w - 1], &src[1..]),
                            1 => add_into(dst, src),
                            _ => add_into(&mut dst[1..], &src[..w - 1]),
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
