use ndarray::Array4;

use crate::scalar::Scalar;

/// Output length of a 2×2, stride-2 max-pool along one axis.
///
/// Floor mode, except that a length-1 axis pools to length 1 (the window is
/// clipped to the input) so very small inputs never collapse to zero size.
pub fn pooled_len(len: usize) -> usize {
    (len / 2).max(1)
}

/// Flat argmax positions (within each `h*w` plane) for every pooled output.
#[derive(Clone, Debug, Default)]
pub struct PoolIndices {
    input_hw: (usize, usize),
    argmax: Vec<u32>,
}

pub fn max_pool_2x2<S: Scalar>(x: &Array4<S>) -> (Array4<S>, PoolIndices) {
    let (out, argmax) = pool::<S, true>(x);
    let (_, _, h, w) = x.dim();
    (out, PoolIndices { input_hw: (h, w), argmax })
}

/// Same values as [`max_pool_2x2`] without recording where they came from.
pub fn max_pool_2x2_values<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    pool::<S, false>(x).0
}

fn pool<S: Scalar, const RECORD: bool>(x: &Array4<S>) -> (Array4<S>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Array4::<S>::zeros((n, c, oh, ow));
    let mut argmax = if RECORD { vec![0u32; n * c * oh * ow] } else { Vec::new() };
    let dst = out.as_slice_mut().expect("fresh array");
    for (p, (plane, out_plane)) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(oh * ow)).enumerate() {
        let o = p * oh * ow;
        if h >= 2 && w >= 2 {
            // Every window is full; row-major scan, first maximum wins.
            for (oy, out_row) in out_plane.chunks_exact_mut(ow).enumerate() {
                let top = &plane[2 * oy * w..2 * oy * w + w];
                let bottom = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for (ox, slot) in out_row.iter_mut().enumerate() {
                    let candidates = [top[2 * ox], top[2 * ox + 1], bottom[2 * ox], bottom[2 * ox + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if candidates[k] > candidates[best] {
                            best = k;
                        }
                    }
                    *slot = candidates[best];
                    if RECORD {
                        let offset = [0, 1, w, w + 1][best];
                        argmax[o + oy * ow + ox] = (2 * oy * w + 2 * ox + offset) as u32;
                    }
                }
            }
        } else {
            for oy in 0..oh {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                for ox in 0..ow {
                    let xs = 2 * ox..(2 * ox + 2).min(w);
                    let mut best = ys.start * w + xs.start;
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            let idx = y * w + xx;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = plane[best];
                    if RECORD {
                        argmax[o + oy * ow + ox] = best as u32;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_2x2_backward<S: Scalar>(idx: &PoolIndices, dy: &Array4<S>) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let (h, w) = idx.input_hw;
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("fresh array");
    for (p, (gplane, iplane)) in g
        .chunks_exact(oh * ow)
        .zip(idx.argmax.chunks_exact(oh * ow))
        .enumerate()
    {
        let base = p * h * w;
        for (&gv, &i) in gplane.iter().zip(iplane) {
            dst[base + i as usize] += gv;
        }
    }
    dx
}
