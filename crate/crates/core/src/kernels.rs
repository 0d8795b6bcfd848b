//! Raw compute kernels behind the graph primitives.
//!
//! Everything here is a pure function of its inputs with a fixed reduction
//! order, so results are bitwise-deterministic on one platform regardless of
//! thread count. Convolution parallelizes over batch samples; each sample is
//! an independent im2col + GEMM with disjoint output.

use rayon::prelude::*;

use crate::tensor::Elem;

/// Output extent of a convolution along one axis, or None when the geometry
/// is invalid (kernel larger than padded input, or stride does not divide).
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = extent + 2 * pad;
    if span < k || stride == 0 {
        return None;
    }
    let d = span - k;
    if d % stride != 0 {
        return None;
    }
    Some(d / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    let l = oh * ow;
    let mut r = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..][..h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[r * l..(r + 1) * l];
                r += 1;
                let mut li = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        row[li..li + ow].fill(E::zero());
                        li += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        row[li] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            plane[base + ix as usize]
                        };
                        li += 1;
                    }
                }
            }
        }
    }
}

/// Direct cross-correlation: x (N,C,H,W) with weights (O,C,KH,KW).
/// Returns the output buffer of shape (N,O,OH,OW).
#[allow(clippy::too_many_arguments)]
pub fn conv2d<E: Elem>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wt: &[E],
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let l = oh * ow;
    let k = c * kh * kw;
    let per_sample_in = c * h * w;
    let per_sample_out = o * l;
    let mut out = vec![E::zero(); n * per_sample_out];

    let run = |ni: usize, out_chunk: &mut [E]| {
        let xs = &x[ni * per_sample_in..][..per_sample_in];
        let mut col = vec![E::zero(); k * l];
        im2col(xs, c, h, w, kh, kw, stride, ph, pw, oh, ow, &mut col);
        E::gemm(o, k, l, E::one(), wt, &col, E::zero(), out_chunk);
    };

    // Parallel only when there is real work per sample; chunk boundaries are
    // fixed by sample index, so the result does not depend on thread count.
    if n > 1 && k * l > 16384 {
        out.par_chunks_mut(per_sample_out)
            .enumerate()
            .for_each(|(ni, chunk)| run(ni, chunk));
    } else {
        for (ni, chunk) in out.chunks_mut(per_sample_out).enumerate() {
            run(ni, chunk);
        }
    }
    out
}

pub fn matmul<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    E::gemm(m, k, n, E::one(), a, b, E::zero(), &mut c);
    c
}

pub fn transpose2d<E: Elem>(x: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Swap the first two axes of a tensor whose trailing axes form a contiguous
/// block of `block` elements.
pub fn transpose01<E: Elem>(x: &[E], d0: usize, d1: usize, block: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            let src = (i * d1 + j) * block;
            let dst = (j * d0 + i) * block;
            out[dst..dst + block].copy_from_slice(&x[src..src + block]);
        }
    }
    out
}

/// Reverse both spatial axes of (…,KH,KW) planes.
pub fn flip_hw<E: Elem>(x: &[E], planes: usize, kh: usize, kw: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    let a = kh * kw;
    for p in 0..planes {
        let src = &x[p * a..][..a];
        let dst = &mut out[p * a..][..a];
        for y in 0..kh {
            for xk in 0..kw {
                dst[y * kw + xk] = src[(kh - 1 - y) * kw + (kw - 1 - xk)];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsample of (planes,H,W).
pub fn nn_up2<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let mut out = vec![E::zero(); planes * 4 * h * w];
    let ow = 2 * w;
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for xc in 0..w {
                let v = src[y * w + xc];
                let o = 2 * y * ow + 2 * xc;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

/// Sum of each 2x2 block; adjoint of `nn_up2`. Extents must be even.
pub fn block_sum2<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xc in 0..ow {
                let o = 2 * y * w + 2 * xc;
                dst[y * ow + xc] = src[o] + src[o + 1] + src[o + w] + src[o + w + 1];
            }
        }
    }
    out
}

/// Zero-insertion upsample: out[2i] = in[i], target extents in {2n-1, 2n}.
pub fn dilate2<E: Elem>(x: &[E], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<E> {
    debug_assert!(th == 2 * h - 1 || th == 2 * h);
    debug_assert!(tw == 2 * w - 1 || tw == 2 * w);
    let mut out = vec![E::zero(); planes * th * tw];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * th * tw..][..th * tw];
        for y in 0..h {
            for xc in 0..w {
                dst[2 * y * tw + 2 * xc] = src[y * w + xc];
            }
        }
    }
    out
}

/// Take even-index rows/columns; adjoint of `dilate2`.
pub fn subsample_even<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xc in 0..ow {
                dst[y * ow + xc] = src[2 * y * w + 2 * xc];
            }
        }
    }
    out
}

const BLUR_TAPS: [f64; 3] = [0.25, 0.5, 0.25];

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 3-tap binomial smoothing ([1,2,1]⊗[1,2,1]/16) with replicate borders,
/// so constant inputs stay constant.
pub fn blur3<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let taps: [E; 3] = [
        E::from_f64(BLUR_TAPS[0]),
        E::from_f64(BLUR_TAPS[1]),
        E::from_f64(BLUR_TAPS[2]),
    ];
    let mut tmp = vec![E::zero(); h * w];
    let mut out = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        // horizontal
        for y in 0..h {
            let row = &src[y * w..][..w];
            let dst = &mut tmp[y * w..][..w];
            for xc in 0..w {
                let l = row[clamp_idx(xc as isize - 1, w)];
                let r = row[clamp_idx(xc as isize + 1, w)];
                dst[xc] = taps[0] * l + taps[1] * row[xc] + taps[2] * r;
            }
        }
        // vertical
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            let up = clamp_idx(y as isize - 1, h) * w;
            let dn = clamp_idx(y as isize + 1, h) * w;
            for xc in 0..w {
                dst[y * w + xc] =
                    taps[0] * tmp[up + xc] + taps[1] * tmp[y * w + xc] + taps[2] * tmp[dn + xc];
            }
        }
    }
    out
}

/// Exact adjoint of `blur3` (scatter form of the clamped taps).
pub fn blur3_adjoint<E: Elem>(g: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let taps: [E; 3] = [
        E::from_f64(BLUR_TAPS[0]),
        E::from_f64(BLUR_TAPS[1]),
        E::from_f64(BLUR_TAPS[2]),
    ];
    let mut tmp = vec![E::zero(); h * w];
    let mut out = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * h * w..][..h * w];
        // adjoint of the vertical pass first (forward applied it last)
        tmp.fill(E::zero());
        for y in 0..h {
            let up = clamp_idx(y as isize - 1, h) * w;
            let dn = clamp_idx(y as isize + 1, h) * w;
            for xc in 0..w {
                let v = src[y * w + xc];
                tmp[up + xc] = tmp[up + xc] + taps[0] * v;
                tmp[y * w + xc] = tmp[y * w + xc] + taps[1] * v;
                tmp[dn + xc] = tmp[dn + xc] + taps[2] * v;
            }
        }
        // adjoint of the horizontal pass
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            let row = &tmp[y * w..][..w];
            let drow = &mut dst[y * w..][..w];
            for xc in 0..w {
                let v = row[xc];
                let l = clamp_idx(xc as isize - 1, w);
                let r = clamp_idx(xc as isize + 1, w);
                drow[l] = drow[l] + taps[0] * v;
                drow[xc] = drow[xc] + taps[1] * v;
                drow[r] = drow[r] + taps[2] * v;
            }
        }
    }
    out
}

/// Broadcast-compatible result shape: equal ranks, each axis equal or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        })
        .collect()
}

fn strides_for(shape: &[usize], broadcast_into: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && broadcast_into[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Elementwise binary op under broadcasting. `oshape` must come from
/// `broadcast_shape`.
pub fn broadcast_bin<E: Elem>(
    a: &[E],
    ashape: &[usize],
    b: &[E],
    bshape: &[usize],
    oshape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let numel: usize = oshape.iter().product();
    let rank = oshape.len();
    let astr = strides_for(ashape, oshape);
    let bstr = strides_for(bshape, oshape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a[ao], b[bo]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += astr[d];
            bo += bstr[d];
            if idx[d] < oshape[d] {
                break;
            }
            idx[d] = 0;
            ao -= astr[d] * oshape[d];
            bo -= bstr[d] * oshape[d];
        }
    }
    out
}

/// Materialize a broadcast of `x` to `target`.
pub fn broadcast_to<E: Elem>(x: &[E], shape: &[usize], target: &[usize]) -> Vec<E> {
    if shape == target {
        return x.to_vec();
    }
    let numel: usize = target.iter().product();
    let rank = target.len();
    let xstr = strides_for(shape, target);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut xo = 0usize;
    for _ in 0..numel {
        out.push(x[xo]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            xo += xstr[d];
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
            xo -= xstr[d] * target[d];
        }
    }
    out
}

/// Sum over the masked axes, keeping them as extent-1 dims.
pub fn reduce_sum<E: Elem>(x: &[E], shape: &[usize], mask: &[bool]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let oshape: Vec<usize> =
        shape.iter().zip(mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
    let onumel: usize = oshape.iter().product();
    let ostr = strides_for(&oshape, shape);
    let mut out = vec![E::zero(); onumel];
    let mut idx = vec![0usize; rank];
    let mut oo = 0usize;
    for &v in x {
        out[oo] = out[oo] + v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            oo += ostr[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            oo -= ostr[d] * shape[d];
        }
    }
    (out, oshape)
}

pub fn all_finite<E: Elem>(x: &[E]) -> bool {
    x.iter().all(|v| v.is_finite())
}
