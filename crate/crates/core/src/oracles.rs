//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plain nested loops straight from the
//! definitions, deliberately sharing no code with the production kernels it
//! checks. Kept in the library (rather than `#[cfg(test)]`) so integration
//! and acceptance suites can use the same oracles.

use crate::tensor::Elem;

/// Six-nested-loop cross-correlation. Out-of-bounds taps contribute an
/// explicit zero so the accumulation order matches the production kernel
/// term for term (needed for the bit-for-bit f64 comparison).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref<E: Elem>(
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
    pad: usize,
) -> Vec<E> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![E::zero(); n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::zero();
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let xv = if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize
                                {
                                    E::zero()
                                } else {
                                    x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                };
                                let wv = wt[((oi * c + ci) * kh + ky) * kw + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop matrix product (row-major).
pub fn matmul_ref<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// The full 3x3 binomial kernel [1,2,1]⊗[1,2,1]/16 applied with replicate
/// borders via explicit 2-D loops (not separable passes).
pub fn blur3_ref<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let k: [[f64; 3]; 3] = [
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
        [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    ];
    let mut out = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xc in 0..w {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        let sy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                        let sx = (xc as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += kv * src[sy * w + sx].to_f64();
                    }
                }
                dst[y * w + xc] = E::from_f64(acc);
            }
        }
    }
    out
}

/// Reference 2x upsample: nearest duplication then the explicit 3x3 kernel.
pub fn resample_up_ref<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dup = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xc in 0..ow {
                dup[(p * oh + y) * ow + xc] = x[(p * h + y / 2) * w + xc / 2];
            }
        }
    }
    blur3_ref(&dup, planes, oh, ow)
}

/// Reference 2x downsample: explicit 3x3 kernel then stride-2 subsample.
pub fn resample_down_ref<E: Elem>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let s = blur3_ref(x, planes, h, w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![E::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xc in 0..ow {
                out[(p * oh + y) * ow + xc] = s[(p * h + 2 * y) * w + 2 * xc];
            }
        }
    }
    out
}

/// Fréchet distance between diagonal Gaussians, dimension by dimension:
/// Σ_d (√σa_d − √σb_d)² + ‖μa − μb‖².
pub fn frechet_diag_ref(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..mu_a.len() {
        let dm = mu_a[d] - mu_b[d];
        let ds = var_a[d].sqrt() - var_b[d].sqrt();
        acc += dm * dm + ds * ds;
    }
    acc
}

/// Textbook two-pass mean/covariance (unbiased, divide by N-1).
pub fn gaussian_stats_ref(features: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for f in features {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}
