//! Raw compute kernels over plain slices. No allocation-free guarantees; the
//! graph layer owns buffers and bookkeeping.

/// `C = A * B + beta * C` with explicit strides (in elements) for every
/// operand. `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the routine touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unfolds one image's channel block `[channels, h, w]` into
/// `[channels*k*k, out_h*out_w]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    im2col_ld(x, g, cols, g.out_h * g.out_w);
}

/// [`im2col`] writing rows `ld` elements apart.
pub(crate) fn im2col_ld(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let p = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * ld..row * ld + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    col2im_add_ld(cols, g, dx, g.out_h * g.out_w);
}

/// [`col2im_add`] reading rows `ld` elements apart.
pub(crate) fn col2im_add_ld(cols: &[f32], g: &ConvGeom, dx: &mut [f32], ld: usize) {
    let p = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * ld..row * ld + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `[n, c, plane]` to channel-major `[c, n*plane]`.
pub(crate) fn to_channel_major(x: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    let np = n * plane;
    for b in 0..n {
        for ch in 0..c {
            out[ch * np + b * plane..ch * np + (b + 1) * plane]
                .copy_from_slice(&x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        }
    }
    out
}

/// Adds channel-major `[c, n*plane]` into `[n, c, plane]`.
pub(crate) fn add_from_channel_major(src: &[f32], n: usize, c: usize, plane: usize, dst: &mut [f32]) {
    let np = n * plane;
    for b in 0..n {
        for ch in 0..c {
            let s = &src[ch * np + b * plane..ch * np + (b + 1) * plane];
            let d = &mut dst[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            d.iter_mut().zip(s).for_each(|(a, v)| *a += v);
        }
    }
}

/// Range of output columns `ox` whose input column `ox*stride + kx - pad`
/// falls inside `[0, w)`.
#[inline]
fn valid_range(out: usize, stride: usize, kx: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    // largest ox with ox*stride + kx - pad <= w - 1
    let limit = w as isize - 1 + pad as isize - kx as isize;
    let hi = if limit < 0 {
        0
    } else {
        ((limit as usize) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// `[n, c, hw]` to `[n, hw, c]`.
pub(crate) fn nchw_to_nhwc(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        let src = &x[b * c * hw..(b + 1) * c * hw];
        let dst = &mut out[b * c * hw..(b + 1) * c * hw];
        for ch in 0..c {
            for p in 0..hw {
                dst[p * c + ch] = src[ch * hw + p];
            }
        }
    }
    out
}

/// `[n, hw, c]` to `[n, c, hw]`, added into `dst`.
pub(crate) fn add_nhwc_to_nchw(x: &[f32], n: usize, c: usize, hw: usize, dst: &mut [f32]) {
    for b in 0..n {
        let src = &x[b * c * hw..(b + 1) * c * hw];
        let out = &mut dst[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            for ch in 0..c {
                out[ch * hw + p] += src[p * c + ch];
            }
        }
    }
}

/// Depthwise convolution in channels-last layout. `wt` is `[k*k, c]`,
/// `x` is `[n, h, w, c]` and `out` is `[n, out_h, out_w, c]`.
pub(crate) fn depthwise_nhwc(x: &[f32], n: usize, g: &ConvGeom, wt: &[f32], out: &mut [f32]) {
    let c = g.channels;
    for b in 0..n {
        let xb = &x[b * g.h * g.w * c..(b + 1) * g.h * g.w * c];
        let ob = &mut out[b * g.out_h * g.out_w * c..(b + 1) * g.out_h * g.out_w * c];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.out_h, g.stride, ky, g.pad, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.out_w, g.stride, kx, g.pad, g.w);
                let wk = &wt[(ky * g.k + kx) * c..(ky * g.k + kx + 1) * c];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        let src = &xb[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                        let dst = &mut ob[(oy * g.out_w + ox) * c..(oy * g.out_w + ox + 1) * c];
                        for ((d, s), w) in dst.iter_mut().zip(src).zip(wk) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`depthwise_nhwc`]. Accumulates into `dx` (channels-last,
/// when given) and `dwt` (`[k*k, c]`).
pub(crate) fn depthwise_nhwc_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    g: &ConvGeom,
    wt: &[f32],
    mut dx: Option<&mut [f32]>,
    dwt: &mut [f32],
) {
    let c = g.channels;
    let (isz, osz) = (g.h * g.w * c, g.out_h * g.out_w * c);
    for b in 0..n {
        let xb = &x[b * isz..(b + 1) * isz];
        let gb = &dy[b * osz..(b + 1) * osz];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.out_h, g.stride, ky, g.pad, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.out_w, g.stride, kx, g.pad, g.w);
                let kk = ky * g.k + kx;
                let wk = &wt[kk * c..(kk + 1) * c];
                let dwk = &mut dwt[kk * c..(kk + 1) * c];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        let xi = (iy * g.w + ix) * c;
                        let go = &gb[(oy * g.out_w + ox) * c..(oy * g.out_w + ox + 1) * c];
                        for ((d, s), gv) in dwk.iter_mut().zip(&xb[xi..xi + c]).zip(go) {
                            *d += gv * s;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxs = &mut dx[b * isz + xi..b * isz + xi + c];
                            for ((d, w), gv) in dxs.iter_mut().zip(wk).zip(go) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for w in 1..7 {
            for stride in 1..3 {
                for k in [1usize, 3, 5] {
                    let pad = k / 2;
                    let out = (w + 2 * pad - k) / stride + 1;
                    for kx in 0..k {
                        let expect: Vec<usize> = (0..out)
                            .filter(|ox| {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                ix >= 0 && ix < w as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, stride, kx, pad, w);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), expect, "w={w} s={stride} k={k} kx={kx}");
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_respects_strides() {
        // A = [[1,2],[3,4]] stored column-major, B = identity.
        let a = [1.0, 3.0, 2.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [1.0, 2.0, 3.0, 4.0]);
    }
}
