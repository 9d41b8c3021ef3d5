//! Direct 2D convolution kernels (NCHW), forward and backward.

use rayon::prelude::*;

use crate::tensor::graph::Scalar;

/// Returns (data, shape) of the convolution output.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    xs: &[usize],
    w: &[T],
    ws: &[usize],
    b: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); n * o * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(no, plane)| {
        let (ni, oi) = (no / o, no % o);
        let xn = &x[ni * c * h * wd..(ni + 1) * c * h * wd];
        let wo = &w[oi * c * kh * kw..(oi + 1) * c * kh * kw];
        let bias = b[oi];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let mut acc = bias;
                for ci in 0..c {
                    let xc = &xn[ci * h * wd..(ci + 1) * h * wd];
                    let wc = &wo[ci * kh * kw..(ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                        let wrow = &wc[ky * kw..(ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc + xrow[ix as usize] * wrow[kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    (out, vec![n, o, oh, ow])
}

pub(crate) fn backward_input<T: Scalar>(
    gx: &mut [T],
    xs: &[usize],
    gout: &[T],
    os: &[usize],
    w: &[T],
    ws: &[usize],
    stride: usize,
    pad: usize,
) {
    let (c, h, wd) = (xs[1], xs[2], xs[3]);
    let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = (os[2], os[3]);
    // one task per (n, c) slab keeps the scatter race-free
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(nci, gslab)| {
        let (ni, ci) = (nci / c, nci % c);
        for oi in 0..o {
            let gplane = &gout[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            let wc = &w[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let go = gplane[oy * ow + ox];
                    if go == T::zero() {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let o = iy as usize * wd + ix as usize;
                            gslab[o] = gslab[o] + go * wc[ky * kw + kx];
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn backward_weight<T: Scalar>(
    gw: &mut [T],
    ws: &[usize],
    gout: &[T],
    os: &[usize],
    x: &[T],
    xs: &[usize],
    stride: usize,
    pad: usize,
) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = (os[2], os[3]);
    gw.par_chunks_mut(c * kh * kw).enumerate().for_each(|(oi, gwo)| {
        for ni in 0..n {
            let gplane = &gout[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            let xn = &x[ni * c * h * wd..(ni + 1) * c * h * wd];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let go = gplane[oy * ow + ox];
                    if go == T::zero() {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ci in 0..c {
                        let xc = &xn[ci * h * wd..(ci + 1) * h * wd];
                        let gwc = &mut gwo[ci * kh * kw..(ci + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                gwc[ky * kw + kx] =
                                    gwc[ky * kw + kx] + go * xc[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn backward_bias<T: Scalar>(gb: &mut [T], gout: &[T], os: &[usize]) {
    let (n, o, oh, ow) = (os[0], os[1], os[2], os[3]);
    for (oi, gv) in gb.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let plane = &gout[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for &g in plane {
                acc += g.to_f64v();
            }
        }
        *gv = *gv + T::from_f64(acc);
    }
}
