//! Raw compute kernels behind the tape ops.
//!
//! Parallel variants split work so that every output element is written by
//! exactly one thread with a fixed sequential inner order; results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work below this many output rows is not worth farming out.
const PAR_ROWS_MIN: usize = 4;

// ---------------------------------------------------------------------------
// matmul: C[m,n] = A[m,k] · B[k,n]
// ---------------------------------------------------------------------------

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [S], i: usize| {
        ci.iter_mut().for_each(|v| *v = S::ZERO);
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(brow) {
                *cv = bv.mul_add(av, *cv);
            }
        }
    };
    if m >= PAR_ROWS_MIN {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// Plain transpose: `out[j,i] = a[i,j]` for `a` of shape `[rows, cols]`.
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// linear: y[B,m] = x[B,n] · W[m,n]^T (+ bias[m])
// ---------------------------------------------------------------------------

pub fn linear_fwd<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    bsz: usize,
    n: usize,
    m: usize,
    y: &mut [S],
) {
    // Run as x · W^T with the transpose materialized so the inner loop is
    // contiguous over the output dimension.
    let wt = transpose(w, m, n);
    matmul(x, &wt, bsz, n, m, y);
    if let Some(b) = bias {
        for yi in y.chunks_mut(m) {
            for (v, bv) in yi.iter_mut().zip(b) {
                *v += *bv;
            }
        }
    }
}

pub fn linear_bwd_input<S: Scalar>(g: &[S], w: &[S], bsz: usize, n: usize, m: usize, dx: &mut [S]) {
    // dx[B,n] = g[B,m] · W[m,n]
    matmul(g, w, bsz, m, n, dx);
}

pub fn linear_bwd_weight<S: Scalar>(g: &[S], x: &[S], bsz: usize, n: usize, m: usize, dw: &mut [S]) {
    // dW[o,:] = sum_b g[b,o] * x[b,:]
    let row = |dwo: &mut [S], o: usize| {
        dwo.iter_mut().for_each(|v| *v = S::ZERO);
        for b in 0..bsz {
            let gv = g[b * m + o];
            let xb = &x[b * n..(b + 1) * n];
            for (dv, xv) in dwo.iter_mut().zip(xb) {
                *dv = xv.mul_add(gv, *dv);
            }
        }
    };
    if m >= PAR_ROWS_MIN {
        dw.par_chunks_mut(n).enumerate().for_each(|(o, dwo)| row(dwo, o));
    } else {
        for (o, dwo) in dw.chunks_mut(n).enumerate() {
            row(dwo, o);
        }
    }
}

pub fn linear_bwd_bias<S: Scalar>(g: &[S], bsz: usize, m: usize, db: &mut [S]) {
    db.iter_mut().for_each(|v| *v = S::ZERO);
    for b in 0..bsz {
        for (dv, gv) in db.iter_mut().zip(&g[b * m..(b + 1) * m]) {
            *dv += *gv;
        }
    }
}

// ---------------------------------------------------------------------------
// conv1d: y[B,Co,Lo] = x[B,Ci,L] * k[Co,Ci,W], cross-correlation
// ---------------------------------------------------------------------------

/// Valid input range of the output index `i` for a given tap `j`:
/// `0 <= i*stride + j - pad < l`.
#[inline]
fn tap_range(l: usize, lout: usize, stride: usize, pad: usize, j: usize) -> (usize, usize) {
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let hi = if l + pad > j { ((l + pad - j - 1) / stride + 1).min(lout) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd<S: Scalar>(
    x: &[S],
    k: &[S],
    bias: Option<&[S]>,
    bsz: usize,
    cin: usize,
    l: usize,
    cout: usize,
    w: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    y: &mut [S],
) {
    debug_assert_eq!(y.len(), bsz * cout * lout);
    let row = |yo: &mut [S], idx: usize| {
        let b = idx / cout;
        let o = idx % cout;
        let init = bias.map_or(S::ZERO, |bv| bv[o]);
        yo.iter_mut().for_each(|v| *v = init);
        for c in 0..cin {
            let xc = &x[(b * cin + c) * l..(b * cin + c + 1) * l];
            for j in 0..w {
                let kv = k[(o * cin + c) * w + j];
                let (lo, hi) = tap_range(l, lout, stride, pad, j);
                for i in lo..hi {
                    yo[i] = xc[i * stride + j - pad].mul_add(kv, yo[i]);
                }
            }
        }
    };
    if bsz * cout >= PAR_ROWS_MIN && bsz > 1 {
        y.par_chunks_mut(lout).enumerate().for_each(|(idx, yo)| row(yo, idx));
    } else {
        for (idx, yo) in y.chunks_mut(lout).enumerate() {
            row(yo, idx);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_input<S: Scalar>(
    g: &[S],
    k: &[S],
    bsz: usize,
    cin: usize,
    l: usize,
    cout: usize,
    w: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    dx: &mut [S],
) {
    let sample = |dxb: &mut [S], b: usize| {
        dxb.iter_mut().for_each(|v| *v = S::ZERO);
        for o in 0..cout {
            let go = &g[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            for c in 0..cin {
                let dxc = &mut dxb[c * l..(c + 1) * l];
                for j in 0..w {
                    let kv = k[(o * cin + c) * w + j];
                    let (lo, hi) = tap_range(l, lout, stride, pad, j);
                    for i in lo..hi {
                        dxc[i * stride + j - pad] = go[i].mul_add(kv, dxc[i * stride + j - pad]);
                    }
                }
            }
        }
    };
    if bsz >= PAR_ROWS_MIN {
        dx.par_chunks_mut(cin * l).enumerate().for_each(|(b, dxb)| sample(dxb, b));
    } else {
        for (b, dxb) in dx.chunks_mut(cin * l).enumerate() {
            sample(dxb, b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_kernel<S: Scalar>(
    g: &[S],
    x: &[S],
    bsz: usize,
    cin: usize,
    l: usize,
    cout: usize,
    w: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    dk: &mut [S],
) {
    let out_ch = |dko: &mut [S], o: usize| {
        dko.iter_mut().for_each(|v| *v = S::ZERO);
        for b in 0..bsz {
            let go = &g[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            for c in 0..cin {
                let xc = &x[(b * cin + c) * l..(b * cin + c + 1) * l];
                for j in 0..w {
                    let (lo, hi) = tap_range(l, lout, stride, pad, j);
                    let mut acc = S::ZERO;
                    for i in lo..hi {
                        acc = go[i].mul_add(xc[i * stride + j - pad], acc);
                    }
                    dko[c * w + j] += acc;
                }
            }
        }
    };
    if cout >= PAR_ROWS_MIN {
        dk.par_chunks_mut(cin * w).enumerate().for_each(|(o, dko)| out_ch(dko, o));
    } else {
        for (o, dko) in dk.chunks_mut(cin * w).enumerate() {
            out_ch(dko, o);
        }
    }
}

pub fn conv1d_bwd_bias<S: Scalar>(g: &[S], bsz: usize, cout: usize, lout: usize, db: &mut [S]) {
    db.iter_mut().for_each(|v| *v = S::ZERO);
    for b in 0..bsz {
        for (o, dv) in db.iter_mut().enumerate() {
            let go = &g[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            let mut acc = S::ZERO;
            for v in go {
                acc += *v;
            }
            *dv += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d: y[B,Co,Ho,Wo] = x[B,Ci,H,W] * k[Co,Ci,Kh,Kw]
// ---------------------------------------------------------------------------

pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub hout: usize,
    pub wout: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<S: Scalar>(
    x: &[S],
    k: &[S],
    bias: Option<&[S]>,
    bsz: usize,
    cin: usize,
    cout: usize,
    geo: &Conv2dGeom,
    y: &mut [S],
) {
    let (h, w, hout, wout) = (geo.h, geo.w, geo.hout, geo.wout);
    let plane = |yo: &mut [S], idx: usize| {
        let b = idx / cout;
        let o = idx % cout;
        let init = bias.map_or(S::ZERO, |bv| bv[o]);
        yo.iter_mut().for_each(|v| *v = init);
        for c in 0..cin {
            let xc = &x[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
            for kj in 0..geo.kh {
                let (rlo, rhi) = tap_range(h, hout, geo.stride, geo.pad_t, kj);
                for ki in 0..geo.kw {
                    let kv = k[((o * cin + c) * geo.kh + kj) * geo.kw + ki];
                    let (clo, chi) = tap_range(w, wout, geo.stride, geo.pad_l, ki);
                    for r in rlo..rhi {
                        let xrow = &xc[(r * geo.stride + kj - geo.pad_t) * w..];
                        let yrow = &mut yo[r * wout..(r + 1) * wout];
                        for i in clo..chi {
                            yrow[i] = xrow[i * geo.stride + ki - geo.pad_l].mul_add(kv, yrow[i]);
                        }
                    }
                }
            }
        }
    };
    if bsz * cout >= PAR_ROWS_MIN && bsz > 1 {
        y.par_chunks_mut(hout * wout).enumerate().for_each(|(idx, yo)| plane(yo, idx));
    } else {
        for (idx, yo) in y.chunks_mut(hout * wout).enumerate() {
            plane(yo, idx);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<S: Scalar>(
    g: &[S],
    k: &[S],
    bsz: usize,
    cin: usize,
    cout: usize,
    geo: &Conv2dGeom,
    dx: &mut [S],
) {
    let (h, w, hout, wout) = (geo.h, geo.w, geo.hout, geo.wout);
    let sample = |dxb: &mut [S], b: usize| {
        dxb.iter_mut().for_each(|v| *v = S::ZERO);
        for o in 0..cout {
            let go = &g[(b * cout + o) * hout * wout..(b * cout + o + 1) * hout * wout];
            for c in 0..cin {
                let dxc = &mut dxb[c * h * w..(c + 1) * h * w];
                for kj in 0..geo.kh {
                    let (rlo, rhi) = tap_range(h, hout, geo.stride, geo.pad_t, kj);
                    for ki in 0..geo.kw {
                        let kv = k[((o * cin + c) * geo.kh + kj) * geo.kw + ki];
                        let (clo, chi) = tap_range(w, wout, geo.stride, geo.pad_l, ki);
                        for r in rlo..rhi {
                            let grow = &go[r * wout..(r + 1) * wout];
                            let drow = &mut dxc[(r * geo.stride + kj - geo.pad_t) * w..];
                            for i in clo..chi {
                                let t = i * geo.stride + ki - geo.pad_l;
                                drow[t] = grow[i].mul_add(kv, drow[t]);
                            }
                        }
                    }
                }
            }
        }
    };
    if bsz >= PAR_ROWS_MIN {
        dx.par_chunks_mut(cin * h * w).enumerate().for_each(|(b, dxb)| sample(dxb, b));
    } else {
        for (b, dxb) in dx.chunks_mut(cin * h * w).enumerate() {
            sample(dxb, b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_kernel<S: Scalar>(
    g: &[S],
    x: &[S],
    bsz: usize,
    cin: usize,
    cout: usize,
    geo: &Conv2dGeom,
    dk: &mut [S],
) {
    let (h, w, hout, wout) = (geo.h, geo.w, geo.hout, geo.wout);
    let out_ch = |dko: &mut [S], o: usize| {
        dko.iter_mut().for_each(|v| *v = S::ZERO);
        for b in 0..bsz {
            let go = &g[(b * cout + o) * hout * wout..(b * cout + o + 1) * hout * wout];
            for c in 0..cin {
                let xc = &x[(b * cin + c) * h * w..(b * cin + c + 1) * h * w];
                for kj in 0..geo.kh {
                    let (rlo, rhi) = tap_range(h, hout, geo.stride, geo.pad_t, kj);
                    for ki in 0..geo.kw {
                        let (clo, chi) = tap_range(w, wout, geo.stride, geo.pad_l, ki);
                        let mut acc = S::ZERO;
                        for r in rlo..rhi {
                            let grow = &go[r * wout..(r + 1) * wout];
                            let xrow = &xc[(r * geo.stride + kj - geo.pad_t) * w..];
                            for i in clo..chi {
                                acc = grow[i].mul_add(xrow[i * geo.stride + ki - geo.pad_l], acc);
                            }
                        }
                        dko[(c * geo.kh + kj) * geo.kw + ki] += acc;
                    }
                }
            }
        }
    };
    if cout >= PAR_ROWS_MIN {
        dk.par_chunks_mut(cin * geo.kh * geo.kw).enumerate().for_each(|(o, dko)| out_ch(dko, o));
    } else {
        for (o, dko) in dk.chunks_mut(cin * geo.kh * geo.kw).enumerate() {
            out_ch(dko, o);
        }
    }
}

pub fn conv2d_bwd_bias<S: Scalar>(g: &[S], bsz: usize, cout: usize, area: usize, db: &mut [S]) {
    conv1d_bwd_bias(g, bsz, cout, area, db)
}
