//! Stateless kernels. Convolutions lower to GEMM over row chunks of the
//! output so the im2col buffer stays cache-sized; chunk results are combined
//! in a fixed order, which keeps every result independent of thread count.

use rayon::prelude::*;

use super::{gemm, Float, MatMut, MatRef, Tensor};

/// Target number of output positions per conv chunk.
const CHUNK: usize = 2048;

fn row_chunks(h: usize, w: usize) -> Vec<(usize, usize)> {
    let rows = (CHUNK / w.max(1)).max(1);
    (0..h).step_by(rows).map(|r0| (r0, (r0 + rows).min(h))).collect()
}

/// Zero padding by `p` on every side.
pub fn pad<T: Float>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    if p == 0 {
        return x.clone();
    }
    let (hp, wp) = (x.h + 2 * p, x.w + 2 * p);
    let mut out = Tensor::zeros(x.c, hp, wp);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..x.h {
            dst[(y + p) * wp + p..(y + p) * wp + p + x.w]
                .copy_from_slice(&src[y * x.w..(y + 1) * x.w]);
        }
    }
    out
}

fn im2col<T: Float>(xp: &Tensor<T>, k: usize, w: usize, r0: usize, r1: usize, col: &mut [T]) {
    let len = (r1 - r0) * w;
    for ci in 0..xp.c {
        let plane = xp.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * len..(row + 1) * len];
                for y in r0..r1 {
                    let s = (y + ky) * xp.w + kx;
                    dst[(y - r0) * w..(y - r0 + 1) * w].copy_from_slice(&plane[s..s + w]);
                }
            }
        }
    }
}

fn col2im_add<T: Float>(col: &[T], k: usize, w: usize, r0: usize, r1: usize, xp: &mut Tensor<T>) {
    let len = (r1 - r0) * w;
    let wp = xp.w;
    for ci in 0..xp.c {
        let plane = xp.plane_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * len..(row + 1) * len];
                for y in r0..r1 {
                    let d = (y + ky) * wp + kx;
                    for (a, &b) in plane[d..d + w].iter_mut().zip(&src[(y - r0) * w..]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution with a square `k x k` kernel (`k` odd).
/// `weight` is `cout x cin x k x k`.
pub fn conv2d<T: Float>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let hw = h * w;
    let xp = pad(x, k / 2);
    let wmat = MatRef::rm(weight, cout, kk);
    let chunks = row_chunks(h, w);
    let run = |&(r0, r1): &(usize, usize)| {
        let len = (r1 - r0) * w;
        let mut out = vec![T::zero(); cout * len];
        for (co, row) in out.chunks_mut(len).enumerate() {
            row.fill(bias[co]);
        }
        if k == 1 {
            let b = MatRef::rm_stride(&x.data[r0 * w..], cin, len, hw);
            gemm(T::one(), wmat, b, T::one(), MatMut::rm(&mut out, cout, len));
        } else {
            let mut col = vec![T::zero(); kk * len];
            im2col(&xp, k, w, r0, r1, &mut col);
            gemm(T::one(), wmat, MatRef::rm(&col, kk, len), T::one(), MatMut::rm(&mut out, cout, len));
        }
        out
    };
    let parts: Vec<Vec<T>> = if chunks.len() > 1 {
        chunks.par_iter().map(run).collect()
    } else {
        chunks.iter().map(run).collect()
    };
    let mut out = Tensor::zeros(cout, h, w);
    for (&(r0, r1), part) in chunks.iter().zip(&parts) {
        let len = (r1 - r0) * w;
        for co in 0..cout {
            out.data[co * hw + r0 * w..co * hw + r1 * w].copy_from_slice(&part[co * len..(co + 1) * len]);
        }
    }
    out
}

/// Backward pass of [`conv2d`]. Accumulates into `gw` and `gb`; returns the
/// input gradient when `need_dx`.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let kk = cin * k * k;
    let hw = h * w;
    assert!(dy.h == h && dy.w == w, "conv gradient shape");
    assert_eq!(gw.len(), cout * kk);
    for (co, g) in gb.iter_mut().enumerate() {
        *g += dy.plane(co).iter().copied().sum::<T>();
    }
    let xp = pad(x, k / 2);
    let wmat = MatRef::rm(weight, cout, kk);
    let chunks = row_chunks(h, w);
    let run = |&(r0, r1): &(usize, usize)| {
        let len = (r1 - r0) * w;
        let dyc = MatRef::rm_stride(&dy.data[r0 * w..], cout, len, hw);
        let mut gpart = vec![T::zero(); cout * kk];
        if k == 1 {
            let b = MatRef::rm_stride(&x.data[r0 * w..], cin, len, hw).t();
            gemm(T::one(), dyc, b, T::zero(), MatMut::rm(&mut gpart, cout, kk));
        } else {
            let mut col = vec![T::zero(); kk * len];
            im2col(&xp, k, w, r0, r1, &mut col);
            gemm(T::one(), dyc, MatRef::rm(&col, kk, len).t(), T::zero(), MatMut::rm(&mut gpart, cout, kk));
        }
        let dcol = need_dx.then(|| {
            let mut dcol = vec![T::zero(); kk * len];
            gemm(T::one(), wmat.t(), dyc, T::zero(), MatMut::rm(&mut dcol, kk, len));
            dcol
        });
        (gpart, dcol)
    };
    let parts: Vec<(Vec<T>, Option<Vec<T>>)> = if chunks.len() > 1 {
        chunks.par_iter().map(run).collect()
    } else {
        chunks.iter().map(run).collect()
    };
    for (gpart, _) in &parts {
        for (a, &b) in gw.iter_mut().zip(gpart) {
            *a += b;
        }
    }
    if !need_dx {
        return None;
    }
    if k == 1 {
        let mut dx = Tensor::zeros(cin, h, w);
        for (&(r0, r1), (_, dcol)) in chunks.iter().zip(&parts) {
            let dcol = dcol.as_ref().expect("input gradient requested");
            let len = (r1 - r0) * w;
            for ci in 0..cin {
                dx.data[ci * hw + r0 * w..ci * hw + r1 * w].copy_from_slice(&dcol[ci * len..(ci + 1) * len]);
            }
        }
        return Some(dx);
    }
    let p = k / 2;
    let mut dxp = Tensor::zeros(cin, h + 2 * p, w + 2 * p);
    for (&(r0, r1), (_, dcol)) in chunks.iter().zip(&parts) {
        col2im_add(dcol.as_ref().expect("input gradient requested"), k, w, r0, r1, &mut dxp);
    }
    Some(crop(&dxp, p))
}

fn crop<T: Float>(xp: &Tensor<T>, p: usize) -> Tensor<T> {
    let (h, w) = (xp.h - 2 * p, xp.w - 2 * p);
    let mut out = Tensor::zeros(xp.c, h, w);
    for c in 0..xp.c {
        let src = xp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + p) * xp.w + p..(y + p) * xp.w + p + w]);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).fast_exp())
}

pub fn silu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of SiLU evaluated at pre-activation `x`.
pub fn silu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert!(x.same_shape(dy));
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "avgpool needs even sides");
    let (h, w) = (x.h / 2, x.w / 2);
    let q = T::of(0.25);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * q;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    upsample2(dy).map(|v| v * T::of(0.25))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    avgpool2(dy).map(|v| v * T::of(4.0))
}

/// Space-to-depth by 2: channel `c*4 + dy*2 + dx` holds pixel `(2y+dy, 2x+dx)`
/// of input channel `c`.
pub fn pixel_unshuffle<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pixel unshuffle needs even sides");
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c * 4, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        for s in 0..4 {
            let (dy, dx) = (s / 2, s % 2);
            let dst = out.plane_mut(c * 4 + s);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(2 * y + dy) * x.w + 2 * xx + dx];
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    assert!(x.c % 4 == 0, "pixel shuffle needs a multiple of 4 channels");
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c / 4, h, w);
    for c in 0..x.c / 4 {
        for s in 0..4 {
            let (dy, dx) = (s / 2, s % 2);
            let src = x.plane(c * 4 + s);
            let dst = out.plane_mut(c);
            for y in 0..x.h {
                for xx in 0..x.w {
                    dst[(2 * y + dy) * w + 2 * xx + dx] = src[y * x.w + xx];
                }
            }
        }
    }
    out
}

/// Numerically stable in-place softmax of a row.
pub fn softmax_row<T: Float>(row: &mut [T]) {
    T::softmax_row(row)
}

pub(crate) fn softmax_row_generic<T: Float>(row: &mut [T]) {
    softmax_row_inline(row, T::exp_slice)
}

#[inline(always)]
pub(crate) fn softmax_row_inline<T: Float>(row: &mut [T], exp: impl Fn(&mut [T])) {
    let m = lane_reduce(row, T::neg_infinity(), |a, b| if b > a { b } else { a });
    row.iter_mut().for_each(|v| *v -= m);
    exp(row);
    let inv = T::one() / lane_reduce(row, T::zero(), |a, b| a + b);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Reduction over eight interleaved lanes, combined in a fixed order; this
/// lets the compiler vectorize without changing results between runs.
#[inline(always)]
fn lane_reduce<T: Float>(v: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut lanes = [init; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l = f(*l, x);
        }
    }
    let mut acc = tail.iter().fold(init, |a, &b| f(a, b));
    for l in lanes {
        acc = f(acc, l);
    }
    acc
}
