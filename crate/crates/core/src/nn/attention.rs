use rand::Rng;
use rayon::prelude::*;

use super::layers::{Conv2d, LayerNorm, LayerNormCache};
use super::ops::softmax_row;
use super::{gemm, Float, LayoutBuilder, MatMut, MatRef, Tensor};
use crate::rng;

/// Query rows scored at once, sized so a score tile stays in L2.
const QUERY_BLOCK: usize = 64;

/// Pre-norm multi-head self-attention over all spatial positions, with a
/// residual connection and dropout on the projected output.
#[derive(Debug, Clone)]
pub struct Attention {
    pub c: usize,
    pub heads: usize,
    dropout: f64,
    norm: LayerNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    ln: LayerNormCache<T>,
    xn: Tensor<T>,
    qkv: Tensor<T>,
    pub(crate) probs: Vec<Vec<T>>,
    o: Tensor<T>,
    mask: Option<Vec<T>>,
}

impl Attention {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize, heads: usize, dropout: f64) -> Self {
        assert!(heads > 0 && c % heads == 0, "width must split evenly into heads");
        lb.push_scope(name);
        let norm = LayerNorm::new(lb, "norm", c);
        let qkv = Conv2d::new(lb, "qkv", c, 3 * c, 1);
        let proj = Conv2d::new(lb, "proj", c, c, 1);
        lb.pop_scope();
        Self { c, heads, dropout, norm, qkv, proj }
    }

    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// `dropout_seed` enables dropout; `keep` retains what backward needs.
    pub fn forward<T: Float>(
        &self,
        p: &[T],
        x: Tensor<T>,
        dropout_seed: Option<u64>,
        keep: bool,
    ) -> (Tensor<T>, Option<AttentionCache<T>>) {
        let (c, n, d) = (self.c, x.hw(), self.head_dim());
        let (xn, ln) = self.norm.forward(p, &x);
        let qkv = self.qkv.forward(p, &xn);
        let scale = T::of(1.0 / (d as f64).sqrt());
        let heads: Vec<(Vec<T>, Option<Vec<T>>)> = (0..self.heads)
            .into_par_iter()
            .map(|h| {
                let q = &qkv.data[h * d * n..(h + 1) * d * n];
                let k = &qkv.data[(c + h * d) * n..(c + (h + 1) * d) * n];
                let v = &qkv.data[(2 * c + h * d) * n..(2 * c + (h + 1) * d) * n];
                let mut o = vec![T::zero(); d * n];
                let mut probs = if keep { vec![T::zero(); n * n] } else { Vec::new() };
                let mut s = vec![T::zero(); QUERY_BLOCK.min(n) * n];
                for i0 in (0..n).step_by(QUERY_BLOCK) {
                    let b = QUERY_BLOCK.min(n - i0);
                    let s = &mut s[..b * n];
                    let qb = MatRef { data: &q[i0..], rows: b, cols: d, rs: 1, cs: n };
                    gemm(scale, qb, MatRef::rm(k, d, n), T::zero(), MatMut::rm(s, b, n));
                    s.chunks_mut(n).for_each(softmax_row);
                    gemm(T::one(), MatRef::rm(v, d, n), MatRef::rm(s, b, n).t(), T::zero(), MatMut::rm_stride(&mut o[i0..], d, b, n));
                    if keep {
                        probs[i0 * n..(i0 + b) * n].copy_from_slice(s);
                    }
                }
                (o, keep.then_some(probs))
            })
            .collect();
        let mut o = Tensor::zeros(c, x.h, x.w);
        let mut probs = Vec::new();
        for (h, (oh, ph)) in heads.into_iter().enumerate() {
            o.data[h * d * n..(h + 1) * d * n].copy_from_slice(&oh);
            probs.extend(ph);
        }
        let mut y = self.proj.forward(p, &o);
        let mask = dropout_seed.filter(|_| self.dropout > 0.0).map(|seed| {
            let mut r = rng::rng_for(seed, &[rng::stream::DROPOUT]);
            let keep_scale = T::of(1.0 / (1.0 - self.dropout));
            (0..y.data.len())
                .map(|_| if r.gen::<f64>() < self.dropout { T::zero() } else { keep_scale })
                .collect::<Vec<T>>()
        });
        if let Some(m) = &mask {
            y.data.iter_mut().zip(m).for_each(|(v, &f)| *v *= f);
        }
        let out = y.add(&x);
        let cache = keep.then(|| AttentionCache { ln, xn, qkv, probs, o, mask });
        (out, cache)
    }

    pub fn backward<T: Float>(
        &self,
        p: &[T],
        cache: &AttentionCache<T>,
        dout: &Tensor<T>,
        g: &mut [T],
    ) -> Tensor<T> {
        let (c, n, d) = (self.c, dout.hw(), self.head_dim());
        let mut dy = dout.clone();
        if let Some(m) = &cache.mask {
            dy.data.iter_mut().zip(m).for_each(|(v, &f)| *v *= f);
        }
        let d_o = self.proj.backward(p, &cache.o, &dy, g, true).expect("dx");
        let scale = T::of(1.0 / (d as f64).sqrt());
        let qkv = &cache.qkv;
        let grads: Vec<[Vec<T>; 3]> = (0..self.heads)
            .into_par_iter()
            .map(|h| {
                let q = &qkv.data[h * d * n..(h + 1) * d * n];
                let k = &qkv.data[(c + h * d) * n..(c + (h + 1) * d) * n];
                let v = &qkv.data[(2 * c + h * d) * n..(2 * c + (h + 1) * d) * n];
                let pm = &cache.probs[h];
                let doh = &d_o.data[h * d * n..(h + 1) * d * n];
                let mut dv = vec![T::zero(); d * n];
                gemm(T::one(), MatRef::rm(doh, d, n), MatRef::rm(pm, n, n), T::zero(), MatMut::rm(&mut dv, d, n));
                let mut ds = vec![T::zero(); n * n];
                gemm(T::one(), MatRef::rm(doh, d, n).t(), MatRef::rm(v, d, n), T::zero(), MatMut::rm(&mut ds, n, n));
                for (drow, prow) in ds.chunks_mut(n).zip(pm.chunks(n)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (a, &b) in drow.iter_mut().zip(prow) {
                        *a = b * (*a - dot);
                    }
                }
                let mut dq = vec![T::zero(); d * n];
                gemm(scale, MatRef::rm(k, d, n), MatRef::rm(&ds, n, n).t(), T::zero(), MatMut::rm(&mut dq, d, n));
                let mut dk = vec![T::zero(); d * n];
                gemm(scale, MatRef::rm(q, d, n), MatRef::rm(&ds, n, n), T::zero(), MatMut::rm(&mut dk, d, n));
                [dq, dk, dv]
            })
            .collect();
        let mut dqkv = Tensor::zeros(3 * c, dout.h, dout.w);
        for (h, parts) in grads.iter().enumerate() {
            for (j, part) in parts.iter().enumerate() {
                let at = (j * c + h * d) * n;
                dqkv.data[at..at + d * n].copy_from_slice(part);
            }
        }
        let dxn = self.qkv.backward(p, &cache.xn, &dqkv, g, true).expect("dx");
        self.norm.backward(p, &cache.ln, &dxn, g).add(dout)
    }
}
