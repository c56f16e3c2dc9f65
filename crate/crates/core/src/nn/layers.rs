use super::ops::{conv2d, conv2d_backward, silu, silu_backward};
use super::{Float, Init, LayoutBuilder, Slot, Tensor};

/// Same-padded convolution; with `k = 1` on `c x 1 x 1` tensors it doubles as
/// a dense layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    w: Slot,
    b: Slot,
}

pub type Linear = Conv2d;

impl Conv2d {
    pub fn new(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        lb.push_scope(name);
        let w = lb.param("weight", &[cout, cin, k, k], Init::FanIn(cin * k * k));
        let b = lb.param("bias", &[cout], Init::Zeros);
        lb.pop_scope();
        Self { cin, cout, k, w, b }
    }

    pub fn forward<T: Float>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        conv2d(x, self.w.of(p), self.b.of(p), self.cout, self.k)
    }

    pub fn backward<T: Float>(
        &self,
        p: &[T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        g: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        debug_assert_eq!(self.b.offset, self.w.offset + self.w.len);
        let both = &mut g[self.w.offset..self.b.offset + self.b.len];
        let (gw, gb) = both.split_at_mut(self.w.len);
        conv2d_backward(x, self.w.of(p), dy, self.k, gw, gb, need_dx)
    }
}

/// Layer normalization across channels at every spatial position.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub c: usize,
    gamma: Slot,
    beta: Slot,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize) -> Self {
        lb.push_scope(name);
        let gamma = lb.param("gamma", &[c], Init::Ones);
        let beta = lb.param("beta", &[c], Init::Zeros);
        lb.pop_scope();
        Self { c, gamma, beta }
    }

    pub fn forward<T: Float>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        assert_eq!(x.c, self.c);
        let n = x.hw();
        let cf = T::of(x.c as f64);
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        for c in 0..x.c {
            for (m, &v) in mean.iter_mut().zip(x.plane(c)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        for c in 0..x.c {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(x.plane(c)) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&s| T::one() / (s / cf + T::of(LN_EPS)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let (gamma, beta) = (self.gamma.of(p), self.beta.of(p));
        for c in 0..x.c {
            let src = x.plane(c);
            let xh = xhat.plane_mut(c);
            for i in 0..n {
                xh[i] = (src[i] - mean[i]) * inv_std[i];
            }
            let (gc, bc) = (gamma[c], beta[c]);
            for (o, &v) in y.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
                *o = gc * v + bc;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Float>(
        &self,
        p: &[T],
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
    ) -> Tensor<T> {
        let xhat = &cache.xhat;
        let n = xhat.hw();
        let gamma = self.gamma.of(p);
        let mut sum_d = vec![T::zero(); n];
        let mut sum_dx = vec![T::zero(); n];
        for c in 0..xhat.c {
            let (d, xh) = (dy.plane(c), xhat.plane(c));
            let mut gg = T::zero();
            let mut gb = T::zero();
            for i in 0..n {
                gg += d[i] * xh[i];
                gb += d[i];
                let dxh = d[i] * gamma[c];
                sum_d[i] += dxh;
                sum_dx[i] += dxh * xh[i];
            }
            self.gamma.of_mut(g)[c] += gg;
            self.beta.of_mut(g)[c] += gb;
        }
        let cf = T::of(xhat.c as f64);
        let mut dx = Tensor::zeros(xhat.c, xhat.h, xhat.w);
        for c in 0..xhat.c {
            let (d, xh) = (dy.plane(c), xhat.plane(c));
            let gc = gamma[c];
            let out = dx.plane_mut(c);
            for i in 0..n {
                out[i] = cache.inv_std[i] / cf * (cf * d[i] * gc - sum_d[i] - xh[i] * sum_dx[i]);
            }
        }
        dx
    }
}

/// Pre-activation residual block
/// `x + conv(silu(norm(conv(silu(norm(x))))))`, with a 1x1 projection on the
/// shortcut when the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm_a: LayerNorm,
    conv_a: Conv2d,
    norm_b: LayerNorm,
    conv_b: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    x: Tensor<T>,
    n1: Tensor<T>,
    ln1: LayerNormCache<T>,
    n2: Tensor<T>,
    ln2: LayerNormCache<T>,
}

impl ResBlock {
    pub fn new(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize) -> Self {
        lb.push_scope(name);
        let norm_a = LayerNorm::new(lb, "norm_a", cin);
        let conv_a = Conv2d::new(lb, "conv_a", cin, cout, 3);
        let norm_b = LayerNorm::new(lb, "norm_b", cout);
        let conv_b = Conv2d::new(lb, "conv_b", cout, cout, 3);
        let skip = (cin != cout).then(|| Conv2d::new(lb, "skip", cin, cout, 1));
        lb.pop_scope();
        Self { norm_a, conv_a, norm_b, conv_b, skip }
    }

    pub fn cout(&self) -> usize {
        self.conv_b.cout
    }

    pub fn forward<T: Float>(
        &self,
        p: &[T],
        x: Tensor<T>,
        keep: bool,
    ) -> (Tensor<T>, Option<ResBlockCache<T>>) {
        let (n1, ln1) = self.norm_a.forward(p, &x);
        let h1 = self.conv_a.forward(p, &silu(&n1));
        let (n2, ln2) = self.norm_b.forward(p, &h1);
        let h2 = self.conv_b.forward(p, &silu(&n2));
        let y = match &self.skip {
            Some(s) => s.forward(p, &x).add(&h2),
            None => h2.add(&x),
        };
        (y, keep.then_some(ResBlockCache { x, n1, ln1, n2, ln2 }))
    }

    pub fn backward<T: Float>(
        &self,
        p: &[T],
        cache: &ResBlockCache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
    ) -> Tensor<T> {
        let a2 = silu(&cache.n2);
        let da2 = self.conv_b.backward(p, &a2, dy, g, true).expect("dx");
        drop(a2);
        let dn2 = silu_backward(&cache.n2, &da2);
        let dh1 = self.norm_b.backward(p, &cache.ln2, &dn2, g);
        let a1 = silu(&cache.n1);
        let da1 = self.conv_a.backward(p, &a1, &dh1, g, true).expect("dx");
        let dn1 = silu_backward(&cache.n1, &da1);
        let mut dx = self.norm_a.backward(p, &cache.ln1, &dn1, g);
        match &self.skip {
            Some(s) => dx.add_assign(&s.backward(p, &cache.x, dy, g, true).expect("dx")),
            None => dx.add_assign(dy),
        }
        dx
    }
}
