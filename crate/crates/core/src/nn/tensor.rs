use super::Float;

/// Dense `channels x height x width` tensor, row-major within each plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, i: usize) -> &[T] {
        let n = self.hw();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.hw();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "tensor shapes differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(mut self, other: &Self) -> Self {
        self.add_assign(other);
        self
    }

    /// Concatenates along channels.
    pub fn concat(parts: &[&Self]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        assert!(parts.iter().all(|p| p.h == h && p.w == w), "concat spatial mismatch");
        let c = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self { c, h, w, data }
    }

    /// Splits the first `c0` channels from the rest.
    pub fn split(&self, c0: usize) -> (Self, Self) {
        assert!(c0 <= self.c);
        let at = c0 * self.hw();
        (
            Self::from_vec(c0, self.h, self.w, self.data[..at].to_vec()),
            Self::from_vec(self.c - c0, self.h, self.w, self.data[at..].to_vec()),
        )
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
