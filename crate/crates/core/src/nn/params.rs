use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Float;

/// Location of one named parameter inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Subject to weight decay.
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, unit-variance preserving.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl Layout {
    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Per-element weight decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.specs {
            mask[s.offset..s.offset + s.len()].fill(s.decay);
        }
        mask
    }
}

/// Allocates parameters and draws their initial values.
pub struct LayoutBuilder {
    layout: Layout,
    values: Vec<f64>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl LayoutBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            layout: Layout::default(),
            values: Vec::new(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Slot {
        let len: usize = shape.iter().product();
        let offset = self.layout.total;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        };
        match init {
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                for _ in 0..len {
                    self.values.push(self.rng.gen_range(-bound..bound));
                }
            }
            Init::Zeros => self.values.extend(std::iter::repeat(0.0).take(len)),
            Init::Ones => self.values.extend(std::iter::repeat(1.0).take(len)),
        }
        self.layout.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            offset,
            decay: matches!(init, Init::FanIn(_)),
        });
        self.layout.total += len;
        Slot { offset, len }
    }

    pub fn finish<T: Float>(self) -> (Layout, Vec<T>) {
        let values = self.values.into_iter().map(T::of).collect();
        (self.layout, values)
    }
}
