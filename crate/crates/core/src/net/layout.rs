use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// A named block of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment table over one flat `Vec<f64>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a segment and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let seg = Segment { name: name.into(), shape: shape.to_vec() };
        self.offsets.push(self.total);
        self.total += seg.len();
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn range(&self, idx: usize) -> Range<usize> {
        let off = self.offsets[idx];
        off..off + self.segments[idx].len()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn shape(&self, idx: usize) -> &[usize] {
        &self.segments[idx].shape
    }

    pub fn matrix<'a>(&self, params: &'a [f64], idx: usize) -> ArrayView2<'a, f64> {
        let shape = self.shape(idx);
        ArrayView2::from_shape((shape[0], shape[1]), &params[self.range(idx)]).expect("segment is 2-D")
    }

    pub fn matrix_mut<'a>(&self, params: &'a mut [f64], idx: usize) -> ArrayViewMut2<'a, f64> {
        let shape = self.shape(idx).to_vec();
        let r = self.range(idx);
        ArrayViewMut2::from_shape((shape[0], shape[1]), &mut params[r]).expect("segment is 2-D")
    }

    pub fn vector<'a>(&self, params: &'a [f64], idx: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.range(idx)])
    }

    /// Mask that is `true` for every segment whose name does not start with
    /// one of `frozen_prefixes`.
    pub fn mask_excluding(&self, frozen_prefixes: &[&str]) -> Vec<bool> {
        let mut mask = vec![true; self.total];
        for (i, seg) in self.segments.iter().enumerate() {
            if frozen_prefixes.iter().any(|p| seg.name.starts_with(p)) {
                mask[self.range(i)].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }
}
