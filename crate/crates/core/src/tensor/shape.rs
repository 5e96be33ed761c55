//! Shape arithmetic: broadcasting rules and strided iteration.

use crate::error::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// NumPy-style broadcast of two shapes (right-aligned; extents must match or
/// be 1).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_right(a, ndim, i);
        let db = dim_from_right(b, ndim, i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(CoreError::DimMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], ndim: usize, i: usize) -> usize {
    let pad = ndim - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Row-major strides; broadcast dimensions (extent 1 against a larger output
/// extent) get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let pad = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let d = shape[i];
        strides[pad + i] = if d == 1 && out_shape[pad + i] != 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Odometer walking every coordinate of `shape` in row-major order while
/// tracking flat offsets for two strided operands.
pub struct PairIter<'a> {
    shape: &'a [usize],
    coords: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    pub off_a: usize,
    pub off_b: usize,
    remaining: usize,
}

impl<'a> PairIter<'a> {
    pub fn new(shape: &'a [usize], sa: Vec<usize>, sb: Vec<usize>) -> Self {
        PairIter {
            shape,
            coords: vec![0; shape.len()],
            sa,
            sb,
            off_a: 0,
            off_b: 0,
            remaining: numel(shape),
        }
    }

    /// Advance to the next coordinate. Returns false when exhausted.
    pub fn step(&mut self) -> bool {
        if self.remaining <= 1 {
            self.remaining = 0;
            return false;
        }
        self.remaining -= 1;
        for d in (0..self.shape.len()).rev() {
            self.coords[d] += 1;
            self.off_a += self.sa[d];
            self.off_b += self.sb[d];
            if self.coords[d] < self.shape[d] {
                return true;
            }
            self.off_a -= self.sa[d] * self.shape[d];
            self.off_b -= self.sb[d] * self.shape[d];
            self.coords[d] = 0;
        }
        false
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }
}

/// Split a shape at `axis` into (outer, axis extent, inner) for reductions
/// and softmax-style slice walks.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
