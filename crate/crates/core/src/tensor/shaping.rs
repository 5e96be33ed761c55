//! Shape-rearranging operations: reshape, permute, narrow, concat.

use super::shape::{contiguous_strides, numel};
use super::{BackCtx, Graph, Op, TensorId};
use crate::error::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

impl Graph {
    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        if numel(new_shape) != self.numel(a) {
            return Err(CoreError::BadShape {
                op: "reshape",
                shape: self.shape(a).to_vec(),
                expected: alloc::format!("shape with {} elements, got {new_shape:?}", self.numel(a)),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.flows(a);
        Ok(self.push(data, new_shape.to_vec(), rg, Op::Reshape(a)))
    }

    /// Reorder axes; `dims` is a permutation of `0..rank`.
    pub fn permute(&mut self, a: TensorId, dims: &[usize]) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || core::mem::replace(&mut seen[d], true)) {
            return Err(CoreError::BadArgument {
                op: "permute",
                message: alloc::format!("{dims:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = dims.iter().map(|&d| in_shape[d]).collect();
        let data = permute_data(self.data(a), &in_shape, dims);
        let rg = self.flows(a);
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Permute {
                input: a,
                dims: dims.to_vec(),
            },
        ))
    }

    /// 2-D transpose shorthand.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.permute(a, &[1, 0])
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] || len == 0 {
            return Err(CoreError::BadArgument {
                op: "narrow",
                message: alloc::format!(
                    "range {start}..{} out of bounds for axis {axis} of {in_shape:?}",
                    start + len
                ),
            });
        }
        let (outer, k, inner) = super::shape::axis_split(&in_shape, axis);
        let din = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * k + start) * inner;
            out.extend_from_slice(&din[base..base + len * inner]);
        }
        let mut out_shape = in_shape;
        out_shape[axis] = len;
        let rg = self.flows(a);
        Ok(self.push(out, out_shape, rg, Op::Narrow { input: a, axis, start }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CoreError::BadArgument {
                op: "concat",
                message: alloc::format!("needs at least one input"),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::BadArgument {
                op: "concat",
                message: alloc::format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(CoreError::DimMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = super::shape::axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &id in inputs {
                let k = self.shape(id)[axis];
                let src = self.data(id);
                out.extend_from_slice(&src[o * k * inner..(o + 1) * k * inner]);
            }
        }
        let rg = inputs.iter().any(|&id| self.flows(id));
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }
}

fn permute_data(data: &[f64], in_shape: &[usize], dims: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = dims.iter().map(|&d| in_shape[d]).collect();
    let in_strides = contiguous_strides(in_shape);
    // Stride of output axis d in the input layout.
    let walk: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = numel(in_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            off += walk[d];
            if coords[d] < out_shape[d] {
                break;
            }
            off -= walk[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

pub(crate) fn back_reshape(ctx: &mut BackCtx, a: TensorId) {
    ctx.add_grad(a, ctx.grad().to_vec());
}

pub(crate) fn back_permute(ctx: &mut BackCtx, a: TensorId, dims: &[usize]) {
    // Inverse permutation maps the output-shaped gradient back.
    let mut inverse = vec![0usize; dims.len()];
    for (i, &d) in dims.iter().enumerate() {
        inverse[d] = i;
    }
    let ga = permute_data(ctx.grad(), ctx.out_shape(), &inverse);
    ctx.add_grad(a, ga);
}

pub(crate) fn back_narrow(ctx: &mut BackCtx, a: TensorId, axis: usize, start: usize) {
    let in_shape = ctx.shape(a).to_vec();
    let (outer, k, inner) = super::shape::axis_split(&in_shape, axis);
    let len = ctx.out_shape()[axis];
    let grad = ctx.grad();
    let mut gi = vec![0.0; ctx.data(a).len()];
    for o in 0..outer {
        let dst = (o * k + start) * inner;
        let src = o * len * inner;
        gi[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
    }
    ctx.add_grad(a, gi);
}

pub(crate) fn back_concat(ctx: &mut BackCtx, inputs: &[TensorId], axis: usize) {
    let out_shape = ctx.out_shape().to_vec();
    let (outer, _, inner) = super::shape::axis_split(&out_shape, axis);
    let grad = ctx.grad();
    let mut offset = 0usize;
    let widths: Vec<usize> = inputs.iter().map(|&id| ctx.shape(id)[axis]).collect();
    let total: usize = widths.iter().sum();
    for (&id, &k) in inputs.iter().zip(&widths) {
        if ctx.wants(id) {
            let mut gi = vec![0.0; outer * k * inner];
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                gi[o * k * inner..(o + 1) * k * inner]
                    .copy_from_slice(&grad[src..src + k * inner]);
            }
            ctx.add_grad(id, gi);
        }
        offset += k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.leaf(data.clone(), &[2, 3, 4], true);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), &data[..]);
        // x[1,2,3] should land at p[3,1,2]
        assert_eq!(g.data(p)[(3 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 3]);
        let loss = g.sum_all(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &vec![1.0; 24][..]);
    }

    #[test]
    fn narrow_and_grad_scatter() {
        let mut g = Graph::new();
        let x = g.leaf((0..12).map(|v| v as f64).collect(), &[3, 4], true);
        let mid = g.narrow(x, 0, 1, 1).unwrap();
        assert_eq!(g.data(mid), &[4.0, 5.0, 6.0, 7.0]);
        let cols = g.narrow(x, 1, 2, 2).unwrap();
        assert_eq!(g.data(cols), &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0]);
        let loss = g.sum_all(mid);
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn concat_channels() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], true);
        let b = g.leaf(vec![5.0, 6.0, 7.0, 8.0], &[1, 1, 2, 2], true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 2]);
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let half = g.narrow(c, 1, 1, 1).unwrap();
        let loss = g.sum_all(half);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 4], &[1, 1, 2, 2]);
        let b = g.constant(vec![0.0; 6], &[1, 1, 2, 3]);
        assert!(g.concat(&[a, b], 1).is_err());
    }
}
