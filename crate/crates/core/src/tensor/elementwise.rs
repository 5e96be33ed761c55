//! Elementwise arithmetic, unary maps, and full reductions.

use super::shape::{axis_split, broadcast_shape, broadcast_strides, numel, PairIter};
use super::{BackCtx, Graph, Op, TensorId};
use crate::error::Result;
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Used by AcosClamped to keep d/dx acos bounded when |x| approaches 1.
const ACOS_EDGE: f64 = 1e-6;

impl Graph {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shape(op_name, self.shape(a), self.shape(b))?;
        let n = numel(&out_shape);
        let da = self.data(a);
        let db = self.data(b);
        let mut out = Vec::with_capacity(n);
        if self.shape(a) == self.shape(b) {
            out.extend(da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)));
        } else if db.len() == 1 {
            let y = db[0];
            out.extend(da.iter().map(|&x| f(x, y)));
        } else if da.len() == 1 {
            let x = da[0];
            out.extend(db.iter().map(|&y| f(x, y)));
        } else {
            let sa = broadcast_strides(self.shape(a), &out_shape);
            let sb = broadcast_strides(self.shape(b), &out_shape);
            let mut it = PairIter::new(&out_shape, sa, sb);
            loop {
                out.push(f(da[it.off_a], db[it.off_b]));
                if !it.step() {
                    break;
                }
            }
        }
        let rg = self.either_flows(a, b);
        Ok(self.push(out, out_shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a);
        self.push(out, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a);
        self.push(out, shape, rg, Op::MulScalar(a, c))
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a);
        self.push(out, shape, rg, op)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, math::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// GELU, tanh approximation. The inner tanh is cached for backward.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let rg = self.flows(a);
        let da = self.data(a);
        let mut tanh_inner = if rg {
            Vec::with_capacity(da.len())
        } else {
            Vec::new()
        };
        let mut out = Vec::with_capacity(da.len());
        for &x in da {
            // tanh(y) = 1 - 2/(e^{2y} + 1); exp saturates to the right
            // limits at both ends, no clamping needed.
            let y = GELU_C * (x + GELU_A * x * x * x);
            let t = 1.0 - 2.0 / (math::exp(2.0 * y) + 1.0);
            if rg {
                tanh_inner.push(t);
            }
            out.push(0.5 * x * (1.0 + t));
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, rg, Op::Gelu { input: a, tanh_inner })
    }

    /// `acos(clamp(x, -1, 1))`; the derivative treats |x| as capped slightly
    /// inside the interval so gradients stay finite at exact alignment.
    pub fn acos_clamped(&mut self, a: TensorId) -> TensorId {
        self.unary(
            a,
            |x| math::acos(x.clamp(-1.0, 1.0)),
            Op::AcosClamped(a),
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.flows(a);
        self.push(vec![s], vec![1], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.numel(a) as f64;
        let s: f64 = self.data(a).iter().sum();
        let rg = self.flows(a);
        self.push(vec![s / n], vec![1], rg, Op::MeanAll(a))
    }

    /// Sum over one axis; the axis is removed from the output shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() {
            return Err(crate::error::CoreError::BadArgument {
                op: "sum_axis",
                message: alloc::format!("axis {axis} out of range for shape {in_shape:?}"),
            });
        }
        let (outer, k, inner) = axis_split(&in_shape, axis);
        let mut out_shape: Vec<usize> = in_shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let da = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..k {
                let base = (o * k + j) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&da[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let rg = self.flows(a);
        Ok(self.push(out, out_shape, rg, Op::SumAxis { input: a, axis }))
    }
}

// ---- backward rules ----

/// Reduce an output-shaped gradient back to an operand's shape by summing
/// over broadcast dimensions.
fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut red = vec![0.0; numel(target)];
    let st = broadcast_strides(target, out_shape);
    let so = super::shape::contiguous_strides(out_shape);
    let mut it = PairIter::new(out_shape, so, st);
    loop {
        red[it.off_b] += grad[it.off_a];
        if !it.step() {
            break;
        }
    }
    red
}

fn broadcast_apply(
    ctx: &mut BackCtx,
    a: TensorId,
    b: TensorId,
    fa: impl Fn(f64, f64, f64) -> f64,
    fb: impl Fn(f64, f64, f64) -> f64,
) {
    let out_shape = ctx.out_shape().to_vec();
    let g = ctx.grad();
    let da = ctx.data(a);
    let db = ctx.data(b);
    let same = ctx.shape(a) == ctx.shape(b);
    let (mut ga, mut gb) = (Vec::new(), Vec::new());
    if same {
        if ctx.wants(a) {
            ga = g
                .iter()
                .zip(da.iter().zip(db.iter()))
                .map(|(&g, (&x, &y))| fa(g, x, y))
                .collect();
        }
        if ctx.wants(b) {
            gb = g
                .iter()
                .zip(da.iter().zip(db.iter()))
                .map(|(&g, (&x, &y))| fb(g, x, y))
                .collect();
        }
    } else {
        let sa = broadcast_strides(ctx.shape(a), &out_shape);
        let sb = broadcast_strides(ctx.shape(b), &out_shape);
        if ctx.wants(a) {
            ga = vec![0.0; da.len()];
        }
        if ctx.wants(b) {
            gb = vec![0.0; db.len()];
        }
        let mut it = PairIter::new(&out_shape, sa, sb);
        let mut i = 0usize;
        loop {
            let (x, y) = (da[it.off_a], db[it.off_b]);
            if !ga.is_empty() {
                ga[it.off_a] += fa(g[i], x, y);
            }
            if !gb.is_empty() {
                gb[it.off_b] += fb(g[i], x, y);
            }
            i += 1;
            if !it.step() {
                break;
            }
        }
    }
    if !ga.is_empty() {
        ctx.add_grad(a, ga);
    }
    if !gb.is_empty() {
        ctx.add_grad(b, gb);
    }
}

pub(crate) fn back_add(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    let out_shape = ctx.out_shape().to_vec();
    if ctx.wants(a) {
        let ga = reduce_to_shape(ctx.grad(), &out_shape, ctx.shape(a));
        ctx.add_grad(a, ga);
    }
    if ctx.wants(b) {
        let gb = reduce_to_shape(ctx.grad(), &out_shape, ctx.shape(b));
        ctx.add_grad(b, gb);
    }
}

pub(crate) fn back_sub(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    let out_shape = ctx.out_shape().to_vec();
    if ctx.wants(a) {
        let ga = reduce_to_shape(ctx.grad(), &out_shape, ctx.shape(a));
        ctx.add_grad(a, ga);
    }
    if ctx.wants(b) {
        let neg: Vec<f64> = ctx.grad().iter().map(|g| -g).collect();
        let gb = reduce_to_shape(&neg, &out_shape, ctx.shape(b));
        ctx.add_grad(b, gb);
    }
}

pub(crate) fn back_mul(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    broadcast_apply(ctx, a, b, |g, _x, y| g * y, |g, x, _y| g * x);
}

pub(crate) fn back_div(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    broadcast_apply(ctx, a, b, |g, _x, y| g / y, |g, x, y| -g * x / (y * y));
}

pub(crate) fn back_add_scalar(ctx: &mut BackCtx, a: TensorId) {
    ctx.add_grad(a, ctx.grad().to_vec());
}

pub(crate) fn back_mul_scalar(ctx: &mut BackCtx, a: TensorId, c: f64) {
    let ga: Vec<f64> = ctx.grad().iter().map(|g| g * c).collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_abs(ctx: &mut BackCtx, a: TensorId) {
    let ga: Vec<f64> = ctx
        .grad()
        .iter()
        .zip(ctx.data(a).iter())
        .map(|(&g, &x)| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_exp(ctx: &mut BackCtx, a: TensorId) {
    let ga: Vec<f64> = ctx
        .grad()
        .iter()
        .zip(ctx.out_data().iter())
        .map(|(&g, &y)| g * y)
        .collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_relu(ctx: &mut BackCtx, a: TensorId) {
    let ga: Vec<f64> = ctx
        .grad()
        .iter()
        .zip(ctx.data(a).iter())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_gelu(ctx: &mut BackCtx, a: TensorId, tanh_inner: &[f64]) {
    let ga: Vec<f64> = ctx
        .grad()
        .iter()
        .zip(ctx.data(a).iter().zip(tanh_inner))
        .map(|(&g, (&x, &t))| {
            let sech2 = 1.0 - t * t;
            let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner)
        })
        .collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_acos_clamped(ctx: &mut BackCtx, a: TensorId) {
    let ga: Vec<f64> = ctx
        .grad()
        .iter()
        .zip(ctx.data(a).iter())
        .map(|(&g, &x)| {
            let xc = x.clamp(-(1.0 - ACOS_EDGE), 1.0 - ACOS_EDGE);
            -g / math::sqrt(1.0 - xc * xc)
        })
        .collect();
    ctx.add_grad(a, ga);
}

pub(crate) fn back_sum_all(ctx: &mut BackCtx, a: TensorId) {
    let g = ctx.grad()[0];
    let n = ctx.data(a).len();
    ctx.add_grad(a, vec![g; n]);
}

pub(crate) fn back_mean_all(ctx: &mut BackCtx, a: TensorId) {
    let n = ctx.data(a).len();
    let g = ctx.grad()[0] / n as f64;
    ctx.add_grad(a, vec![g; n]);
}

pub(crate) fn back_sum_axis(ctx: &mut BackCtx, a: TensorId, axis: usize) {
    let in_shape = ctx.shape(a).to_vec();
    let (outer, k, inner) = axis_split(&in_shape, axis);
    let g = ctx.grad();
    let mut ga = vec![0.0; ctx.data(a).len()];
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for j in 0..k {
            let base = (o * k + j) * inner;
            for (d, s) in ga[base..base + inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    ctx.add_grad(a, ga);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_broadcast_bias() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], true);
        let b = g.leaf(vec![10.0, 20.0, 30.0], &[3], true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.data(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mul_interior_broadcast() {
        // [2,1,2] * [2,3,1]
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2], true);
        let b = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3, 1], true);
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2]);
        assert_eq!(
            g.data(y),
            &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 12.0, 16.0, 15.0, 20.0, 18.0, 24.0]
        );
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        // d/da[0,0,0] = sum over b[0,:,0] = 1+2+3
        assert_eq!(g.grad(a).unwrap(), &[6.0, 6.0, 15.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0, 3.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], &[2, 3]);
        let b = g.constant(vec![0.0; 4], &[4]);
        match g.add(a, b) {
            Err(crate::error::CoreError::DimMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_axis_values_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], true);
        let s0 = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.data(s0), &[5.0, 7.0, 9.0]);
        let s1 = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.data(s1), &[6.0, 15.0]);
        let loss = g.sum_all(s1);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn div_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(vec![6.0], &[1], true);
        let b = g.leaf(vec![2.0], &[1], true);
        let y = g.div(a, b).unwrap();
        assert_eq!(g.data(y), &[3.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.5]);
        assert_eq!(g.grad(b).unwrap(), &[-1.5]);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-2.0, 0.0, 3.0], &[3], true);
        let y = g.abs(x);
        assert_eq!(g.data(y), &[2.0, 0.0, 3.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }
}
