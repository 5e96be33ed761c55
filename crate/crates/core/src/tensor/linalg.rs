//! Matrix products: plain 2-D matmul and batched matmul.

use super::{BackCtx, Graph, Op, TensorId};
use crate::error::{CoreError, Result};
use alloc::vec;


/// c[m,n] += a[m,k] * b[k,n], all row-major slices. Register-tiled (4x8
/// accumulator block) so the k-loop runs from registers instead of storing
/// through c on every step. Per-element summation order is ascending in k in
/// every path, keeping results deterministic across tile boundaries.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let brow = &b[p * n + j..p * n + j + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + p];
                        for q in 0..NR {
                            acc[r][q] += av * brow[q];
                        }
                    }
                }
                for (r, arow) in acc.iter().enumerate() {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for q in 0..NR {
                        crow[q] += arow[q];
                    }
                }
            } else {
                for r in 0..mr {
                    for q in 0..nr {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += a[(i + r) * k + p] * b[p * n + j + q];
                        }
                        c[(i + r) * n + j + q] += s;
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T (b given row-major as [n,k]). Materializes
/// b^T once so the inner loops stay in streaming axpy form.
fn gemm_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut bt = alloc::vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_acc(c, a, &bt, m, k, n);
}

/// c[k,n] += a[m,k]^T * b[m,n] (a given row-major as [m,k]).
pub(crate) fn gemm_ta_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut at = alloc::vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    gemm_acc(c, &at, b, k, m, n);
}

impl Graph {
    /// Standard matrix product of 2-D tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::DimMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.data(a), self.data(b), m, k, n);
        let rg = self.either_flows(a, b);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul(a, b)))
    }

    /// Batched matrix product: `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::DimMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let da = self.data(a);
        let db = self.data(b);
        for s in 0..g {
            gemm_acc(
                &mut out[s * m * n..(s + 1) * m * n],
                &da[s * m * k..(s + 1) * m * k],
                &db[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let rg = self.either_flows(a, b);
        Ok(self.push(out, vec![g, m, n], rg, Op::Bmm(a, b)))
    }
}

pub(crate) fn back_matmul(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    let (m, k) = (ctx.shape(a)[0], ctx.shape(a)[1]);
    let n = ctx.shape(b)[1];
    if ctx.wants(a) {
        // dA = g * B^T
        let mut ga = vec![0.0; m * k];
        gemm_bt_acc(&mut ga, ctx.grad(), ctx.data(b), m, n, k);
        ctx.add_grad(a, ga);
    }
    if ctx.wants(b) {
        // dB = A^T * g
        let mut gb = vec![0.0; k * n];
        gemm_ta_acc(&mut gb, ctx.data(a), ctx.grad(), m, k, n);
        ctx.add_grad(b, gb);
    }
}

pub(crate) fn back_bmm(ctx: &mut BackCtx, a: TensorId, b: TensorId) {
    let (g, m, k) = (ctx.shape(a)[0], ctx.shape(a)[1], ctx.shape(a)[2]);
    let n = ctx.shape(b)[2];
    let grad = ctx.grad();
    if ctx.wants(a) {
        // dA_s = g_s * B_s^T, with one transpose scratch reused per slice.
        let mut ga = vec![0.0; g * m * k];
        let db = ctx.data(b);
        let mut bt = vec![0.0; n * k];
        for s in 0..g {
            let bs = &db[s * k * n..(s + 1) * k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = bs[p * n + j];
                }
            }
            gemm_acc(
                &mut ga[s * m * k..(s + 1) * m * k],
                &grad[s * m * n..(s + 1) * m * n],
                &bt,
                m,
                n,
                k,
            );
        }
        ctx.add_grad(a, ga);
    }
    if ctx.wants(b) {
        // dB_s = A_s^T * g_s
        let mut gb = vec![0.0; g * k * n];
        let da = ctx.data(a);
        let mut at = vec![0.0; k * m];
        for s in 0..g {
            let asl = &da[s * m * k..(s + 1) * m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = asl[i * k + p];
                }
            }
            gemm_acc(
                &mut gb[s * k * n..(s + 1) * k * n],
                &at,
                &grad[s * m * n..(s + 1) * m * n],
                k,
                m,
                n,
            );
        }
        ctx.add_grad(b, gb);
    }
}
