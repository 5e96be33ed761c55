//! Neural-network operations: convolution, pooling, interpolation,
//! normalization, attention, embeddings, and spatial cross-entropy.

use super::shape::axis_split;
use super::{BackCtx, Graph, Op, TensorId};
use crate::error::{CoreError, Result};
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

impl Graph {
    /// 2-D cross-correlation over `[B,C,H,W]` with kernel `[O,C,k,k]` and
    /// optional per-output-channel bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(CoreError::DimMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if si[1] != sk[1] {
            return Err(CoreError::DimMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(CoreError::BadArgument {
                op: "conv2d",
                message: alloc::format!("stride must be positive"),
            });
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sk[0], sk[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(CoreError::BadArgument {
                op: "conv2d",
                message: alloc::format!(
                    "kernel {k} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        if let Some(bi) = bias {
            if self.shape(bi) != [o] {
                return Err(CoreError::DimMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(bi).to_vec(),
                    rhs: vec![o],
                });
            }
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let din = self.data(input);
        let dk = self.data(kernel);
        // im2col + tiled gemm: patches [B*OH*OW, C*k*k] x kernel^T.
        let geom = ConvGeom {
            b,
            c,
            h,
            w,
            o,
            k,
            oh,
            ow,
            stride,
            padding,
        };
        let patches = im2col(din, &geom);
        let rows = b * oh * ow;
        let ckk = c * k * k;
        let mut kt = vec![0.0; ckk * o];
        for oc in 0..o {
            for j in 0..ckk {
                kt[j * o + oc] = dk[oc * ckk + j];
            }
        }
        let mut out_mat = vec![0.0; rows * o];
        super::linalg::gemm_acc(&mut out_mat, &patches, &kt, rows, ckk, o);
        let mut out = vec![0.0; b * o * oh * ow];
        let plane = oh * ow;
        for bi_ in 0..b {
            for p in 0..plane {
                let row = &out_mat[(bi_ * plane + p) * o..(bi_ * plane + p + 1) * o];
                for (oc, v) in row.iter().enumerate() {
                    out[(bi_ * o + oc) * plane + p] = *v;
                }
            }
        }
        if let Some(bid) = bias {
            let bv = self.data(bid);
            for bi_ in 0..b {
                for (oc, bvv) in bv.iter().enumerate() {
                    for v in &mut out[(bi_ * o + oc) * plane..(bi_ * o + oc + 1) * plane] {
                        *v += bvv;
                    }
                }
            }
        }
        let rg = self.flows(input)
            || self.flows(kernel)
            || bias.map(|bi| self.flows(bi)).unwrap_or(false);
        Ok(self.push(
            out,
            vec![b, o, oh, ow],
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Mean-pool `[B,C,H,W]` into `out_h x out_w` bins that partition the
    /// input (bin i covers rows `floor(i*H/out_h) .. floor((i+1)*H/out_h)`).
    pub fn adaptive_avg_pool2d(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(CoreError::BadShape {
                op: "adaptive_avg_pool2d",
                shape: s,
                expected: alloc::format!("rank-4 [B,C,H,W]"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(CoreError::BadArgument {
                op: "adaptive_avg_pool2d",
                message: alloc::format!(
                    "output {out_h}x{out_w} must be nonzero and no larger than input {h}x{w}"
                ),
            });
        }
        let din = self.data(input);
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &din[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1) = (oy * h / out_h, (oy + 1) * h / out_h);
                for ox in 0..out_w {
                    let (x0, x1) = (ox * w / out_w, (ox + 1) * w / out_w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += src[y * w + x];
                        }
                    }
                    dst[oy * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.flows(input);
        Ok(self.push(
            out,
            vec![b, c, out_h, out_w],
            rg,
            Op::AdaptiveAvgPool2d { input },
        ))
    }

    /// Nearest-neighbour upsample: `out(y,x) = in(floor(y*h/out_h), floor(x*w/out_w))`.
    pub fn nearest_upsample(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(CoreError::BadShape {
                op: "nearest_upsample",
                shape: s,
                expected: alloc::format!("rank-4 [B,C,h,w]"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if out_h < h || out_w < w {
            return Err(CoreError::BadArgument {
                op: "nearest_upsample",
                message: alloc::format!(
                    "output {out_h}x{out_w} must be at least input {h}x{w}"
                ),
            });
        }
        let din = self.data(input);
        let sx: Vec<usize> = (0..out_w).map(|ox| ox * w / out_w).collect();
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &din[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for oy in 0..out_h {
                let sy = oy * h / out_h;
                let src_row = &src[sy * w..(sy + 1) * w];
                let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                for (d, &s) in dst_row.iter_mut().zip(&sx) {
                    *d = src_row[s];
                }
            }
        }
        let rg = self.flows(input);
        Ok(self.push(
            out,
            vec![b, c, out_h, out_w],
            rg,
            Op::NearestUpsample { input },
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let out = self.softmax_values(input, axis, false)?;
        let shape = self.shape(input).to_vec();
        let rg = self.flows(input);
        Ok(self.push(out, shape, rg, Op::Softmax { input, axis }))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let out = self.softmax_values(input, axis, true)?;
        let shape = self.shape(input).to_vec();
        let rg = self.flows(input);
        Ok(self.push(out, shape, rg, Op::LogSoftmax { input, axis }))
    }

    fn softmax_values(&self, input: TensorId, axis: usize, log: bool) -> Result<Vec<f64>> {
        let s = self.shape(input);
        if axis >= s.len() {
            return Err(CoreError::BadArgument {
                op: "softmax",
                message: alloc::format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, k, inner) = axis_split(s, axis);
        let din = self.data(input);
        let mut out = vec![0.0; din.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..k {
                    max = max.max(din[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..k {
                    let e = math::exp(din[base + j * inner] - max);
                    out[base + j * inner] = e;
                    sum += e;
                }
                if log {
                    let lse = math::ln(sum);
                    for j in 0..k {
                        out[base + j * inner] = din[base + j * inner] - max - lse;
                    }
                } else {
                    for j in 0..k {
                        out[base + j * inner] /= sum;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or(CoreError::BadShape {
            op: "layer_norm",
            shape: s.clone(),
            expected: alloc::format!("rank >= 1"),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CoreError::DimMismatch {
                op: "layer_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![d],
            });
        }
        let din = self.data(input);
        let dg = self.data(gamma);
        let db = self.data(beta);
        let rows = din.len() / d;
        let mut out = vec![0.0; din.len()];
        for r in 0..rows {
            let src = &din[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            let dst = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                dst[j] = (src[j] - mean) * inv * dg[j] + db[j];
            }
        }
        let rg = self.flows(input) || self.flows(gamma) || self.flows(beta);
        Ok(self.push(
            out,
            s,
            rg,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// L2-normalize slices along `axis`: `y = x / max(||x||, eps)`.
    pub fn l2_normalize(&mut self, input: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(CoreError::BadArgument {
                op: "l2_normalize",
                message: alloc::format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, k, inner) = axis_split(&s, axis);
        let din = self.data(input);
        let mut out = vec![0.0; din.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * k * inner + i;
                let mut sq = 0.0;
                for j in 0..k {
                    let v = din[base + j * inner];
                    sq += v * v;
                }
                let norm = math::sqrt(sq).max(eps);
                for j in 0..k {
                    out[base + j * inner] = din[base + j * inner] / norm;
                }
            }
        }
        let rg = self.flows(input);
        Ok(self.push(out, s, rg, Op::L2Normalize { input, axis, eps }))
    }

    /// Row lookup: `ids` index into `table[V,D]`, output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(CoreError::BadShape {
                op: "embedding",
                shape: s.to_vec(),
                expected: alloc::format!("rank-2 [V,D]"),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(CoreError::Input {
                message: alloc::format!("token id {bad} out of vocabulary (size {v})"),
            });
        }
        let dt = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&dt[i as usize * d..(i as usize + 1) * d]);
        }
        let rg = self.flows(table);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Gather one row per batch element: `[B,T,D]` with `positions[b] < T`
    /// yields `[B,D]`.
    pub fn select_rows(&mut self, input: TensorId, positions: &[usize]) -> Result<TensorId> {
        let s = self.shape(input);
        if s.len() != 3 || positions.len() != s[0] {
            return Err(CoreError::BadShape {
                op: "select_rows",
                shape: s.to_vec(),
                expected: alloc::format!("rank-3 [B,T,D] with {} positions", positions.len()),
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if let Some(&bad) = positions.iter().find(|&&p| p >= t) {
            return Err(CoreError::BadArgument {
                op: "select_rows",
                message: alloc::format!("position {bad} out of range 0..{t}"),
            });
        }
        let din = self.data(input);
        let mut out = Vec::with_capacity(b * d);
        for (bi, &p) in positions.iter().enumerate() {
            let base = (bi * t + p) * d;
            out.extend_from_slice(&din[base..base + d]);
        }
        let rg = self.flows(input);
        Ok(self.push(
            out,
            vec![b, d],
            rg,
            Op::SelectRows {
                input,
                positions: positions.to_vec(),
            },
        ))
    }

    /// Mean per-pixel cross-entropy of `[B,C,H,W]` logits against class-id
    /// targets (row-major over `[B,H,W]`), skipping pixels labeled
    /// `ignore_id`. Returns the scalar loss and the number of counted pixels
    /// (0 counted pixels gives loss 0).
    pub fn cross_entropy_spatial(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        ignore_id: u32,
    ) -> Result<(TensorId, usize)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(CoreError::BadShape {
                op: "cross_entropy_spatial",
                shape: s,
                expected: alloc::format!("rank-4 [B,C,H,W]"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if targets.len() != b * h * w {
            return Err(CoreError::BadArgument {
                op: "cross_entropy_spatial",
                message: alloc::format!(
                    "expected {} targets, got {}",
                    b * h * w,
                    targets.len()
                ),
            });
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != ignore_id && t as usize >= c)
        {
            return Err(CoreError::Input {
                message: alloc::format!("class id {bad} out of range 0..{c}"),
            });
        }
        let rg = self.flows(logits);
        let din = self.data(logits);
        let hw = h * w;
        let mut total = 0.0;
        let mut count = 0usize;
        // Probabilities double as the backward cache when gradients flow.
        let mut probs = if rg { vec![0.0; din.len()] } else { Vec::new() };
        let mut col = vec![0.0; c];
        for bi in 0..b {
            for px in 0..hw {
                let t = targets[bi * hw + px];
                if t == ignore_id {
                    continue;
                }
                let base = bi * c * hw + px;
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(din[base + ch * hw]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = math::exp(din[base + ch * hw] - max);
                    col[ch] = e;
                    sum += e;
                }
                if rg {
                    for ch in 0..c {
                        probs[base + ch * hw] = col[ch] / sum;
                    }
                }
                total += max + math::ln(sum) - din[base + t as usize * hw];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let id = self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropySpatial {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                valid_count: count,
                probs,
            },
        );
        Ok((id, count))
    }

    /// Scaled dot-product attention over `[G,T,dh]` query/key/value stacks;
    /// composed from bmm, scaling, and softmax.
    pub fn scaled_dot_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
    ) -> Result<TensorId> {
        let sk = self.shape(k).to_vec();
        if sk.len() != 3 {
            return Err(CoreError::BadShape {
                op: "scaled_dot_attention",
                shape: sk,
                expected: alloc::format!("rank-3 [G,T,dh]"),
            });
        }
        let kt = self.permute(k, &[0, 2, 1])?;
        let scores = self.bmm(q, kt)?;
        let scaled = self.mul_scalar(scores, 1.0 / math::sqrt(sk[2] as f64));
        let attn = self.softmax(scaled, 2)?;
        self.bmm(attn, v)
    }
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

/// Gather padded input windows into a `[B*OH*OW, C*k*k]` row-major matrix.
fn im2col(din: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c * g.k * g.k;
    let rows = g.b * g.oh * g.ow;
    let mut patches = vec![0.0; rows * ckk];
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((bi * g.oh + oy) * g.ow + ox) * ckk;
                for ic in 0..g.c {
                    let plane = &din[(bi * g.c + ic) * g.h * g.w..(bi * g.c + ic + 1) * g.h * g.w];
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = row + (ic * g.k + ki) * g.k;
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for kj in 0..g.k {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                patches[dst + kj] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Scatter-add patch-space gradients back into input space (inverse of
/// [`im2col`]).
fn col2im_acc(dpatches: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let ckk = g.c * g.k * g.k;
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((bi * g.oh + oy) * g.ow + ox) * ckk;
                for ic in 0..g.c {
                    let base = (bi * g.c + ic) * g.h * g.w;
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = row + (ic * g.k + ki) * g.k;
                        let dst = base + iy as usize * g.w;
                        for kj in 0..g.k {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dinput[dst + ix as usize] += dpatches[src + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn back_conv2d(
    ctx: &mut BackCtx,
    input: TensorId,
    kernel: TensorId,
    bias: Option<TensorId>,
    stride: usize,
    padding: usize,
) {
    let si = ctx.shape(input).to_vec();
    let sk = ctx.shape(kernel).to_vec();
    let so = ctx.out_shape().to_vec();
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, k) = (sk[0], sk[2]);
    let (oh, ow) = (so[2], so[3]);
    let geom = ConvGeom {
        b,
        c,
        h,
        w,
        o,
        k,
        oh,
        ow,
        stride,
        padding,
    };
    let grad = ctx.grad();
    let plane = oh * ow;
    let rows = b * plane;
    let ckk = c * k * k;

    // grad as [rows, O]
    let mut g_mat = vec![0.0; rows * o];
    for bi in 0..b {
        for oc in 0..o {
            let src = &grad[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
            for (p, v) in src.iter().enumerate() {
                g_mat[(bi * plane + p) * o + oc] = *v;
            }
        }
    }

    if ctx.wants(input) {
        // dPatches = g_mat * K (K as [O, C*k*k]), scattered back to input.
        let mut dpatches = vec![0.0; rows * ckk];
        super::linalg::gemm_acc(&mut dpatches, &g_mat, ctx.data(kernel), rows, o, ckk);
        let mut gi = vec![0.0; b * c * h * w];
        col2im_acc(&dpatches, &geom, &mut gi);
        ctx.add_grad(input, gi);
    }

    if ctx.wants(kernel) {
        // dK = g_mat^T * patches
        let patches = im2col(ctx.data(input), &geom);
        let mut gk = vec![0.0; o * ckk];
        super::linalg::gemm_ta_acc(&mut gk, &g_mat, &patches, rows, o, ckk);
        ctx.add_grad(kernel, gk);
    }

    if let Some(bid) = bias {
        if ctx.wants(bid) {
            let mut gb = vec![0.0; o];
            for bi in 0..b {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    let g_plane = &grad[(bi * o + oc) * plane..(bi * o + oc + 1) * plane];
                    *acc += g_plane.iter().sum::<f64>();
                }
            }
            ctx.add_grad(bid, gb);
        }
    }
}

pub(crate) fn back_adaptive_avg_pool2d(ctx: &mut BackCtx, input: TensorId) {
    let si = ctx.shape(input).to_vec();
    let so = ctx.out_shape().to_vec();
    let (h, w) = (si[2], si[3]);
    let (oh, ow) = (so[2], so[3]);
    let planes = si[0] * si[1];
    let grad = ctx.grad();
    let mut gi = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let g = &grad[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (oy * h / oh, (oy + 1) * h / oh);
            for ox in 0..ow {
                let (x0, x1) = (ox * w / ow, (ox + 1) * w / ow);
                let gv = g[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst[y * w + x] += gv;
                    }
                }
            }
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_nearest_upsample(ctx: &mut BackCtx, input: TensorId) {
    let si = ctx.shape(input).to_vec();
    let so = ctx.out_shape().to_vec();
    let (h, w) = (si[2], si[3]);
    let (oh, ow) = (so[2], so[3]);
    let planes = si[0] * si[1];
    let grad = ctx.grad();
    let sx: Vec<usize> = (0..ow).map(|ox| ox * w / ow).collect();
    let mut gi = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let g = &grad[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let sy = oy * h / oh;
            let g_row = &g[oy * ow..(oy + 1) * ow];
            let dst_row = &mut dst[sy * w..(sy + 1) * w];
            for (gv, &s) in g_row.iter().zip(&sx) {
                dst_row[s] += gv;
            }
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_softmax(ctx: &mut BackCtx, input: TensorId, axis: usize) {
    let s = ctx.out_shape().to_vec();
    let (outer, k, inner) = axis_split(&s, axis);
    let y = ctx.out_data();
    let grad = ctx.grad();
    let mut gi = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut dot = 0.0;
            for j in 0..k {
                dot += grad[base + j * inner] * y[base + j * inner];
            }
            for j in 0..k {
                let idx = base + j * inner;
                gi[idx] = y[idx] * (grad[idx] - dot);
            }
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_log_softmax(ctx: &mut BackCtx, input: TensorId, axis: usize) {
    let s = ctx.out_shape().to_vec();
    let (outer, k, inner) = axis_split(&s, axis);
    let y = ctx.out_data();
    let grad = ctx.grad();
    let mut gi = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut gsum = 0.0;
            for j in 0..k {
                gsum += grad[base + j * inner];
            }
            for j in 0..k {
                let idx = base + j * inner;
                gi[idx] = grad[idx] - math::exp(y[idx]) * gsum;
            }
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_layer_norm(
    ctx: &mut BackCtx,
    input: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: f64,
) {
    let din = ctx.data(input);
    let dg = ctx.data(gamma);
    let d = ctx.shape(gamma)[0];
    let rows = din.len() / d;
    let grad = ctx.grad();

    let mut gi = if ctx.wants(input) {
        vec![0.0; din.len()]
    } else {
        Vec::new()
    };
    let mut gg = if ctx.wants(gamma) {
        vec![0.0; d]
    } else {
        Vec::new()
    };
    let mut gb = if ctx.wants(beta) {
        vec![0.0; d]
    } else {
        Vec::new()
    };

    for r in 0..rows {
        let x = &din[r * d..(r + 1) * d];
        let g = &grad[r * d..(r + 1) * d];
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        if !gg.is_empty() || !gb.is_empty() {
            for j in 0..d {
                let xhat = (x[j] - mean) * inv;
                if !gg.is_empty() {
                    gg[j] += g[j] * xhat;
                }
                if !gb.is_empty() {
                    gb[j] += g[j];
                }
            }
        }
        if !gi.is_empty() {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let xhat = (x[j] - mean) * inv;
                let dxhat = g[j] * dg[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let df = d as f64;
            let dst = &mut gi[r * d..(r + 1) * d];
            for j in 0..d {
                let xhat = (x[j] - mean) * inv;
                let dxhat = g[j] * dg[j];
                dst[j] = inv / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    if !gi.is_empty() {
        ctx.add_grad(input, gi);
    }
    if !gg.is_empty() {
        ctx.add_grad(gamma, gg);
    }
    if !gb.is_empty() {
        ctx.add_grad(beta, gb);
    }
}

pub(crate) fn back_l2_normalize(ctx: &mut BackCtx, input: TensorId, axis: usize, eps: f64) {
    let s = ctx.shape(input).to_vec();
    let (outer, k, inner) = axis_split(&s, axis);
    let x = ctx.data(input);
    let y = ctx.out_data();
    let grad = ctx.grad();
    let mut gi = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut sq = 0.0;
            let mut dot = 0.0;
            for j in 0..k {
                let idx = base + j * inner;
                sq += x[idx] * x[idx];
                dot += grad[idx] * y[idx];
            }
            let norm = math::sqrt(sq);
            if norm > eps {
                for j in 0..k {
                    let idx = base + j * inner;
                    gi[idx] = (grad[idx] - y[idx] * dot) / norm;
                }
            } else {
                // Saturated at the eps floor: y = x / eps.
                for j in 0..k {
                    let idx = base + j * inner;
                    gi[idx] = grad[idx] / eps;
                }
            }
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_embedding(ctx: &mut BackCtx, table: TensorId, ids: &[u32]) {
    if !ctx.wants(table) {
        return;
    }
    let d = ctx.shape(table)[1];
    let grad = ctx.grad();
    let mut gt = vec![0.0; ctx.data(table).len()];
    for (row, &i) in ids.iter().enumerate() {
        let src = &grad[row * d..(row + 1) * d];
        let dst = &mut gt[i as usize * d..(i as usize + 1) * d];
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    ctx.add_grad(table, gt);
}

pub(crate) fn back_select_rows(ctx: &mut BackCtx, input: TensorId, positions: &[usize]) {
    let s = ctx.shape(input).to_vec();
    let (t, d) = (s[1], s[2]);
    let grad = ctx.grad();
    let mut gi = vec![0.0; ctx.data(input).len()];
    for (bi, &p) in positions.iter().enumerate() {
        let dst = &mut gi[(bi * t + p) * d..(bi * t + p + 1) * d];
        let src = &grad[bi * d..(bi + 1) * d];
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    ctx.add_grad(input, gi);
}

pub(crate) fn back_cross_entropy_spatial(
    ctx: &mut BackCtx,
    logits: TensorId,
    targets: &[u32],
    ignore_id: u32,
    valid_count: usize,
    probs: &[f64],
) {
    if valid_count == 0 || probs.is_empty() {
        return;
    }
    let s = ctx.shape(logits).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let g = ctx.grad()[0] / valid_count as f64;
    let mut gi = vec![0.0; probs.len()];
    for bi in 0..b {
        for px in 0..hw {
            let t = targets[bi * hw + px];
            if t == ignore_id {
                continue;
            }
            let base = bi * c * hw + px;
            for ch in 0..c {
                let y = if ch == t as usize { 1.0 } else { 0.0 };
                gi[base + ch * hw] = g * (probs[base + ch * hw] - y);
            }
        }
    }
    ctx.add_grad(logits, gi);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_pointwise_identity() {
        // 1x1 kernel with weight 1, bias 0: output equals input per channel.
        let mut g = Graph::new();
        let x = g.constant((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let k = g.constant(vec![1.0], &[1, 1, 1, 1]);
        let b = g.constant(vec![0.0], &[1]);
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv2d_box_sum_oracle() {
        // 3x3 all-ones kernel on constant-1 input, padding 1: interior 9,
        // corners 4, edges 6 (direct summation oracle).
        let mut g = Graph::new();
        let x = g.constant(vec![1.0; 16], &[1, 1, 4, 4]);
        let k = g.constant(vec![1.0; 9], &[1, 1, 3, 3]);
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[1], 6.0); // edge
        assert_eq!(d[5], 9.0); // interior
        assert_eq!(d[15], 4.0);
    }

    #[test]
    fn conv2d_stride_two_samples_even_coordinates() {
        let mut g = Graph::new();
        let x = g.constant((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let k = g.constant(vec![1.0], &[1, 1, 1, 1]);
        let y = g.conv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.data(y), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 32], &[1, 2, 4, 4]);
        let k = g.constant(vec![0.0; 27], &[1, 3, 3, 3]);
        assert!(matches!(
            g.conv2d(x, k, None, 1, 1),
            Err(CoreError::DimMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_matches_direct_summation_oracle() {
        let mut rng = crate::rng::Rng::new(21);
        for &(stride, padding, k) in &[(1usize, 1usize, 3usize), (2, 0, 1), (1, 0, 3), (2, 1, 3)] {
            let (b, c, o, h, w) = (2, 3, 2, 5, 6);
            if h + 2 * padding < k {
                continue;
            }
            let x: Vec<f64> = (0..b * c * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
            let ker: Vec<f64> = (0..o * c * k * k).map(|_| rng.range(-1.0, 1.0)).collect();
            let bias: Vec<f64> = (0..o).map(|_| rng.range(-1.0, 1.0)).collect();
            let oh = (h + 2 * padding - k) / stride + 1;
            let ow = (w + 2 * padding - k) / stride + 1;
            let mut expect = vec![0.0; b * o * oh * ow];
            for bi in 0..b {
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias[oc];
                            for ic in 0..c {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let iy = (oy * stride + ki) as isize - padding as isize;
                                        let ix = (ox * stride + kj) as isize - padding as isize;
                                        if iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < w as isize
                                        {
                                            s += x[((bi * c + ic) * h + iy as usize) * w
                                                + ix as usize]
                                                * ker[((oc * c + ic) * k + ki) * k + kj];
                                        }
                                    }
                                }
                            }
                            expect[((bi * o + oc) * oh + oy) * ow + ox] = s;
                        }
                    }
                }
            }
            let mut g = Graph::new();
            let tx = g.constant(x, &[b, c, h, w]);
            let tk = g.constant(ker, &[o, c, k, k]);
            let tb = g.constant(bias, &[o]);
            let y = g.conv2d(tx, tk, Some(tb), stride, padding).unwrap();
            for (got, want) in g.data(y).iter().zip(&expect) {
                assert!(
                    (got - want).abs() < 1e-12,
                    "conv2d mismatch at stride={stride} padding={padding} k={k}"
                );
            }
        }
    }

    #[test]
    fn adaptive_pool_identity_and_global_mean() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.constant(data.clone(), &[1, 1, 4, 4]);
        let same = g.adaptive_avg_pool2d(x, 4, 4).unwrap();
        assert_eq!(g.data(same), &data[..]);
        let global = g.adaptive_avg_pool2d(x, 1, 1).unwrap();
        assert_eq!(g.data(global), &[7.5]);
    }

    #[test]
    fn adaptive_pool_bin_means() {
        // 4x4 ramp to 2x2: each cell is the mean of its 2x2 bin.
        let mut g = Graph::new();
        let x = g.constant((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let y = g.adaptive_avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.data(y), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn adaptive_pool_rejects_zero_or_oversize() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 16], &[1, 1, 4, 4]);
        assert!(g.adaptive_avg_pool2d(x, 0, 2).is_err());
        assert!(g.adaptive_avg_pool2d(x, 5, 2).is_err());
    }

    #[test]
    fn upsample_identity_and_integer_factor() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let same = g.nearest_upsample(x, 2, 2).unwrap();
        assert_eq!(g.data(same), &[1.0, 2.0, 3.0, 4.0]);
        let up = g.nearest_upsample(x, 4, 4).unwrap();
        assert_eq!(
            g.data(up),
            &[
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }

    #[test]
    fn upsample_floor_index_map() {
        // 2x2 -> 3x3: rows/cols map to sources (0,0,1).
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = g.nearest_upsample(x, 3, 3).unwrap();
        assert_eq!(
            g.data(y),
            &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]
        );
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 1.0, 1.0, 1.0], &[4]);
        let y = g.softmax(x, 0).unwrap();
        for v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x2 = g.constant(vec![0.0, 3.0f64.ln()], &[2]);
        let y2 = g.softmax(x2, 0).unwrap();
        assert!((g.data(y2)[0] - 0.25).abs() < 1e-12);
        assert!((g.data(y2)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.3, -1.2, 2.0, 0.7], &[4]);
        let y = g.softmax(x, 0).unwrap();
        let xs = g.add_scalar(x, 123.456);
        let ys = g.softmax(xs, 0).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(3);
        let mut g = Graph::new();
        let x = g.constant((0..24).map(|_| rng.range(-5.0, 5.0)).collect(), &[2, 3, 4]);
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_axis(y, axis).unwrap();
            for v in g.data(s) {
                assert!((v - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, 4.0, 0.0, 5.0], &[2, 2]);
        let y = g.l2_normalize(x, 1, 1e-12).unwrap();
        let d = g.data(y);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        assert!((d[2] - 0.0).abs() < 1e-12 && (d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_lookup_and_vocab_error() {
        let mut g = Graph::new();
        let table = g.constant(vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1], &[3, 2]);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(e), &[2.0, 2.1, 0.0, 0.1, 2.0, 2.1]);
        assert!(matches!(
            g.embedding(table, &[3]),
            Err(CoreError::Input { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut g = Graph::new();
        let c = 5;
        let x = g.constant(vec![0.0; c * 4], &[1, c, 2, 2]);
        let (loss, n) = g.cross_entropy_spatial(x, &[0, 1, 2, 3], 255).unwrap();
        assert_eq!(n, 4);
        assert!((g.value(loss) - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_and_handles_empty() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0; 2 * 4], &[1, 2, 2, 2]);
        let (loss, n) = g.cross_entropy_spatial(x, &[255, 255, 255, 255], 255).unwrap();
        assert_eq!(n, 0);
        assert_eq!(g.value(loss), 0.0);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        // Hand-built 2x2, C=2 case.
        let mut g = Graph::new();
        let logits = vec![
            // channel 0 plane
            1.0, -0.5, 0.3, 2.0, // channel 1 plane
            0.0, 0.5, -0.2, 1.0,
        ];
        let targets = [0u32, 1, 0, 1];
        let x = g.constant(logits.clone(), &[1, 2, 2, 2]);
        let (loss, _) = g.cross_entropy_spatial(x, &targets, 255).unwrap();
        let mut expect = 0.0;
        for px in 0..4 {
            let (l0, l1) = (logits[px], logits[4 + px]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let lt = if targets[px] == 0 { l0 } else { l1 };
            expect += lse - lt;
        }
        expect /= 4.0;
        assert!((g.value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn upsample_then_pool_roundtrip_integer_factor() {
        let mut rng = crate::rng::Rng::new(9);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = g.constant(data.clone(), &[1, 2, 3, 3]);
        let up = g.nearest_upsample(x, 9, 9).unwrap();
        let back = g.adaptive_avg_pool2d(up, 3, 3).unwrap();
        for (a, b) in g.data(back).iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
