//! Forward passes for the encoders, the shared multi-scale module, and the
//! task heads. All functions build onto a caller-supplied graph so one tape
//! can hold the whole training step.

use super::{ModelConfig, Mounted, Task};
use crate::error::{CoreError, Result};
use crate::tensor::{Graph, TensorId};
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

fn linear(
    g: &mut Graph,
    m: &Mounted,
    x: TensorId, // [N, in]
    name: &str,
) -> Result<TensorId> {
    let w = m.id(&format!("{name}.weight"));
    let b = m.id(&format!("{name}.bias"));
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Pre-norm transformer block over `[B,T,D]`.
pub fn transformer_block(
    g: &mut Graph,
    m: &Mounted,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let shape = g.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.num_heads();
    let dh = d / heads;

    // Attention (fused QKV projection, then per-head batched products)
    let ln1 = g.layer_norm(
        x,
        m.id(&format!("{prefix}.ln1.gamma")),
        m.id(&format!("{prefix}.ln1.beta")),
        1e-5,
    )?;
    let flat = g.reshape(ln1, &[b * t, d])?;
    let qkv = linear(g, m, flat, &format!("{prefix}.attn.qkv"))?; // [B*T, 3D]
    let to_heads = |g: &mut Graph, y: TensorId| -> Result<TensorId> {
        if heads == 1 {
            return g.reshape(y, &[b, t, dh]);
        }
        let s = g.reshape(y, &[b, t, heads, dh])?;
        let p = g.permute(s, &[0, 2, 1, 3])?;
        g.reshape(p, &[b * heads, t, dh])
    };
    let q0 = g.narrow(qkv, 1, 0, d)?;
    let k0 = g.narrow(qkv, 1, d, d)?;
    let v0 = g.narrow(qkv, 1, 2 * d, d)?;
    let q = to_heads(g, q0)?;
    let k = to_heads(g, k0)?;
    let v = to_heads(g, v0)?;
    let attended = g.scaled_dot_attention(q, k, v)?;
    let merged = if heads == 1 {
        g.reshape(attended, &[b * t, d])?
    } else {
        let m0 = g.reshape(attended, &[b, heads, t, dh])?;
        let m1 = g.permute(m0, &[0, 2, 1, 3])?;
        g.reshape(m1, &[b * t, d])?
    };
    let projected = linear(g, m, merged, &format!("{prefix}.attn.proj"))?;
    let proj3 = g.reshape(projected, &[b, t, d])?;
    let x = g.add(x, proj3)?;

    // MLP
    let ln2 = g.layer_norm(
        x,
        m.id(&format!("{prefix}.ln2.gamma")),
        m.id(&format!("{prefix}.ln2.beta")),
        1e-5,
    )?;
    let flat2 = g.reshape(ln2, &[b * t, d])?;
    let h1 = linear(g, m, flat2, &format!("{prefix}.mlp.fc1"))?;
    let h1a = g.gelu(h1);
    let h2 = linear(g, m, h1a, &format!("{prefix}.mlp.fc2"))?;
    let h3 = g.reshape(h2, &[b, t, d])?;
    g.add(x, h3)
}

/// Encode a batch of RGB images. Returns the row-normalized shared-space
/// embedding `[B, shared_dim]` and the pre-projection spatial feature map
/// `[B, embed_dim, grid, grid]`.
pub fn encode_image(
    g: &mut Graph,
    m: &Mounted,
    cfg: &ModelConfig,
    images: TensorId,
) -> Result<(TensorId, TensorId)> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(CoreError::BadShape {
            op: "encode_image",
            shape: s,
            expected: format!("[B,3,{0},{0}]", cfg.image_size),
        });
    }
    let batch = s[0];
    let d = cfg.embed_dim;
    let grid = cfg.feature_grid();
    let t = grid * grid;

    let (features, pooled) = match cfg.encoder {
        super::EncoderKind::VitTiny => {
            let patches = g.conv2d(
                images,
                m.id("img.patch_embed.weight"),
                Some(m.id("img.patch_embed.bias")),
                cfg.patch_size,
                0,
            )?; // [B, D, grid, grid]
            let seq0 = g.reshape(patches, &[batch, d, t])?;
            let seq1 = g.permute(seq0, &[0, 2, 1])?; // [B, T, D]
            let mut x = g.add(seq1, m.id("img.pos_embed"))?;
            for i in 0..cfg.depth {
                x = transformer_block(g, m, cfg, &format!("img.block{i}"), x)?;
            }
            let normed = g.layer_norm(
                x,
                m.id("img.ln_final.gamma"),
                m.id("img.ln_final.beta"),
                1e-5,
            )?;
            let fmap0 = g.permute(normed, &[0, 2, 1])?;
            let features = g.reshape(fmap0, &[batch, d, grid, grid])?;
            let summed = g.sum_axis(normed, 1)?; // [B, D]
            let pooled = g.mul_scalar(summed, 1.0 / t as f64);
            (features, pooled)
        }
        super::EncoderKind::CnnTiny => {
            let mut x = images;
            for i in 0..3 {
                let c = g.conv2d(
                    x,
                    m.id(&format!("img.down{i}.weight")),
                    Some(m.id(&format!("img.down{i}.bias"))),
                    2,
                    1,
                )?;
                x = g.gelu(c);
            }
            for i in 0..cfg.depth {
                let c = g.conv2d(
                    x,
                    m.id(&format!("img.refine{i}.weight")),
                    Some(m.id(&format!("img.refine{i}.bias"))),
                    1,
                    1,
                )?;
                let a = g.gelu(c);
                x = g.add(x, a)?;
            }
            let global = g.adaptive_avg_pool2d(x, 1, 1)?;
            let pooled = g.reshape(global, &[batch, d])?;
            (x, pooled)
        }
    };

    let projected = g.matmul(pooled, m.id("img.proj.weight"))?;
    let embedding = g.l2_normalize(projected, 1, 1e-12)?;
    Ok((embedding, features))
}

/// Encode tokenized captions. Sequences must be padded/truncated to the
/// configured context length; pooling takes the representation at the first
/// end-of-sequence token (falling back to the last position).
pub fn encode_text(
    g: &mut Graph,
    m: &Mounted,
    cfg: &ModelConfig,
    tokens: &[Vec<u32>],
) -> Result<TensorId> {
    let batch = tokens.len();
    if batch == 0 {
        return Err(CoreError::Input {
            message: "empty token batch".to_string(),
        });
    }
    let t = cfg.text_context_length;
    let mut flat = Vec::with_capacity(batch * t);
    let mut eos_pos = Vec::with_capacity(batch);
    for seq in tokens {
        if seq.len() != t {
            return Err(CoreError::Input {
                message: format!("token sequence length {} != context {t}", seq.len()),
            });
        }
        let pos = seq
            .iter()
            .position(|&id| id == super::EOS_ID)
            .unwrap_or(t - 1);
        eos_pos.push(pos);
        flat.extend_from_slice(seq);
    }
    let emb = g.embedding(m.id("txt.tok_embed"), &flat)?; // [B*T, D]
    let d = cfg.embed_dim;
    let seq = g.reshape(emb, &[batch, t, d])?;
    let mut x = g.add(seq, m.id("txt.pos_embed"))?;
    for i in 0..cfg.depth {
        x = transformer_block(g, m, cfg, &format!("txt.block{i}"), x)?;
    }
    let normed = g.layer_norm(
        x,
        m.id("txt.ln_final.gamma"),
        m.id("txt.ln_final.beta"),
        1e-5,
    )?;
    let picked = g.select_rows(normed, &eos_pos)?;
    let projected = g.matmul(picked, m.id("txt.proj.weight"))?;
    g.l2_normalize(projected, 1, 1e-12)
}

/// Shared multi-scale module: pyramid pooling branches concatenated with the
/// input map and fused back to `embed_dim` channels.
pub fn psp_forward(
    g: &mut Graph,
    m: &Mounted,
    cfg: &ModelConfig,
    features: TensorId,
) -> Result<TensorId> {
    let s = g.shape(features).to_vec();
    let (h, w) = (s[2], s[3]);
    let mut parts = vec![features];
    for (i, &bin) in cfg.psp_bin_sizes.iter().enumerate() {
        let pooled = g.adaptive_avg_pool2d(features, bin, bin)?;
        let conv = g.conv2d(
            pooled,
            m.id(&format!("psp.branch{i}.weight")),
            Some(m.id(&format!("psp.branch{i}.bias"))),
            1,
            0,
        )?;
        let act = g.gelu(conv);
        let up = g.nearest_upsample(act, h, w)?;
        parts.push(up);
    }
    let stacked = g.concat(&parts, 1)?;
    let fused = g.conv2d(
        stacked,
        m.id("psp.fuse.weight"),
        Some(m.id("psp.fuse.bias")),
        1,
        0,
    )?;
    Ok(g.gelu(fused))
}

/// Task head: pointwise convolution(s) on the fused map, nearest-upsampled to
/// the requested output size. Surface-normal outputs are unit-normalized per
/// pixel.
pub fn task_head_forward(
    g: &mut Graph,
    m: &Mounted,
    cfg: &ModelConfig,
    task: Task,
    fused: TensorId,
    out_h: usize,
    out_w: usize,
) -> Result<TensorId> {
    if !cfg.tasks.contains(&task) {
        return Err(CoreError::Usage {
            message: format!("task {} not enabled in this model", task.as_str()),
        });
    }
    let tag = task.as_str();
    let mut x = fused;
    if cfg.head_layers == 1 {
        x = g.conv2d(
            x,
            m.id(&format!("head.{tag}.conv0.weight")),
            Some(m.id(&format!("head.{tag}.conv0.bias"))),
            1,
            0,
        )?;
    } else {
        for i in 0..2 {
            let c = g.conv2d(
                x,
                m.id(&format!("head.{tag}.conv{i}.weight")),
                Some(m.id(&format!("head.{tag}.conv{i}.bias"))),
                1,
                1,
            )?;
            x = g.relu(c);
        }
        x = g.conv2d(
            x,
            m.id(&format!("head.{tag}.conv2.weight")),
            Some(m.id(&format!("head.{tag}.conv2.bias"))),
            1,
            0,
        )?;
    }
    if task == Task::SurfaceNormal {
        x = g.l2_normalize(x, 1, 1e-8)?;
    }
    g.nearest_upsample(x, out_h, out_w)
}
