//! Training and probing objectives: symmetric contrastive loss, per-task
//! dense losses on pseudo-labels, their weighted combination, and the
//! scale-shift-invariant / angular probing losses.
//!
//! All losses are built as graph ops so gradients flow through composition.
//! Each component is a mean; weights apply to means.

use crate::error::{CoreError, Result};
use crate::model::Task;
use crate::tensor::{Graph, TensorId};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Coefficients of the weighted multi-task sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_clip: f64,
    pub lambda_task: BTreeMap<Task, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        let mut lambda_task = BTreeMap::new();
        lambda_task.insert(Task::Segmentation, 0.1);
        lambda_task.insert(Task::Depth, 1.0);
        lambda_task.insert(Task::SurfaceNormal, 1.0);
        LossWeights {
            lambda_clip: 1.0,
            lambda_task,
        }
    }
}

impl LossWeights {
    /// Contrastive-only baseline: every task weight zero.
    pub fn clip_only() -> Self {
        LossWeights {
            lambda_clip: 1.0,
            lambda_task: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut any_positive = self.lambda_clip > 0.0;
        if self.lambda_clip < 0.0 {
            return Err(CoreError::Config {
                field: "lambda_clip".to_string(),
                message: format!("{} must be non-negative", self.lambda_clip),
            });
        }
        for (task, &l) in &self.lambda_task {
            if l < 0.0 {
                return Err(CoreError::Config {
                    field: format!("lambda_{}", task.as_str()),
                    message: format!("{l} must be non-negative"),
                });
            }
            any_positive |= l > 0.0;
        }
        if !any_positive {
            return Err(CoreError::Config {
                field: "loss weights".to_string(),
                message: "at least one weight must be positive".to_string(),
            });
        }
        Ok(())
    }

    pub fn task_weight(&self, task: Task) -> f64 {
        self.lambda_task.get(&task).copied().unwrap_or(0.0)
    }

    /// Tasks with strictly positive weight.
    pub fn active_tasks(&self) -> Vec<Task> {
        self.lambda_task
            .iter()
            .filter(|(_, &l)| l > 0.0)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Scalar values of one combined loss evaluation; component values are
/// pre-weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossReport {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.components
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.as_str())
            .or(if self.total.is_finite() {
                None
            } else {
                Some("total")
            })
    }
}

/// Symmetric InfoNCE over row-normalized embeddings: logits are
/// `exp(logit_scale) * (img . txt^T)`; the loss averages row-wise and
/// column-wise cross-entropy against diagonal targets.
pub fn clip_contrastive_loss(
    g: &mut Graph,
    image_embs: TensorId,
    text_embs: TensorId,
    logit_scale: TensorId,
) -> Result<TensorId> {
    let (si, st) = (g.shape(image_embs).to_vec(), g.shape(text_embs).to_vec());
    if si.len() != 2 || st.len() != 2 || si != st {
        return Err(CoreError::DimMismatch {
            op: "clip_contrastive_loss",
            lhs: si,
            rhs: st,
        });
    }
    let b = si[0];
    if b == 0 {
        return Err(CoreError::Input {
            message: "empty batch".to_string(),
        });
    }
    let scale = g.exp(logit_scale);
    let txt_t = g.transpose(text_embs)?;
    let sim = g.matmul(image_embs, txt_t)?;
    let logits = g.mul(sim, scale)?;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let diag = g.constant(eye, &[b, b]);
    let ls_rows = g.log_softmax(logits, 1)?;
    let ls_cols = g.log_softmax(logits, 0)?;
    let picked_r = g.mul(ls_rows, diag)?;
    let picked_c = g.mul(ls_cols, diag)?;
    let sum_r = g.sum_all(picked_r);
    let sum_c = g.sum_all(picked_c);
    let total = g.add(sum_r, sum_c)?;
    Ok(g.mul_scalar(total, -0.5 / b as f64))
}

/// Mean per-pixel cross-entropy over non-ignored pixels. Returns the loss and
/// whether every pixel was ignored (loss 0 in that case).
pub fn segmentation_ce(
    g: &mut Graph,
    logits: TensorId,
    mask: &[u32],
    ignore_id: u32,
) -> Result<(TensorId, bool)> {
    let (loss, count) = g.cross_entropy_spatial(logits, mask, ignore_id)?;
    Ok((loss, count == 0))
}

/// Mean absolute difference over all channels of valid pixels. `valid` is a
/// per-pixel map of length B*H*W (None means everything is valid).
pub fn l1_dense(
    g: &mut Graph,
    pred: TensorId,
    target: &[f64],
    valid: Option<&[bool]>,
) -> Result<(TensorId, bool)> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 {
        return Err(CoreError::BadShape {
            op: "l1_dense",
            shape: s,
            expected: "rank-4 [B,C,H,W]".to_string(),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if target.len() != b * c * h * w {
        return Err(CoreError::DimMismatch {
            op: "l1_dense",
            lhs: s,
            rhs: vec![target.len()],
        });
    }
    let hw = h * w;
    let valid_count = match valid {
        Some(v) => {
            if v.len() != b * hw {
                return Err(CoreError::BadArgument {
                    op: "l1_dense",
                    message: format!("valid map length {} != {}", v.len(), b * hw),
                });
            }
            v.iter().filter(|&&x| x).count()
        }
        None => b * hw,
    };
    if valid_count == 0 {
        return Ok((g.scalar(0.0), true));
    }
    let t = g.constant(target.to_vec(), &[b, c, h, w]);
    let diff = g.sub(pred, t)?;
    let ad = g.abs(diff);
    let masked = match valid {
        Some(v) => {
            let m: Vec<f64> = v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            let mc = g.constant(m, &[b, 1, h, w]);
            g.mul(ad, mc)?
        }
        None => ad,
    };
    let sum = g.sum_all(masked);
    Ok((g.mul_scalar(sum, 1.0 / (valid_count * c) as f64), false))
}

/// Weighted sum of pre-built loss components. Components must cover every
/// positively weighted term; zero-weight components are not consumed.
pub fn combined_loss(
    g: &mut Graph,
    clip: Option<TensorId>,
    task_components: &[(Task, TensorId)],
    weights: &LossWeights,
) -> Result<(TensorId, LossReport)> {
    weights.validate()?;
    let mut components = Vec::new();
    let mut total: Option<TensorId> = None;
    let mut add_term = |g: &mut Graph, id: TensorId, lambda: f64| -> Result<()> {
        let weighted = g.mul_scalar(id, lambda);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
        Ok(())
    };

    if weights.lambda_clip > 0.0 {
        let clip = clip.ok_or_else(|| CoreError::Config {
            field: "lambda_clip".to_string(),
            message: "positive weight but no contrastive component".to_string(),
        })?;
        components.push(("clip".to_string(), g.value(clip)));
        add_term(g, clip, weights.lambda_clip)?;
    }
    for (task, &lambda) in &weights.lambda_task {
        if lambda <= 0.0 {
            continue;
        }
        let id = task_components
            .iter()
            .find(|(t, _)| t == task)
            .map(|(_, id)| *id)
            .ok_or_else(|| CoreError::Config {
                field: format!("lambda_{}", task.as_str()),
                message: "positive weight but no loss component".to_string(),
            })?;
        components.push((task.as_str().to_string(), g.value(id)));
        add_term(g, id, lambda)?;
    }
    let total = total.expect("validate guarantees a positive weight");
    let report = LossReport {
        total: g.value(total),
        components,
    };
    Ok((total, report))
}

/// Scale-shift-invariant disparity loss: per image, fit (s, t) minimizing
/// sum((s*pred + t - gt)^2) over valid pixels in closed form, then take the
/// mean absolute aligned residual; the batch loss averages over images.
/// A prediction with (numerically) zero variance falls back to s = 0,
/// t = mean(gt).
pub fn ssi_probe_loss(
    g: &mut Graph,
    pred: TensorId,
    gt: &[f64],
    valid: Option<&[bool]>,
) -> Result<TensorId> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(CoreError::BadShape {
            op: "ssi_probe_loss",
            shape: s,
            expected: "rank-4 [B,1,H,W]".to_string(),
        });
    }
    let (b, hw) = (s[0], s[2] * s[3]);
    if gt.len() != b * hw {
        return Err(CoreError::DimMismatch {
            op: "ssi_probe_loss",
            lhs: s,
            rhs: vec![gt.len()],
        });
    }
    let flat = g.reshape(pred, &[b, hw])?;
    let mut per_image: Option<TensorId> = None;
    for bi in 0..b {
        let row = g.narrow(flat, 0, bi, 1)?; // [1, hw]
        let gt_row = &gt[bi * hw..(bi + 1) * hw];
        let mask: Vec<f64> = match valid {
            Some(v) => v[bi * hw..(bi + 1) * hw]
                .iter()
                .map(|&x| if x { 1.0 } else { 0.0 })
                .collect(),
            None => vec![1.0; hw],
        };
        let nv: f64 = mask.iter().sum();
        if nv < 1.0 {
            continue;
        }
        let gbar = gt_row.iter().zip(&mask).map(|(g, m)| g * m).sum::<f64>() / nv;

        let m = g.constant(mask.clone(), &[1, hw]);
        let gt_c = g.constant(gt_row.to_vec(), &[1, hw]);

        let pm = g.mul(row, m)?;
        let sum_p = g.sum_all(pm);
        let mean_p = g.mul_scalar(sum_p, 1.0 / nv);
        let centered = g.sub(row, mean_p)?;
        let cm = g.mul(centered, m)?;
        let c2 = g.mul(cm, centered)?;
        let var_sum = g.sum_all(c2);

        // gt centered on its valid mean, pre-masked (constant).
        let gc: Vec<f64> = gt_row
            .iter()
            .zip(&mask)
            .map(|(gv, mv)| (gv - gbar) * mv)
            .collect();
        let gc_c = g.constant(gc, &[1, hw]);
        let cov_t = g.mul(centered, gc_c)?;
        let cov = g.sum_all(cov_t);

        let (s_t, t_t) = if g.value(var_sum) < 1e-12 {
            (g.scalar(0.0), g.scalar(gbar))
        } else {
            let s_t = g.div(cov, var_sum)?;
            let sp = g.mul(s_t, mean_p)?;
            let gb = g.scalar(gbar);
            let t_t = g.sub(gb, sp)?;
            (s_t, t_t)
        };
        let scaled = g.mul(row, s_t)?;
        let aligned = g.add(scaled, t_t)?;
        let resid = g.sub(aligned, gt_c)?;
        let ar = g.abs(resid);
        let arm = g.mul(ar, m)?;
        let sum_r = g.sum_all(arm);
        let image_loss = g.mul_scalar(sum_r, 1.0 / nv);
        per_image = Some(match per_image {
            Some(acc) => g.add(acc, image_loss)?,
            None => image_loss,
        });
    }
    match per_image {
        Some(acc) => Ok(g.mul_scalar(acc, 1.0 / b as f64)),
        None => Ok(g.scalar(0.0)),
    }
}

/// Mean angular error in radians between unit prediction and unit ground
/// truth over valid pixels: `acos(clamp(<pred, gt>, -1, 1))`.
pub fn angular_probe_loss(
    g: &mut Graph,
    pred: TensorId,
    gt: &[f64],
    valid: Option<&[bool]>,
) -> Result<(TensorId, bool)> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(CoreError::BadShape {
            op: "angular_probe_loss",
            shape: s,
            expected: "rank-4 [B,3,H,W]".to_string(),
        });
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if gt.len() != b * 3 * h * w {
        return Err(CoreError::DimMismatch {
            op: "angular_probe_loss",
            lhs: s,
            rhs: vec![gt.len()],
        });
    }
    let hw = h * w;
    let valid_count = match valid {
        Some(v) => v.iter().filter(|&&x| x).count(),
        None => b * hw,
    };
    if valid_count == 0 {
        return Ok((g.scalar(0.0), true));
    }
    let gt_c = g.constant(gt.to_vec(), &[b, 3, h, w]);
    let prod = g.mul(pred, gt_c)?;
    let dot = g.sum_axis(prod, 1)?; // [B,H,W]
    let ang = g.acos_clamped(dot);
    let masked = match valid {
        Some(v) => {
            let m: Vec<f64> = v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            let mc = g.constant(m, &[b, h, w]);
            g.mul(ang, mc)?
        }
        None => ang,
    };
    let sum = g.sum_all(masked);
    Ok((g.mul_scalar(sum, 1.0 / valid_count as f64), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::rng::Rng;

    fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * d);
        for _ in 0..b {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / n));
        }
        out
    }

    fn clip_loss_value(img: Vec<f64>, txt: Vec<f64>, b: usize, d: usize, scale_ln: f64) -> f64 {
        let mut g = Graph::new();
        let i = g.constant(img, &[b, d]);
        let t = g.constant(txt, &[b, d]);
        let ls = g.constant(vec![scale_ln], &[1]);
        let loss = clip_contrastive_loss(&mut g, i, t, ls).unwrap();
        g.value(loss)
    }

    #[test]
    fn clip_single_pair_is_zero() {
        let v = clip_loss_value(vec![1.0, 0.0], vec![1.0, 0.0], 1, 2, 0.0);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn clip_identical_rows_is_ln_b() {
        let b = 5;
        let d = 4;
        let row = [0.5, 0.5, 0.5, 0.5];
        let all: Vec<f64> = (0..b).flat_map(|_| row).collect();
        let v = clip_loss_value(all.clone(), all, b, d, crate::model::LOGIT_SCALE_INIT);
        assert!((v - (b as f64).ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn clip_orthonormal_closed_form() {
        // loss = -ln(e^s / (e^s + B - 1)) with s = exp(logit_scale)
        let b = 4;
        let mut img = vec![0.0; b * b];
        for i in 0..b {
            img[i * b + i] = 1.0;
        }
        for &scale_ln in &[crate::model::LOGIT_SCALE_INIT, 0.7, 0.0] {
            let s = math::exp(scale_ln);
            let expect = -(math::exp(s) / (math::exp(s) + b as f64 - 1.0)).ln();
            let v = clip_loss_value(img.clone(), img.clone(), b, b, scale_ln);
            assert!((v - expect).abs() < 1e-6, "scale {scale_ln}: {v} vs {expect}");
        }
    }

    #[test]
    fn clip_invariant_under_joint_permutation() {
        let mut rng = Rng::new(4);
        let (b, d) = (6, 8);
        let img = unit_rows(&mut rng, b, d);
        let txt = unit_rows(&mut rng, b, d);
        let base = clip_loss_value(img.clone(), txt.clone(), b, d, 1.0);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pi: Vec<f64> = perm
            .iter()
            .flat_map(|&i| img[i * d..(i + 1) * d].to_vec())
            .collect();
        let pt: Vec<f64> = perm
            .iter()
            .flat_map(|&i| txt[i * d..(i + 1) * d].to_vec())
            .collect();
        let permuted = clip_loss_value(pi, pt, b, d, 1.0);
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn clip_random_embeddings_concentrate_near_ln_b() {
        // At unit scale, independent unit embeddings give near-uniform
        // logits, so each cross-entropy term sits near ln(B).
        let (b, d) = (64, 32);
        let mut sum = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = Rng::new(100 + seed);
            let img = unit_rows(&mut rng, b, d);
            let txt = unit_rows(&mut rng, b, d);
            sum += clip_loss_value(img, txt, b, d, 0.0);
        }
        let mean = sum / seeds as f64;
        let lnb = (b as f64).ln();
        assert!((mean - lnb).abs() < 0.15 * lnb, "mean {mean} vs ln(B) {lnb}");
    }

    #[test]
    fn clip_rejects_empty_batch() {
        let mut g = Graph::new();
        let i = g.constant(vec![], &[0, 4]);
        let t = g.constant(vec![], &[0, 4]);
        let ls = g.constant(vec![0.0], &[1]);
        assert!(matches!(
            clip_contrastive_loss(&mut g, i, t, ls),
            Err(CoreError::Input { .. })
        ));
    }

    #[test]
    fn l1_shift_is_exact() {
        let mut g = Graph::new();
        let target: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.1).collect();
        let shifted: Vec<f64> = target.iter().map(|v| v + 0.5).collect();
        let p = g.constant(shifted, &[1, 2, 3, 4]);
        let (loss, warned) = l1_dense(&mut g, p, &target, None).unwrap();
        assert!(!warned);
        assert!((g.value(loss) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        let mut rng = Rng::new(12);
        let (b, c, h, w) = (2, 3, 3, 3);
        let n = b * c * h * w;
        let pred: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
        let valid: Vec<bool> = (0..b * h * w).map(|_| rng.uniform() < 0.8).collect();
        let mut g = Graph::new();
        let p = g.constant(pred.clone(), &[b, c, h, w]);
        let (loss, _) = l1_dense(&mut g, p, &target, Some(&valid)).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for bi in 0..b {
            for px in 0..h * w {
                if !valid[bi * h * w + px] {
                    continue;
                }
                count += 1;
                for ci in 0..c {
                    let idx = (bi * c + ci) * h * w + px;
                    sum += (pred[idx] - target[idx]).abs();
                }
            }
        }
        let expect = sum / (count * c) as f64;
        assert!((g.value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn l1_empty_valid_warns() {
        let mut g = Graph::new();
        let p = g.constant(vec![1.0; 4], &[1, 1, 2, 2]);
        let valid = vec![false; 4];
        let (loss, warned) = l1_dense(&mut g, p, &[0.0; 4], Some(&valid)).unwrap();
        assert!(warned);
        assert_eq!(g.value(loss), 0.0);
    }

    #[test]
    fn combined_matches_reference_arithmetic() {
        // weights (1.0, seg 0.1, depth 1.0, sn 1.0) on components
        // (2.0, 1.0, 0.5, 0.5) -> 3.1
        let mut g = Graph::new();
        let clip = g.scalar(2.0);
        let seg = g.scalar(1.0);
        let dep = g.scalar(0.5);
        let sn = g.scalar(0.5);
        let weights = LossWeights::default();
        let (total, report) = combined_loss(
            &mut g,
            Some(clip),
            &[
                (Task::Segmentation, seg),
                (Task::Depth, dep),
                (Task::SurfaceNormal, sn),
            ],
            &weights,
        )
        .unwrap();
        assert!((g.value(total) - 3.1).abs() < 1e-12);
        assert_eq!(report.component("clip"), Some(2.0));
        assert_eq!(report.component("segmentation"), Some(1.0));
        let recon: f64 = weights.lambda_clip * 2.0
            + weights.task_weight(Task::Segmentation) * 1.0
            + weights.task_weight(Task::Depth) * 0.5
            + weights.task_weight(Task::SurfaceNormal) * 0.5;
        assert!((report.total - recon).abs() < 1e-9);
    }

    #[test]
    fn combined_zero_task_weights_reduces_to_clip() {
        let mut g = Graph::new();
        let clip = g.scalar(1.7);
        let (total, report) =
            combined_loss(&mut g, Some(clip), &[], &LossWeights::clip_only()).unwrap();
        assert!((g.value(total) - 1.7).abs() < 1e-12);
        assert_eq!(report.components.len(), 1);
    }

    #[test]
    fn combined_scales_linearly() {
        let make = |mult: f64| {
            let mut weights = LossWeights::default();
            weights.lambda_clip *= mult;
            for v in weights.lambda_task.values_mut() {
                *v *= mult;
            }
            let mut g = Graph::new();
            let clip = g.scalar(2.0);
            let seg = g.scalar(1.0);
            let dep = g.scalar(0.5);
            let sn = g.scalar(0.5);
            let (total, _) = combined_loss(
                &mut g,
                Some(clip),
                &[
                    (Task::Segmentation, seg),
                    (Task::Depth, dep),
                    (Task::SurfaceNormal, sn),
                ],
                &weights,
            )
            .unwrap();
            g.value(total)
        };
        assert!((make(2.0) - 2.0 * make(1.0)).abs() < 1e-12);
    }

    #[test]
    fn combined_missing_component_is_config_error() {
        let mut g = Graph::new();
        let clip = g.scalar(1.0);
        let weights = LossWeights::default();
        assert!(matches!(
            combined_loss(&mut g, Some(clip), &[], &weights),
            Err(CoreError::Config { .. })
        ));
    }

    fn ssi_value(pred: Vec<f64>, gt: &[f64], b: usize, hw: (usize, usize)) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(pred, &[b, 1, hw.0, hw.1]);
        let loss = ssi_probe_loss(&mut g, p, gt, None).unwrap();
        g.value(loss)
    }

    #[test]
    fn ssi_affine_predictions_have_zero_loss() {
        let mut rng = Rng::new(5);
        let gt: Vec<f64> = (0..32).map(|_| rng.range(0.1, 0.9)).collect();
        let same = ssi_value(gt.clone(), &gt, 2, (4, 4));
        assert!(same.abs() < 1e-9, "pred = gt: {same}");
        let affine: Vec<f64> = gt.iter().map(|v| 2.5 * v + 0.3).collect();
        assert!(ssi_value(affine, &gt, 2, (4, 4)).abs() < 1e-9);
        let negated: Vec<f64> = gt.iter().map(|v| -v).collect();
        assert!(ssi_value(negated, &gt, 2, (4, 4)).abs() < 1e-9, "pred = -gt");
    }

    #[test]
    fn ssi_affine_invariance_of_prediction() {
        let mut rng = Rng::new(6);
        let gt: Vec<f64> = (0..16).map(|_| rng.range(0.1, 0.9)).collect();
        let pred: Vec<f64> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
        let base = ssi_value(pred.clone(), &gt, 1, (4, 4));
        for &(a, b) in &[(2.0, 0.5), (-3.0, 1.0), (0.1, -4.0)] {
            let warped: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
            let w = ssi_value(warped, &gt, 1, (4, 4));
            assert!((base - w).abs() < 1e-7, "a={a} b={b}: {base} vs {w}");
        }
    }

    #[test]
    fn ssi_constant_prediction_falls_back() {
        let gt: Vec<f64> = (0..16).map(|i| 0.1 + 0.05 * i as f64).collect();
        let pred = vec![0.4; 16];
        let v = ssi_value(pred, &gt, 1, (4, 4));
        // fallback s=0, t=mean(gt): loss = mean |mean(gt) - gt|
        let mean: f64 = gt.iter().sum::<f64>() / 16.0;
        let expect: f64 = gt.iter().map(|g| (mean - g).abs()).sum::<f64>() / 16.0;
        assert!((v - expect).abs() < 1e-9);
    }

    #[test]
    fn ssi_respects_valid_mask() {
        let mut rng = Rng::new(7);
        let gt: Vec<f64> = (0..16).map(|_| rng.range(0.1, 0.9)).collect();
        let mut pred = gt.clone();
        let valid: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        for (i, p) in pred.iter_mut().enumerate() {
            if !valid[i] {
                *p = rng.range(-5.0, 5.0);
            }
        }
        let mut g = Graph::new();
        let p = g.constant(pred, &[1, 1, 4, 4]);
        let loss = ssi_probe_loss(&mut g, p, &gt, Some(&valid)).unwrap();
        assert!(g.value(loss).abs() < 1e-9);
    }

    #[test]
    fn ssi_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let gt: Vec<f64> = (0..18).map(|_| rng.range(0.1, 0.9)).collect();
        let pred: Vec<f64> = (0..18).map(|_| rng.range(0.0, 1.0)).collect();
        let eval = |data: &[f64]| {
            let mut g = Graph::new();
            let p = g.constant(data.to_vec(), &[2, 1, 3, 3]);
            let loss = ssi_probe_loss(&mut g, p, &gt, None).unwrap();
            g.value(loss)
        };
        let mut g = Graph::new();
        let p = g.leaf(pred.clone(), &[2, 1, 3, 3], true);
        let loss = ssi_probe_loss(&mut g, p, &gt, None).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(p).unwrap().to_vec();
        for i in 0..pred.len() {
            let mut d = pred.clone();
            d[i] += 1e-5;
            let fp = eval(&d);
            d[i] -= 2e-5;
            let fm = eval(&d);
            let fd = (fp - fm) / 2e-5;
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-4,
                "coord {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    fn angular_value(pred: Vec<f64>, gt: &[f64], b: usize, hw: (usize, usize)) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(pred, &[b, 3, hw.0, hw.1]);
        let (loss, _) = angular_probe_loss(&mut g, p, gt, None).unwrap();
        g.value(loss)
    }

    #[test]
    fn angular_exact_cases() {
        let px = 4;
        let mut gt = vec![0.0; 3 * px];
        for p in 0..px {
            gt[2 * px + p] = 1.0;
        }
        assert!(angular_value(gt.clone(), &gt, 1, (2, 2)).abs() < 1e-12);
        let neg: Vec<f64> = gt.iter().map(|v| -v).collect();
        let pi = core::f64::consts::PI;
        assert!((angular_value(neg, &gt, 1, (2, 2)) - pi).abs() < 1e-6);
        // 30-degree rotation everywhere
        let ang = 30f64.to_radians();
        let mut rot = vec![0.0; 3 * px];
        for p in 0..px {
            rot[px + p] = ang.sin();
            rot[2 * px + p] = ang.cos();
        }
        let v = angular_value(rot, &gt, 1, (2, 2));
        assert!((v - pi / 6.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn angular_invariant_under_common_rotation() {
        let mut rng = Rng::new(10);
        let px = 9;
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..px {
            gt.push(rng.unit_vector3());
            pred.push(rng.unit_vector3());
        }
        let pack = |vecs: &[[f64; 3]]| {
            let mut out = vec![0.0; 3 * px];
            for (i, v) in vecs.iter().enumerate() {
                out[i] = v[0];
                out[px + i] = v[1];
                out[2 * px + i] = v[2];
            }
            out
        };
        let rot_z = |v: &[f64; 3], a: f64| {
            [
                v[0] * a.cos() - v[1] * a.sin(),
                v[0] * a.sin() + v[1] * a.cos(),
                v[2],
            ]
        };
        let base = angular_value(pack(&pred), &pack(&gt), 1, (3, 3));
        let a = 0.83;
        let rp: Vec<[f64; 3]> = pred.iter().map(|v| rot_z(v, a)).collect();
        let rg: Vec<[f64; 3]> = gt.iter().map(|v| rot_z(v, a)).collect();
        let rotated = angular_value(pack(&rp), &pack(&rg), 1, (3, 3));
        assert!((base - rotated).abs() < 1e-9);
    }

    #[test]
    fn angular_empty_valid_warns() {
        let mut g = Graph::new();
        let p = g.constant(vec![0.0; 12], &[1, 3, 2, 2]);
        let (loss, warned) =
            angular_probe_loss(&mut g, p, &vec![0.0; 12], Some(&[false; 4])).unwrap();
        assert!(warned);
        assert_eq!(g.value(loss), 0.0);
    }
}
