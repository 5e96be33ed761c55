//! Evaluation metrics: mean IoU over a streaming confusion accumulator,
//! scale-shift-aligned absolute relative depth error, angular accuracy,
//! top-1 accuracy, retrieval recall@k, and zero-shot classification.

use crate::error::{CoreError, Result};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Per-task metric outcome with optional per-class breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// (class id, value) for classes present in the evaluation.
    pub per_class: Vec<(usize, f64)>,
    pub sample_count: usize,
    pub config_digest: u64,
    pub seed: u64,
}

/// Streaming TP/FP/FN accumulation; merging shards in any order produces the
/// same totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub ignore_id: u32,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize, ignore_id: u32) -> Self {
        ConfusionAccumulator {
            num_classes,
            ignore_id,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) {
        debug_assert_eq!(pred.len(), gt.len());
        for (&p, &t) in pred.iter().zip(gt) {
            if t as u32 == self.ignore_id {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p == t {
                self.tp[t] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for c in 0..self.num_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// IoU per class; None for classes absent from both prediction and
    /// ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                if denom == 0 {
                    None
                } else {
                    Some(self.tp[c] as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean over present classes.
    pub fn mean_iou(&self) -> f64 {
        let per = self.per_class_iou();
        let present: Vec<f64> = per.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// One-shot mIoU: per-class IoU plus the mean over present classes.
pub fn miou(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    ignore_id: u32,
) -> (Vec<Option<f64>>, f64) {
    let mut acc = ConfusionAccumulator::new(num_classes, ignore_id);
    acc.update(pred, gt);
    (acc.per_class_iou(), acc.mean_iou())
}

/// Least-squares (scale, shift) aligning `pred` to `gt` over valid pixels,
/// with the degenerate fallback (0, mean(gt)) for constant predictions.
pub fn ssi_alignment(pred: &[f64], gt: &[f64], valid: Option<&[bool]>) -> (f64, f64) {
    let mut n = 0.0;
    let (mut sp, mut sg) = (0.0, 0.0);
    for i in 0..pred.len() {
        if valid.map(|v| v[i]).unwrap_or(true) {
            n += 1.0;
            sp += pred[i];
            sg += gt[i];
        }
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let (pbar, gbar) = (sp / n, sg / n);
    let (mut var, mut cov) = (0.0, 0.0);
    for i in 0..pred.len() {
        if valid.map(|v| v[i]).unwrap_or(true) {
            let pc = pred[i] - pbar;
            var += pc * pc;
            cov += pc * (gt[i] - gbar);
        }
    }
    if var < 1e-12 {
        (0.0, gbar)
    } else {
        let s = cov / var;
        (s, gbar - s * pbar)
    }
}

/// Absolute relative depth error for one image: align predicted disparity to
/// ground truth with the SSI solution, convert to depth `1/max(d, 1e-4)`,
/// and average `|d_pred - d_gt| / d_gt` over valid pixels.
pub fn abs_rel(pred_disp: &[f64], gt_disp: &[f64], valid: Option<&[bool]>) -> Result<f64> {
    if pred_disp.len() != gt_disp.len() {
        return Err(CoreError::BadArgument {
            op: "abs_rel",
            message: format!("length mismatch {} vs {}", pred_disp.len(), gt_disp.len()),
        });
    }
    let count = (0..pred_disp.len())
        .filter(|&i| valid.map(|v| v[i]).unwrap_or(true))
        .count();
    if count == 0 {
        return Err(CoreError::Metric {
            message: "abs_rel: no valid pixels".to_string(),
        });
    }
    let (s, t) = ssi_alignment(pred_disp, gt_disp, valid);
    let mut sum = 0.0;
    for i in 0..pred_disp.len() {
        if !valid.map(|v| v[i]).unwrap_or(true) {
            continue;
        }
        let dp = 1.0 / (s * pred_disp[i] + t).max(1e-4);
        let dg = 1.0 / gt_disp[i].max(1e-4);
        sum += (dp - dg).abs() / dg;
    }
    Ok(sum / count as f64)
}

/// Counts of pixels with angular error below the threshold; mergeable.
#[derive(Clone, Copy, Debug, Default)]
pub struct AngularCounts {
    pub below: u64,
    pub total: u64,
}

impl AngularCounts {
    pub fn merge(&mut self, other: AngularCounts) {
        self.below += other.below;
        self.total += other.total;
    }

    pub fn percentage(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(CoreError::Metric {
                message: "angular accuracy: no valid pixels".to_string(),
            });
        }
        Ok(100.0 * self.below as f64 / self.total as f64)
    }
}

/// Accumulate angular-error counts for channel-major `[3, px]` unit normals.
pub fn angular_counts(
    pred: &[f64],
    gt: &[f64],
    threshold_deg: f64,
    valid: Option<&[bool]>,
) -> AngularCounts {
    let px = pred.len() / 3;
    let threshold_rad = threshold_deg * crate::math::PI / 180.0;
    let mut counts = AngularCounts::default();
    for p in 0..px {
        if !valid.map(|v| v[p]).unwrap_or(true) {
            continue;
        }
        let dot: f64 = (0..3).map(|c| pred[c * px + p] * gt[c * px + p]).sum();
        let ang = crate::math::acos(dot.clamp(-1.0, 1.0));
        counts.total += 1;
        if ang < threshold_rad {
            counts.below += 1;
        }
    }
    counts
}

/// Percentage of valid pixels with angular error below `threshold_deg`.
pub fn angular_accuracy(
    pred: &[f64],
    gt: &[f64],
    threshold_deg: f64,
    valid: Option<&[bool]>,
) -> Result<f64> {
    angular_counts(pred, gt, threshold_deg, valid).percentage()
}

/// Top-1 accuracy (percent) of `[N, C]` logits; ties break to the lowest
/// class index.
pub fn top1(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 || logits.len() != n * num_classes {
        return Err(CoreError::BadArgument {
            op: "top1",
            message: format!(
                "{} logits for {} labels x {} classes",
                logits.len(),
                n,
                num_classes
            ),
        });
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Recall percentages, one per requested k, for both retrieval directions.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// image query -> ranked texts
    pub text_retrieval: Vec<f64>,
    /// text query -> ranked images
    pub image_retrieval: Vec<f64>,
}

/// Recall@k by cosine similarity over matched `[N, d]` embedding rows (row i
/// of each side is the true pair). Ties rank the lower index first.
pub fn recall_at_k(
    image_embs: &[f64],
    text_embs: &[f64],
    n: usize,
    d: usize,
    ks: &[usize],
) -> Result<RecallReport> {
    if image_embs.len() != n * d || text_embs.len() != n * d {
        return Err(CoreError::BadArgument {
            op: "recall_at_k",
            message: "embedding buffers do not match n x d".to_string(),
        });
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(CoreError::BadArgument {
            op: "recall_at_k",
            message: format!("k = {bad} out of range 1..={n}"),
        });
    }
    // rank[q] = position of the true match among candidates for query q
    let rank_of_match = |queries: &[f64], candidates: &[f64]| -> Vec<usize> {
        (0..n)
            .map(|q| {
                let qv = &queries[q * d..(q + 1) * d];
                let sim = |j: usize| -> f64 {
                    candidates[j * d..(j + 1) * d]
                        .iter()
                        .zip(qv)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let s_true = sim(q);
                let mut better = 0usize;
                for j in 0..n {
                    if j == q {
                        continue;
                    }
                    let s = sim(j);
                    if s > s_true || (s == s_true && j < q) {
                        better += 1;
                    }
                }
                better
            })
            .collect()
    };
    let img_to_txt = rank_of_match(image_embs, text_embs);
    let txt_to_img = rank_of_match(text_embs, image_embs);
    let recall = |ranks: &[usize], k: usize| {
        100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64
    };
    Ok(RecallReport {
        ks: ks.to_vec(),
        text_retrieval: ks.iter().map(|&k| recall(&img_to_txt, k)).collect(),
        image_retrieval: ks.iter().map(|&k| recall(&txt_to_img, k)).collect(),
    })
}

/// Classify each image embedding by maximum cosine against class text
/// embeddings; ties break to the lowest class index.
pub fn zero_shot_classify(
    image_embs: &[f64],
    class_embs: &[f64],
    n: usize,
    num_classes: usize,
    d: usize,
) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let iv = &image_embs[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for c in 0..num_classes {
                let sim: f64 = class_embs[c * d..(c + 1) * d]
                    .iter()
                    .zip(iv)
                    .map(|(a, b)| a * b)
                    .sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Aligned per-class differences `b - a`. The reports must cover identical
/// class sets.
pub fn classwise_delta(a: &MetricReport, b: &MetricReport) -> Result<Vec<(usize, f64)>> {
    let ca: Vec<usize> = a.per_class.iter().map(|(c, _)| *c).collect();
    let cb: Vec<usize> = b.per_class.iter().map(|(c, _)| *c).collect();
    if ca != cb {
        return Err(CoreError::Report {
            message: format!("class sets differ: {ca:?} vs {cb:?}"),
        });
    }
    Ok(a.per_class
        .iter()
        .zip(&b.per_class)
        .map(|((c, va), (_, vb))| (*c, vb - va))
        .collect())
}
