//! Pretraining driver: contrastive loss on image-caption pairs plus weighted
//! dense losses against pseudo-labels, optimized with AdamW under a warmup
//! schedule.

use super::optimizer::{AdamW, AdamWConfig};
use super::schedule::Schedule;
use crate::error::{CoreError, Result};
use crate::loss::{
    clip_contrastive_loss, combined_loss, l1_dense, segmentation_ce, LossReport, LossWeights,
};
use crate::model::{
    encode_image, encode_text, psp_forward, task_head_forward, build_model, ModelBundle,
    ModelConfig, Task,
};
use crate::rng::Rng;
use crate::synth::{PseudoLabelSet, Sample, Vocab};
use crate::tensor::Graph;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// One pretraining example: image, caption tokens, and the pseudo-labels for
/// every task the shard carries.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub image: Vec<u8>,
    pub tokens: Vec<u32>,
    pub ps_mask: Vec<u8>,
    pub ps_disparity: Vec<f32>,
    pub ps_normals: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub image_size: usize,
    pub samples: Vec<PretrainSample>,
    /// Tasks whose pseudo-labels are actually present.
    pub tasks_present: Vec<Task>,
}

impl PretrainData {
    pub fn from_samples(
        pairs: &[(Sample, PseudoLabelSet)],
        context_length: usize,
    ) -> PretrainData {
        let vocab = Vocab::grammar();
        let image_size = pairs.first().map(|(s, _)| s.image_size).unwrap_or(0);
        let samples = pairs
            .iter()
            .map(|(s, ps)| PretrainSample {
                image: s.image.clone(),
                tokens: crate::synth::tokenize(&s.caption, &vocab, context_length),
                ps_mask: ps.mask.clone(),
                ps_disparity: ps.disparity.clone(),
                ps_normals: ps.normals.clone(),
            })
            .collect();
        PretrainData {
            image_size,
            samples,
            tasks_present: Task::ALL.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            schedule: Schedule::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_components: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct PretrainRun {
    pub bundle: ModelBundle,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Owned f64 views of one batch.
pub(crate) struct Batch {
    pub images: Vec<f64>,
    pub tokens: Vec<Vec<u32>>,
    pub seg_targets: Vec<u32>,
    pub disparity: Vec<f64>,
    pub normals: Vec<f64>,
    pub size: usize,
}

pub(crate) fn assemble_batch(data: &PretrainData, indices: &[usize]) -> Batch {
    let s = data.image_size;
    let px = s * s;
    let b = indices.len();
    let mut images = Vec::with_capacity(b * 3 * px);
    let mut tokens = Vec::with_capacity(b);
    let mut seg_targets = Vec::with_capacity(b * px);
    let mut disparity = Vec::with_capacity(b * px);
    let mut normals = Vec::with_capacity(b * 3 * px);
    for &i in indices {
        let smp = &data.samples[i];
        images.extend(smp.image.iter().map(|&v| v as f64 / 255.0));
        tokens.push(smp.tokens.clone());
        seg_targets.extend(smp.ps_mask.iter().map(|&v| v as u32));
        disparity.extend(smp.ps_disparity.iter().map(|&v| v as f64));
        normals.extend(smp.ps_normals.iter().map(|&v| v as f64));
    }
    Batch {
        images,
        tokens,
        seg_targets,
        disparity,
        normals,
        size: b,
    }
}

/// One optimization step on a batch: forward, combined loss, backward, AdamW
/// update, logit-scale clamp. Aborts with a diagnostic naming the first
/// non-finite component.
pub(crate) fn pretrain_step(
    bundle: &mut ModelBundle,
    optimizer: &mut AdamW,
    batch: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<LossReport> {
    let cfg = bundle.config.clone();
    let s = cfg.image_size;
    let b = batch.size;
    let mut g = Graph::new();
    let mounted = bundle.mount(&mut g, true);
    let images = g.constant(batch.images.clone(), &[b, 3, s, s]);

    let (img_emb, features) = encode_image(&mut g, &mounted, &cfg, images)?;
    let clip = if weights.lambda_clip > 0.0 {
        let txt_emb = encode_text(&mut g, &mounted, &cfg, &batch.tokens)?;
        Some(clip_contrastive_loss(
            &mut g,
            img_emb,
            txt_emb,
            mounted.id("logit_scale"),
        )?)
    } else {
        None
    };

    let active = weights.active_tasks();
    let mut task_components = Vec::new();
    if !active.is_empty() {
        let fused = psp_forward(&mut g, &mounted, &cfg, features)?;
        for task in active {
            let pred = task_head_forward(&mut g, &mounted, &cfg, task, fused, s, s)?;
            let component = match task {
                Task::Segmentation => {
                    let (l, _) = segmentation_ce(&mut g, pred, &batch.seg_targets, u32::MAX)?;
                    l
                }
                Task::Depth => {
                    let (l, _) = l1_dense(&mut g, pred, &batch.disparity, None)?;
                    l
                }
                Task::SurfaceNormal => {
                    let (l, _) = l1_dense(&mut g, pred, &batch.normals, None)?;
                    l
                }
            };
            task_components.push((task, component));
        }
    }

    let (total, report) = combined_loss(&mut g, clip, &task_components, weights)?;
    if let Some(component) = report.first_non_finite() {
        return Err(CoreError::NonFinite {
            component: component.to_string(),
        });
    }
    g.backward(total)?;

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, id) in mounted.iter() {
        if let Some(grad) = g.grad(*id) {
            grads.insert(name.clone(), grad.to_vec());
        }
    }
    optimizer.step(lr, &mut bundle.params, &grads);
    bundle.clamp_logit_scale();
    bundle.step += 1;
    Ok(report)
}

/// Full pretraining: `epochs * ceil(N / batch)` steps over seed-shuffled
/// batches, returning the trained model plus per-step and per-epoch records.
pub fn run_pretraining(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PretrainData,
) -> Result<PretrainRun> {
    train_cfg.weights.validate()?;
    train_cfg.schedule.validate()?;
    if data.is_empty() {
        return Err(CoreError::Input {
            message: "empty pretraining dataset".to_string(),
        });
    }
    if data.image_size != model_cfg.image_size {
        return Err(CoreError::Config {
            field: "image_size".to_string(),
            message: format!(
                "dataset {} does not match model {}",
                data.image_size, model_cfg.image_size
            ),
        });
    }
    for task in train_cfg.weights.active_tasks() {
        if !model_cfg.tasks.contains(&task) {
            return Err(CoreError::Config {
                field: format!("lambda_{}", task.as_str()),
                message: "weighted task not in the model's task roster".to_string(),
            });
        }
        if !data.tasks_present.contains(&task) {
            return Err(CoreError::Config {
                field: format!("lambda_{}", task.as_str()),
                message: "weighted task has no pseudo-labels in the dataset".to_string(),
            });
        }
    }

    let mut bundle = build_model(model_cfg, train_cfg.seed)?;
    let mut optimizer = AdamW::new(train_cfg.optimizer);
    let n = data.len();
    let bs = train_cfg.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = train_cfg.epochs * steps_per_epoch;
    let mut schedule = train_cfg.schedule.clone();
    schedule.steps_per_epoch = steps_per_epoch;

    let mut order_rng = Rng::derive(train_cfg.seed, "batch-order");
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let order = order_rng.permutation(n);
        let mut epoch_total = 0.0;
        let mut epoch_components: BTreeMap<String, f64> = BTreeMap::new();
        let mut last_lr = 0.0;
        for chunk in order.chunks(bs) {
            let lr = schedule.lr_at_step(global_step, total_steps)?;
            let batch = assemble_batch(data, chunk);
            let report = pretrain_step(&mut bundle, &mut optimizer, &batch, &train_cfg.weights, lr)?;
            epoch_total += report.total;
            for (name, v) in &report.components {
                *epoch_components.entry(name.clone()).or_insert(0.0) += v;
            }
            steps.push(StepRecord {
                step: global_step,
                lr,
                report,
            });
            last_lr = lr;
            global_step += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            lr: last_lr,
            mean_total: epoch_total / steps_per_epoch as f64,
            mean_components: epoch_components
                .into_iter()
                .map(|(k, v)| (k, v / steps_per_epoch as f64))
                .collect(),
        });
    }

    Ok(PretrainRun {
        bundle,
        steps,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderKind;
    use crate::synth::{generate_sample, make_pseudo_labels, GenConfig, OracleConfig};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderKind::VitTiny,
            image_size: 16,
            patch_size: 8,
            embed_dim: 32,
            depth: 1,
            shared_dim: 16,
            psp_bin_sizes: alloc::vec![1, 2],
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_data(count: usize, image_size: usize) -> PretrainData {
        let gen = GenConfig {
            image_size,
            ..GenConfig::default()
        };
        let oracle = OracleConfig {
            seed: 7,
            ..OracleConfig::default()
        };
        let pairs: Vec<_> = (0..count)
            .map(|i| {
                let s = generate_sample(&gen, 1000 + i as u64);
                let ps = make_pseudo_labels(&s, &oracle);
                (s, ps)
            })
            .collect();
        PretrainData::from_samples(&pairs, 16)
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            schedule: Schedule {
                warmup_steps: 2,
                max_lr: 1e-3,
                min_lr: 1e-5,
                ..Schedule::default()
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_steps_produce_identical_parameters() {
        let data = tiny_data(8, 16);
        let cfg = tiny_model();
        let run = || {
            let mut bundle = build_model(&cfg, 5).unwrap();
            let mut opt = AdamW::new(AdamWConfig::default());
            let batch = assemble_batch(&data, &[0, 1, 2, 3]);
            pretrain_step(
                &mut bundle,
                &mut opt,
                &batch,
                &LossWeights::default(),
                1e-3,
            )
            .unwrap();
            bundle.params.byte_fingerprint()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn report_total_is_weighted_component_sum() {
        let data = tiny_data(4, 16);
        let cfg = tiny_model();
        let mut bundle = build_model(&cfg, 5).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let batch = assemble_batch(&data, &[0, 1, 2, 3]);
        let weights = LossWeights::default();
        let report = pretrain_step(&mut bundle, &mut opt, &batch, &weights, 1e-3).unwrap();
        let recon: f64 = report
            .components
            .iter()
            .map(|(name, v)| match name.as_str() {
                "clip" => weights.lambda_clip * v,
                other => weights.task_weight(Task::parse(other).unwrap()) * v,
            })
            .sum();
        assert!((report.total - recon).abs() < 1e-9);
    }

    #[test]
    fn clip_only_weights_report_single_component() {
        let data = tiny_data(4, 16);
        let cfg = ModelConfig {
            tasks: alloc::vec![],
            ..tiny_model()
        };
        let mut bundle = build_model(&cfg, 5).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let batch = assemble_batch(&data, &[0, 1, 2, 3]);
        let report =
            pretrain_step(&mut bundle, &mut opt, &batch, &LossWeights::clip_only(), 1e-3).unwrap();
        assert_eq!(report.components.len(), 1);
        assert_eq!(report.components[0].0, "clip");
    }

    #[test]
    fn run_shapes_logs_and_trains_one_head() {
        let data = tiny_data(10, 16);
        let model_cfg = ModelConfig {
            tasks: alloc::vec![Task::Segmentation],
            ..tiny_model()
        };
        let mut weights = LossWeights::clip_only();
        weights.lambda_task.insert(Task::Segmentation, 0.1);
        let cfg = TrainConfig {
            weights,
            ..quick_config(2)
        };
        let run = run_pretraining(&model_cfg, &cfg, &data).unwrap();
        assert_eq!(run.steps.len(), 2 * 3); // ceil(10/4) = 3 per epoch
        assert_eq!(run.epochs.len(), 2);
        assert!(run.bundle.params.get("head.segmentation.conv0.weight").is_some());
        assert!(run.bundle.params.get("head.depth.conv0.weight").is_none());
        assert_eq!(run.bundle.step, 6);
    }

    #[test]
    fn weighted_task_outside_roster_is_config_error() {
        let data = tiny_data(4, 16);
        let model_cfg = ModelConfig {
            tasks: alloc::vec![],
            ..tiny_model()
        };
        let cfg = quick_config(1);
        assert!(matches!(
            run_pretraining(&model_cfg, &cfg, &data),
            Err(CoreError::Config { .. })
        ));
    }

    #[test]
    fn missing_pseudo_labels_is_config_error_before_training() {
        let mut data = tiny_data(4, 16);
        data.tasks_present = alloc::vec![Task::Segmentation];
        let model_cfg = tiny_model();
        let cfg = quick_config(1);
        assert!(matches!(
            run_pretraining(&model_cfg, &cfg, &data),
            Err(CoreError::Config { .. })
        ));
    }

    #[test]
    fn logit_scale_stays_clamped() {
        let data = tiny_data(8, 16);
        let cfg = tiny_model();
        let run = run_pretraining(&cfg, &quick_config(2), &data).unwrap();
        let ls = run.bundle.logit_scale();
        assert!((crate::model::LOGIT_SCALE_MIN..=crate::model::LOGIT_SCALE_MAX).contains(&ls));
    }

    #[test]
    fn deterministic_run_and_loss_decreases() {
        let data = tiny_data(12, 16);
        let cfg = tiny_model();
        let tc = quick_config(6);
        let a = run_pretraining(&cfg, &tc, &data).unwrap();
        let b = run_pretraining(&cfg, &tc, &data).unwrap();
        assert_eq!(
            a.bundle.params.byte_fingerprint(),
            b.bundle.params.byte_fingerprint()
        );
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.report.total.to_bits(), sb.report.total.to_bits());
        }
        let first = a.epochs.first().unwrap().mean_total;
        let last = a.epochs.last().unwrap().mean_total;
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }
}
