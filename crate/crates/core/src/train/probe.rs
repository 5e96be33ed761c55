//! Frozen-backbone probing: cache encoder features once, train a fresh head
//! (pointwise or pyramid-pooling) on ground truth, and score the result with
//! the task metric. Also hosts zero-shot classification and retrieval
//! evaluation over the frozen embedding path.

use super::optimizer::{AdamW, AdamWConfig};
use super::schedule::{Schedule, ScheduleKind};
use crate::error::{CoreError, Result};
use crate::loss::{angular_probe_loss, segmentation_ce, ssi_probe_loss};
use crate::metrics::{
    abs_rel, angular_counts, recall_at_k, top1, zero_shot_classify, AngularCounts,
    ConfusionAccumulator, MetricReport, RecallReport,
};
use crate::model::{
    encode_image, encode_text, psp_forward, ModelBundle, ModelConfig, Mounted, ParamStore,
};
use crate::rng::Rng;
use crate::synth::{tokenize, Sample, Vocab, NUM_SHAPES};
use crate::tensor::{Graph, TensorId};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

pub const SEG_IGNORE_ID: u32 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    Segmentation,
    Depth,
    SurfaceNormal,
    Classification,
}

impl ProbeTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeTask::Segmentation => "segmentation",
            ProbeTask::Depth => "depth",
            ProbeTask::SurfaceNormal => "surface_normal",
            ProbeTask::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(ProbeTask::Segmentation),
            "depth" => Ok(ProbeTask::Depth),
            "surface_normal" => Ok(ProbeTask::SurfaceNormal),
            "classification" => Ok(ProbeTask::Classification),
            other => Err(CoreError::Config {
                field: "probe_task".to_string(),
                message: format!("unknown probe task `{other}`"),
            }),
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            ProbeTask::Segmentation => "miou",
            ProbeTask::Depth => "abs_rel",
            ProbeTask::SurfaceNormal => "a<30",
            ProbeTask::Classification => "top1",
        }
    }

    /// True when larger metric values are better.
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, ProbeTask::Depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeHead {
    Linear,
    Psp,
}

impl ProbeHead {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeHead::Linear => "linear",
            ProbeHead::Psp => "psp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeHead::Linear),
            "psp" => Ok(ProbeHead::Psp),
            other => Err(CoreError::Config {
                field: "probe_head".to_string(),
                message: format!("unknown probe head `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub head: ProbeHead,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl ProbeConfig {
    /// Cosine-warmup defaults per task, learning rates scaled up from the
    /// full-scale settings to suit fresh tiny heads on a small dataset.
    pub fn defaults(task: ProbeTask, head: ProbeHead) -> ProbeConfig {
        let (epochs, batch_size, max_lr) = match task {
            ProbeTask::Segmentation => (30, 32, 5e-3),
            ProbeTask::Depth => (30, 16, 5e-3),
            ProbeTask::SurfaceNormal => (30, 16, 5e-3),
            ProbeTask::Classification => (30, 64, 5e-3),
        };
        ProbeConfig {
            task,
            head,
            epochs,
            batch_size,
            schedule: Schedule {
                kind: ScheduleKind::CosineWarmup,
                warmup_steps: 100,
                warmup_init_lr: 1e-6,
                max_lr,
                min_lr: max_lr / 50.0,
                milestones: Vec::new(),
                gamma: 0.1,
                steps_per_epoch: 1,
            },
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Ground-truth-labeled evaluation sample.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub image: Vec<u8>,
    pub tokens: Vec<u32>,
    /// Dominant shape class id (1..=8; 0 when background only).
    pub label: u8,
    pub gt_mask: Vec<u8>,
    pub gt_disparity: Vec<f32>,
    pub gt_normals: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeData {
    pub image_size: usize,
    pub samples: Vec<ProbeSample>,
}

impl ProbeData {
    pub fn from_samples(samples: &[Sample], context_length: usize) -> ProbeData {
        let vocab = Vocab::grammar();
        ProbeData {
            image_size: samples.first().map(|s| s.image_size).unwrap_or(0),
            samples: samples
                .iter()
                .map(|s| ProbeSample {
                    image: s.image.clone(),
                    tokens: tokenize(&s.caption, &vocab, context_length),
                    label: s.dominant_class,
                    gt_mask: s.gt_mask.clone(),
                    gt_disparity: s.gt_disparity.clone(),
                    gt_normals: s.gt_normals.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Frozen-encoder activations for a dataset.
pub struct FeatureCache {
    pub count: usize,
    pub dim: usize,
    pub grid: usize,
    pub shared_dim: usize,
    /// `[N, dim, grid, grid]`
    pub features: Vec<f64>,
    /// `[N, shared_dim]`, row-normalized
    pub embeddings: Vec<f64>,
}

/// Run the frozen encoder over a dataset, collecting spatial features and
/// embeddings. Parameters are mounted without gradients.
pub fn extract_features(
    bundle: &ModelBundle,
    data: &ProbeData,
    batch_size: usize,
) -> Result<FeatureCache> {
    let cfg = &bundle.config;
    let s = cfg.image_size;
    if data.image_size != s {
        return Err(CoreError::Config {
            field: "image_size".to_string(),
            message: format!("dataset {} does not match model {s}", data.image_size),
        });
    }
    let grid = cfg.feature_grid();
    let dim = cfg.embed_dim;
    let n = data.len();
    let mut features = Vec::with_capacity(n * dim * grid * grid);
    let mut embeddings = Vec::with_capacity(n * cfg.shared_dim);
    for chunk in (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let mounted = bundle.mount(&mut g, false);
        let b = chunk.len();
        let mut images = Vec::with_capacity(b * 3 * s * s);
        for &i in chunk {
            images.extend(data.samples[i].image.iter().map(|&v| v as f64 / 255.0));
        }
        let imgs = g.constant(images, &[b, 3, s, s]);
        let (emb, feats) = encode_image(&mut g, &mounted, cfg, imgs)?;
        embeddings.extend_from_slice(g.data(emb));
        features.extend_from_slice(g.data(feats));
    }
    Ok(FeatureCache {
        count: n,
        dim,
        grid,
        shared_dim: cfg.shared_dim,
        features,
        embeddings,
    })
}

/// Encode a token batch with the frozen text tower.
pub fn encode_text_batch(bundle: &ModelBundle, tokens: &[Vec<u32>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tokens.len() * bundle.config.shared_dim);
    for chunk in tokens.chunks(64) {
        let mut g = Graph::new();
        let mounted = bundle.mount(&mut g, false);
        let emb = encode_text(&mut g, &mounted, &bundle.config, chunk)?;
        out.extend_from_slice(g.data(emb));
    }
    Ok(out)
}

fn probe_channels(task: ProbeTask, cfg: &ModelConfig) -> usize {
    match task {
        ProbeTask::Segmentation => cfg.num_seg_classes,
        ProbeTask::Depth => 1,
        ProbeTask::SurfaceNormal => 3,
        ProbeTask::Classification => NUM_SHAPES,
    }
}

/// Fresh probe parameters. Dense probes are a pointwise convolution (with an
/// optional fresh pyramid-pooling module in front); the classification probe
/// is a linear layer over the global embedding.
pub fn build_probe_params(
    cfg: &ModelConfig,
    task: ProbeTask,
    head: ProbeHead,
    seed: u64,
) -> ParamStore {
    let mut params = ParamStore::default();
    let d = cfg.embed_dim;
    let c = probe_channels(task, cfg);
    let weight = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let mut rng = Rng::derive(seed, &name);
        let values: Vec<f64> = (0..n).map(|_| rng.trunc_normal(0.02)).collect();
        params.insert(&name, shape, values);
    };
    if task == ProbeTask::Classification {
        weight(&mut params, "probe.fc.weight".to_string(), vec![cfg.shared_dim, c]);
        params.insert("probe.fc.bias", vec![c], vec![0.0; c]);
        return params;
    }
    if head == ProbeHead::Psp {
        let nb = cfg.psp_bin_sizes.len();
        let cb = d / nb;
        for i in 0..nb {
            weight(&mut params, format!("psp.branch{i}.weight"), vec![cb, d, 1, 1]);
            params.insert(&format!("psp.branch{i}.bias"), vec![cb], vec![0.0; cb]);
        }
        weight(
            &mut params,
            "psp.fuse.weight".to_string(),
            vec![d, d + cb * nb, 1, 1],
        );
        params.insert("psp.fuse.bias", vec![d], vec![0.0; d]);
    }
    weight(&mut params, "probe.conv.weight".to_string(), vec![c, d, 1, 1]);
    params.insert("probe.conv.bias", vec![c], vec![0.0; c]);
    params
}

/// Dense-probe forward on cached features: optional PSP, pointwise conv,
/// per-pixel normalization for surface normals, nearest upsample to the
/// image resolution.
fn probe_dense_forward(
    g: &mut Graph,
    mounted: &Mounted,
    cfg: &ModelConfig,
    task: ProbeTask,
    head: ProbeHead,
    feats: TensorId,
    out_size: usize,
) -> Result<TensorId> {
    let x = if head == ProbeHead::Psp {
        psp_forward(g, mounted, cfg, feats)?
    } else {
        feats
    };
    let mut y = g.conv2d(
        x,
        mounted.id("probe.conv.weight"),
        Some(mounted.id("probe.conv.bias")),
        1,
        0,
    )?;
    if task == ProbeTask::SurfaceNormal {
        y = g.l2_normalize(y, 1, 1e-8)?;
    }
    g.nearest_upsample(y, out_size, out_size)
}

pub struct ProbeOutcome {
    pub params: ParamStore,
    pub report: MetricReport,
}

/// Train a probe on frozen features and evaluate it. The encoder receives no
/// updates; its parameter bytes are verified identical before and after.
pub fn run_probe(
    bundle: &ModelBundle,
    cfg: &ProbeConfig,
    train: &ProbeData,
    val: &ProbeData,
) -> Result<ProbeOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Input {
            message: "probe datasets must be non-empty".to_string(),
        });
    }
    cfg.schedule.validate()?;
    let encoder_before = bundle.params.byte_fingerprint();
    let model_cfg = &bundle.config;
    let train_cache = extract_features(bundle, train, 32)?;
    let val_cache = extract_features(bundle, val, 32)?;

    let mut params = build_probe_params(model_cfg, cfg.task, cfg.head, cfg.seed);
    let mut optimizer = AdamW::new(cfg.optimizer);
    let n = train.len();
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut schedule = cfg.schedule.clone();
    schedule.steps_per_epoch = steps_per_epoch;
    let mut order_rng = Rng::derive(cfg.seed, "probe-order");
    let mut global_step = 0usize;

    for _epoch in 0..cfg.epochs {
        let order = order_rng.permutation(n);
        for chunk in order.chunks(bs) {
            let lr = schedule.lr_at_step(global_step, total_steps)?;
            global_step += 1;
            let mut g = Graph::new();
            let mounted = mount_store(&params, &mut g, true);
            let loss = probe_loss_on_batch(
                &mut g, &mounted, model_cfg, cfg, train, &train_cache, chunk,
            )?;
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, id) in mounted.iter() {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad.to_vec());
                }
            }
            optimizer.step(lr, &mut params, &grads);
        }
    }

    let report = evaluate_probe(bundle, cfg, &params, val, &val_cache)?;
    if bundle.params.byte_fingerprint() != encoder_before {
        return Err(CoreError::Usage {
            message: "encoder parameters changed during probing".to_string(),
        });
    }
    Ok(ProbeOutcome { params, report })
}

/// Mount a free-standing parameter store (probe heads) onto a graph.
pub fn mount_store(params: &ParamStore, g: &mut Graph, trainable: bool) -> Mounted {
    let bundle = ModelBundle {
        config: ModelConfig::default(),
        params: params.clone(),
        step: 0,
        seed: 0,
    };
    bundle.mount(g, trainable)
}

fn batch_features(
    g: &mut Graph,
    cache: &FeatureCache,
    indices: &[usize],
) -> TensorId {
    let plane = cache.dim * cache.grid * cache.grid;
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        data.extend_from_slice(&cache.features[i * plane..(i + 1) * plane]);
    }
    g.constant(
        data,
        &[indices.len(), cache.dim, cache.grid, cache.grid],
    )
}

fn probe_loss_on_batch(
    g: &mut Graph,
    mounted: &Mounted,
    model_cfg: &ModelConfig,
    cfg: &ProbeConfig,
    data: &ProbeData,
    cache: &FeatureCache,
    indices: &[usize],
) -> Result<TensorId> {
    let s = data.image_size;
    let px = s * s;
    let b = indices.len();
    match cfg.task {
        ProbeTask::Classification => {
            let mut embs = Vec::with_capacity(b * cache.shared_dim);
            let mut labels = Vec::with_capacity(b);
            for &i in indices {
                embs.extend_from_slice(
                    &cache.embeddings[i * cache.shared_dim..(i + 1) * cache.shared_dim],
                );
                let l = data.samples[i].label;
                labels.push(if l == 0 { SEG_IGNORE_ID } else { (l - 1) as u32 });
            }
            let e = g.constant(embs, &[b, cache.shared_dim]);
            let logits = {
                let w = mounted.id("probe.fc.weight");
                let bias = mounted.id("probe.fc.bias");
                let y = g.matmul(e, w)?;
                g.add(y, bias)?
            };
            let as_map = g.reshape(logits, &[b, NUM_SHAPES, 1, 1])?;
            let (loss, _) = g.cross_entropy_spatial(as_map, &labels, SEG_IGNORE_ID)?;
            Ok(loss)
        }
        task => {
            let feats = batch_features(g, cache, indices);
            let pred = probe_dense_forward(g, mounted, model_cfg, task, cfg.head, feats, s)?;
            match task {
                ProbeTask::Segmentation => {
                    let mut targets = Vec::with_capacity(b * px);
                    for &i in indices {
                        targets.extend(data.samples[i].gt_mask.iter().map(|&v| v as u32));
                    }
                    let (loss, _) = segmentation_ce(g, pred, &targets, SEG_IGNORE_ID)?;
                    Ok(loss)
                }
                ProbeTask::Depth => {
                    let mut gt = Vec::with_capacity(b * px);
                    for &i in indices {
                        gt.extend(data.samples[i].gt_disparity.iter().map(|&v| v as f64));
                    }
                    ssi_probe_loss(g, pred, &gt, None)
                }
                ProbeTask::SurfaceNormal => {
                    let mut gt = Vec::with_capacity(b * 3 * px);
                    for &i in indices {
                        gt.extend(data.samples[i].gt_normals.iter().map(|&v| v as f64));
                    }
                    let (loss, _) = angular_probe_loss(g, pred, &gt, None)?;
                    Ok(loss)
                }
                ProbeTask::Classification => unreachable!(),
            }
        }
    }
}

/// Score a trained probe on a validation set.
pub fn evaluate_probe(
    bundle: &ModelBundle,
    cfg: &ProbeConfig,
    params: &ParamStore,
    val: &ProbeData,
    cache: &FeatureCache,
) -> Result<MetricReport> {
    let model_cfg = &bundle.config;
    let s = val.image_size;
    let px = s * s;
    let mut report = MetricReport {
        task: cfg.task.as_str().to_string(),
        metric: cfg.task.metric_name().to_string(),
        value: 0.0,
        per_class: Vec::new(),
        sample_count: val.len(),
        config_digest: model_cfg.digest(),
        seed: cfg.seed,
    };

    match cfg.task {
        ProbeTask::Classification => {
            let mut logits_all = Vec::with_capacity(val.len() * NUM_SHAPES);
            let mut labels = Vec::with_capacity(val.len());
            let mut g = Graph::new();
            let mounted = mount_store(params, &mut g, false);
            let e = g.constant(
                cache.embeddings.clone(),
                &[val.len(), cache.shared_dim],
            );
            let y = g.matmul(e, mounted.id("probe.fc.weight"))?;
            let logits = g.add(y, mounted.id("probe.fc.bias"))?;
            logits_all.extend_from_slice(g.data(logits));
            for smp in &val.samples {
                labels.push(smp.label.saturating_sub(1) as usize);
            }
            report.value = top1(&logits_all, NUM_SHAPES, &labels)?;
        }
        ProbeTask::Segmentation => {
            let mut acc = ConfusionAccumulator::new(model_cfg.num_seg_classes, SEG_IGNORE_ID);
            for chunk in (0..val.len()).collect::<Vec<_>>().chunks(16) {
                let mut g = Graph::new();
                let mounted = mount_store(params, &mut g, false);
                let feats = batch_features(&mut g, cache, chunk);
                let pred =
                    probe_dense_forward(&mut g, &mounted, model_cfg, cfg.task, cfg.head, feats, s)?;
                let d = g.data(pred);
                let c = model_cfg.num_seg_classes;
                for (bi, &i) in chunk.iter().enumerate() {
                    let mut pred_mask = vec![0u8; px];
                    for p in 0..px {
                        let mut best = 0usize;
                        let mut best_v = f64::NEG_INFINITY;
                        for ch in 0..c {
                            let v = d[(bi * c + ch) * px + p];
                            if v > best_v {
                                best_v = v;
                                best = ch;
                            }
                        }
                        pred_mask[p] = best as u8;
                    }
                    acc.update(&pred_mask, &val.samples[i].gt_mask);
                }
            }
            report.per_class = acc
                .per_class_iou()
                .into_iter()
                .enumerate()
                .filter_map(|(c, v)| v.map(|x| (c, 100.0 * x)))
                .collect();
            report.value = 100.0 * acc.mean_iou();
        }
        ProbeTask::Depth => {
            let mut sum = 0.0;
            for chunk in (0..val.len()).collect::<Vec<_>>().chunks(16) {
                let mut g = Graph::new();
                let mounted = mount_store(params, &mut g, false);
                let feats = batch_features(&mut g, cache, chunk);
                let pred =
                    probe_dense_forward(&mut g, &mounted, model_cfg, cfg.task, cfg.head, feats, s)?;
                let d = g.data(pred);
                for (bi, &i) in chunk.iter().enumerate() {
                    let pd = &d[bi * px..(bi + 1) * px];
                    let gt: Vec<f64> = val.samples[i]
                        .gt_disparity
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    sum += abs_rel(pd, &gt, None)?;
                }
            }
            report.value = sum / val.len() as f64;
        }
        ProbeTask::SurfaceNormal => {
            let mut counts = AngularCounts::default();
            for chunk in (0..val.len()).collect::<Vec<_>>().chunks(16) {
                let mut g = Graph::new();
                let mounted = mount_store(params, &mut g, false);
                let feats = batch_features(&mut g, cache, chunk);
                let pred =
                    probe_dense_forward(&mut g, &mounted, model_cfg, cfg.task, cfg.head, feats, s)?;
                let d = g.data(pred);
                for (bi, &i) in chunk.iter().enumerate() {
                    let pd = &d[bi * 3 * px..(bi + 1) * 3 * px];
                    let gt: Vec<f64> = val.samples[i]
                        .gt_normals
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    counts.merge(angular_counts(pd, &gt, 30.0, None));
                }
            }
            report.value = counts.percentage()?;
        }
    }
    Ok(report)
}

/// Zero-shot classification over the frozen dual encoder: class prompts
/// embed through the text tower, images classify by maximum cosine.
pub fn zero_shot_eval(bundle: &ModelBundle, data: &ProbeData) -> Result<f64> {
    let vocab = Vocab::grammar();
    let ctx = bundle.config.text_context_length;
    let prompts: Vec<Vec<u32>> = (0..NUM_SHAPES)
        .map(|i| tokenize(&crate::synth::text::class_prompt(i), &vocab, ctx))
        .collect();
    let class_embs = encode_text_batch(bundle, &prompts)?;
    let cache = extract_features(bundle, data, 32)?;
    let labeled: Vec<usize> = (0..data.len())
        .filter(|&i| data.samples[i].label > 0)
        .collect();
    if labeled.is_empty() {
        return Err(CoreError::Metric {
            message: "zero-shot: no labeled samples".to_string(),
        });
    }
    let d = cache.shared_dim;
    let mut embs = Vec::with_capacity(labeled.len() * d);
    let mut labels = Vec::with_capacity(labeled.len());
    for &i in &labeled {
        embs.extend_from_slice(&cache.embeddings[i * d..(i + 1) * d]);
        labels.push((data.samples[i].label - 1) as usize);
    }
    let preds = zero_shot_classify(&embs, &class_embs, labeled.len(), NUM_SHAPES, d);
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / labeled.len() as f64)
}

/// Retrieval over matched image-caption pairs: recall at 1, 5, and 10 in
/// both directions.
pub fn retrieval_eval(bundle: &ModelBundle, data: &ProbeData) -> Result<RecallReport> {
    let cache = extract_features(bundle, data, 32)?;
    let tokens: Vec<Vec<u32>> = data.samples.iter().map(|s| s.tokens.clone()).collect();
    let text_embs = encode_text_batch(bundle, &tokens)?;
    recall_at_k(
        &cache.embeddings,
        &text_embs,
        data.len(),
        cache.shared_dim,
        &[1, 5, 10],
    )
}
