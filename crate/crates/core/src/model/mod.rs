//! Dual-encoder model family: image encoder (tiny ViT or tiny CNN), text
//! encoder, projection into a shared embedding space, a shared multi-scale
//! module, and per-task dense prediction heads.
//!
//! Heads and the multi-scale module hang off the image encoder's spatial
//! features and never touch the embedding path, so they can be dropped after
//! pretraining without changing `encode_image` / `encode_text` outputs.

mod forward;

pub use forward::{encode_image, encode_text, psp_forward, task_head_forward, transformer_block};

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Graph, TensorId};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Token-id conventions shared by the tokenizer and the text encoder.
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Attention head width; heads = embed_dim / HEAD_DIM (at least one).
const HEAD_DIM: usize = 64;
/// Transformer MLP expansion factor.
const MLP_RATIO: usize = 2;
/// Initial log-temperature of the contrastive logit scale.
pub const LOGIT_SCALE_INIT: f64 = 2.658_228_076_539_775; // ln(1/0.07)
/// Clamp range for the log-temperature after each update.
pub const LOGIT_SCALE_MIN: f64 = 0.0; // ln(1)
pub const LOGIT_SCALE_MAX: f64 = 4.605_170_185_988_092; // ln(100)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    VitTiny,
    CnnTiny,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::VitTiny => "vit_tiny",
            EncoderKind::CnnTiny => "cnn_tiny",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vit_tiny" => Ok(EncoderKind::VitTiny),
            "cnn_tiny" => Ok(EncoderKind::CnnTiny),
            other => Err(CoreError::Config {
                field: "encoder".to_string(),
                message: format!("unknown encoder kind `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Segmentation,
    Depth,
    SurfaceNormal,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::Depth, Task::SurfaceNormal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Depth => "depth",
            Task::SurfaceNormal => "surface_normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Task::Segmentation),
            "depth" => Ok(Task::Depth),
            "surface_normal" => Ok(Task::SurfaceNormal),
            other => Err(CoreError::Config {
                field: "tasks".to_string(),
                message: format!("unknown task `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub text_vocab_size: usize,
    pub text_context_length: usize,
    pub shared_dim: usize,
    pub psp_bin_sizes: Vec<usize>,
    pub head_layers: usize,
    pub tasks: Vec<Task>,
    pub num_seg_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::VitTiny,
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            text_vocab_size: crate::synth::text::Vocab::grammar().size(),
            text_context_length: 16,
            shared_dim: 32,
            psp_bin_sizes: vec![1, 2, 4],
            head_layers: 1,
            tasks: Task::ALL.to_vec(),
            num_seg_classes: crate::synth::NUM_SEG_CLASSES,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: String| {
            Err(CoreError::Config {
                field: field.to_string(),
                message,
            })
        };
        if self.image_size == 0 {
            return err("image_size", "must be positive".to_string());
        }
        match self.encoder {
            EncoderKind::VitTiny => {
                if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                    return err(
                        "patch_size",
                        format!(
                            "image_size {} must be divisible by patch_size {}",
                            self.image_size, self.patch_size
                        ),
                    );
                }
            }
            EncoderKind::CnnTiny => {
                if self.image_size % 8 != 0 {
                    return err(
                        "image_size",
                        format!("{} must be divisible by 8 for cnn_tiny", self.image_size),
                    );
                }
            }
        }
        if self.embed_dim == 0 {
            return err("embed_dim", "must be positive".to_string());
        }
        if self.embed_dim % self.num_heads() != 0 {
            return err(
                "embed_dim",
                format!(
                    "{} not divisible into {} attention heads",
                    self.embed_dim,
                    self.num_heads()
                ),
            );
        }
        if self.depth == 0 {
            return err("depth", "must be at least 1".to_string());
        }
        if self.shared_dim == 0 {
            return err("shared_dim", "must be positive".to_string());
        }
        if self.text_vocab_size <= UNK_ID as usize {
            return err("text_vocab_size", "must cover the special tokens".to_string());
        }
        if self.text_context_length < 2 {
            return err("text_context_length", "must be at least 2".to_string());
        }
        if self.psp_bin_sizes.is_empty() {
            return err("psp_bin_sizes", "must not be empty".to_string());
        }
        let grid = self.feature_grid();
        for &b in &self.psp_bin_sizes {
            if b == 0 || b > grid {
                return err(
                    "psp_bin_sizes",
                    format!("bin {b} must be in 1..={grid} (feature grid)"),
                );
            }
        }
        if self.embed_dim / self.psp_bin_sizes.len() == 0 {
            return err(
                "psp_bin_sizes",
                format!(
                    "embed_dim {} too small for {} branches",
                    self.embed_dim,
                    self.psp_bin_sizes.len()
                ),
            );
        }
        if self.head_layers != 1 && self.head_layers != 3 {
            return err("head_layers", format!("{} not in {{1,3}}", self.head_layers));
        }
        if self.tasks.contains(&Task::Segmentation) && self.num_seg_classes < 2 {
            return err("num_seg_classes", "need at least 2 classes".to_string());
        }
        Ok(())
    }

    /// Spatial extent of the encoder's feature map.
    pub fn feature_grid(&self) -> usize {
        match self.encoder {
            EncoderKind::VitTiny => self.image_size / self.patch_size,
            EncoderKind::CnnTiny => self.image_size / 8,
        }
    }

    pub fn num_heads(&self) -> usize {
        (self.embed_dim / HEAD_DIM).max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * MLP_RATIO
    }

    pub fn head_channels(&self, task: Task) -> usize {
        match task {
            Task::Segmentation => self.num_seg_classes,
            Task::Depth => 1,
            Task::SurfaceNormal => 3,
        }
    }

    /// Stable digest over every field; checkpoints embed it so a load against
    /// the wrong architecture fails early.
    pub fn digest(&self) -> u64 {
        let mut s = String::new();
        s.push_str(self.encoder.as_str());
        for v in [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.text_vocab_size,
            self.text_context_length,
            self.shared_dim,
            self.head_layers,
            self.num_seg_classes,
        ] {
            s.push_str(&format!(";{v}"));
        }
        s.push(';');
        for b in &self.psp_bin_sizes {
            s.push_str(&format!("{b},"));
        }
        s.push(';');
        for t in &self.tasks {
            s.push_str(self.task_tag(t));
        }
        math::fnv1a64(s.as_bytes())
    }

    fn task_tag(&self, t: &Task) -> &'static str {
        match t {
            Task::Segmentation => "S",
            Task::Depth => "D",
            Task::SurfaceNormal => "N",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter arrays with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        debug_assert!(!self.map.contains_key(name), "duplicate parameter {name}");
        self.map.insert(name.to_string(), Param { shape, values });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|p| p.values.len()).sum()
    }

    /// Raw little-endian f64 bytes of every parameter in name order; used for
    /// bitwise frozen-encoder checks.
    pub fn byte_fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 8);
        for (name, p) in self.map.iter() {
            out.extend_from_slice(name.as_bytes());
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    pub seed: u64,
}

/// Parameter tensors mounted onto a graph for one forward/backward pass.
pub struct Mounted {
    ids: BTreeMap<String, TensorId>,
}

impl Mounted {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not mounted"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

impl ModelBundle {
    /// Copy parameters onto `graph` as leaves. `trainable` controls whether
    /// gradients flow into them; a filter narrows which parameters train.
    pub fn mount(&self, graph: &mut Graph, trainable: bool) -> Mounted {
        self.mount_filtered(graph, |_| trainable)
    }

    pub fn mount_filtered(
        &self,
        graph: &mut Graph,
        trainable: impl Fn(&str) -> bool,
    ) -> Mounted {
        let mut ids = BTreeMap::new();
        for (name, p) in self.params.iter() {
            let id = graph.leaf(p.values.clone(), &p.shape, trainable(name));
            ids.insert(name.clone(), id);
        }
        Mounted { ids }
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get("logit_scale").expect("logit_scale").values[0]
    }

    pub fn clamp_logit_scale(&mut self) {
        let p = self.params.get_mut("logit_scale").expect("logit_scale");
        p.values[0] = p.values[0].clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX);
    }

    /// Drop task heads and the multi-scale module, keeping the embedding path.
    pub fn discard_heads(&mut self) {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("head.") || n.starts_with("psp."))
            .cloned()
            .collect();
        for n in names {
            self.params.map.remove(&n);
        }
    }
}

/// Initialize a model: truncated-normal (sigma 0.02) weights, zero biases,
/// unit layer-norm gains, logit scale at ln(1/0.07). Every parameter draws
/// from its own stream keyed by (seed, name), so adding or removing heads
/// never shifts the encoder initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut params = ParamStore::default();
    let d = config.embed_dim;
    let mut weight = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let mut rng = Rng::derive(seed, &name);
        let values: Vec<f64> = (0..n).map(|_| rng.trunc_normal(0.02)).collect();
        params.insert(&name, shape, values);
    };
    let zeros = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        params.insert(&name, shape, vec![0.0; n]);
    };
    let ones = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        params.insert(&name, shape, vec![1.0; n]);
    };

    let blocks = |params: &mut ParamStore, prefix: &str, weight: &mut dyn FnMut(&mut ParamStore, String, Vec<usize>)| {
        for i in 0..config.depth {
            let b = format!("{prefix}.block{i}");
            ones(params, format!("{b}.ln1.gamma"), vec![d]);
            zeros(params, format!("{b}.ln1.beta"), vec![d]);
            weight(params, format!("{b}.attn.qkv.weight"), vec![d, 3 * d]);
            zeros(params, format!("{b}.attn.qkv.bias"), vec![3 * d]);
            weight(params, format!("{b}.attn.proj.weight"), vec![d, d]);
            zeros(params, format!("{b}.attn.proj.bias"), vec![d]);
            ones(params, format!("{b}.ln2.gamma"), vec![d]);
            zeros(params, format!("{b}.ln2.beta"), vec![d]);
            let h = config.mlp_hidden();
            weight(params, format!("{b}.mlp.fc1.weight"), vec![d, h]);
            zeros(params, format!("{b}.mlp.fc1.bias"), vec![h]);
            weight(params, format!("{b}.mlp.fc2.weight"), vec![h, d]);
            zeros(params, format!("{b}.mlp.fc2.bias"), vec![d]);
        }
    };

    match config.encoder {
        EncoderKind::VitTiny => {
            let p = config.patch_size;
            let t = config.feature_grid() * config.feature_grid();
            weight(&mut params, "img.patch_embed.weight".to_string(), vec![d, 3, p, p]);
            zeros(&mut params, "img.patch_embed.bias".to_string(), vec![d]);
            weight(&mut params, "img.pos_embed".to_string(), vec![t, d]);
            blocks(&mut params, "img", &mut weight);
            ones(&mut params, "img.ln_final.gamma".to_string(), vec![d]);
            zeros(&mut params, "img.ln_final.beta".to_string(), vec![d]);
        }
        EncoderKind::CnnTiny => {
            let c0 = (d / 4).max(4);
            let c1 = (d / 2).max(8);
            for (i, (cin, cout)) in [(3, c0), (c0, c1), (c1, d)].iter().enumerate() {
                weight(
                    &mut params,
                    format!("img.down{i}.weight"),
                    vec![*cout, *cin, 3, 3],
                );
                zeros(&mut params, format!("img.down{i}.bias"), vec![*cout]);
            }
            for i in 0..config.depth {
                weight(&mut params, format!("img.refine{i}.weight"), vec![d, d, 3, 3]);
                zeros(&mut params, format!("img.refine{i}.bias"), vec![d]);
            }
        }
    }
    weight(
        &mut params,
        "img.proj.weight".to_string(),
        vec![d, config.shared_dim],
    );

    weight(
        &mut params,
        "txt.tok_embed".to_string(),
        vec![config.text_vocab_size, d],
    );
    weight(
        &mut params,
        "txt.pos_embed".to_string(),
        vec![config.text_context_length, d],
    );
    blocks(&mut params, "txt", &mut weight);
    ones(&mut params, "txt.ln_final.gamma".to_string(), vec![d]);
    zeros(&mut params, "txt.ln_final.beta".to_string(), vec![d]);
    weight(
        &mut params,
        "txt.proj.weight".to_string(),
        vec![d, config.shared_dim],
    );

    params.insert("logit_scale", vec![1], vec![LOGIT_SCALE_INIT]);

    if !config.tasks.is_empty() {
        let nb = config.psp_bin_sizes.len();
        let cb = d / nb;
        for i in 0..nb {
            weight(&mut params, format!("psp.branch{i}.weight"), vec![cb, d, 1, 1]);
            zeros(&mut params, format!("psp.branch{i}.bias"), vec![cb]);
        }
        weight(
            &mut params,
            "psp.fuse.weight".to_string(),
            vec![d, d + cb * nb, 1, 1],
        );
        zeros(&mut params, "psp.fuse.bias".to_string(), vec![d]);

        for task in &config.tasks {
            let tag = task.as_str();
            let ct = config.head_channels(*task);
            if config.head_layers == 1 {
                weight(&mut params, format!("head.{tag}.conv0.weight"), vec![ct, d, 1, 1]);
                zeros(&mut params, format!("head.{tag}.conv0.bias"), vec![ct]);
            } else {
                weight(&mut params, format!("head.{tag}.conv0.weight"), vec![d, d, 3, 3]);
                zeros(&mut params, format!("head.{tag}.conv0.bias"), vec![d]);
                weight(&mut params, format!("head.{tag}.conv1.weight"), vec![d, d, 3, 3]);
                zeros(&mut params, format!("head.{tag}.conv1.bias"), vec![d]);
                weight(&mut params, format!("head.{tag}.conv2.weight"), vec![ct, d, 1, 1]);
                zeros(&mut params, format!("head.{tag}.conv2.bias"), vec![ct]);
            }
        }
    }

    Ok(ModelBundle {
        config: config.clone(),
        params,
        step: 0,
        seed,
    })
}
