//! Closed caption grammar, its vocabulary, and the tokenizer.
//!
//! Captions follow
//! `a {color} {shape} [left of|right of|above|below] a {color} {shape}`
//! naming only rendered, sufficiently visible objects.

use super::scene::SceneSpec;
use super::{COLOR_NAMES, NUM_SHAPES};
use crate::model::{BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::rng::Rng;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Grammar words; token id = 4 + position (after PAD/BOS/EOS/UNK).
const WORDS: [&str; 20] = [
    "a", "red", "green", "blue", "yellow", "magenta", "cyan", "circle", "square", "triangle",
    "diamond", "plus", "ring", "hexagon", "star", "left", "right", "of", "above", "below",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct Vocab;

impl Vocab {
    pub fn grammar() -> Vocab {
        Vocab
    }

    pub fn size(&self) -> usize {
        4 + WORDS.len()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| (i + 4) as u32)
    }

    pub fn word_of(&self, id: u32) -> Option<&'static str> {
        let i = id as usize;
        if i >= 4 && i - 4 < WORDS.len() {
            Some(WORDS[i - 4])
        } else {
            None
        }
    }
}

/// BOS + word ids + EOS, padded (or truncated, keeping EOS last) to
/// `context_length`. Unknown words map to UNK.
pub fn tokenize(caption: &str, vocab: &Vocab, context_length: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(context_length);
    ids.push(BOS_ID);
    for word in caption.split_whitespace() {
        ids.push(vocab.id_of(word).unwrap_or(UNK_ID));
    }
    if ids.len() > context_length - 1 {
        ids.truncate(context_length - 1);
    }
    ids.push(EOS_ID);
    ids.resize(context_length, PAD_ID);
    ids
}

/// Caption a rendered scene given per-object visible pixel counts. Mentions
/// one object, or two joined by the spatial relation of their centers;
/// objects below `min_pixels` of visible area are never named.
pub(crate) fn caption_for(
    spec: &SceneSpec,
    visible: &[usize],
    min_pixels: usize,
    rng: &mut Rng,
) -> String {
    let candidates: Vec<usize> = (0..spec.objects.len())
        .filter(|&i| visible[i] >= min_pixels)
        .collect();
    match candidates.len() {
        0 => String::new(),
        1 => phrase(spec, candidates[0]),
        _ => {
            let a = candidates[rng.below(candidates.len())];
            let b = loop {
                let b = candidates[rng.below(candidates.len())];
                if b != a {
                    break b;
                }
            };
            let (oa, ob) = (&spec.objects[a], &spec.objects[b]);
            let (dx, dy) = (oa.cx - ob.cx, oa.cy - ob.cy);
            let relation = if dx.abs() >= dy.abs() {
                if dx < 0.0 {
                    "left of"
                } else {
                    "right of"
                }
            } else if dy < 0.0 {
                "above"
            } else {
                "below"
            };
            format!("{} {relation} {}", phrase(spec, a), phrase(spec, b))
        }
    }
}

fn phrase(spec: &SceneSpec, i: usize) -> String {
    let o = &spec.objects[i];
    format!("a {} {}", COLOR_NAMES[o.color], o.shape.name())
}

/// Zero-shot prompt for a shape class, color-free.
pub fn class_prompt(shape_index: usize) -> String {
    debug_assert!(shape_index < NUM_SHAPES);
    format!(
        "a photo of a {}",
        super::ShapeKind::from_index(shape_index).name()
    )
}
