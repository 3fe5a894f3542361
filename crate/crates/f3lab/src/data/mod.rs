//! Synthetic VQA-style dataset: colored patch-aligned shapes on a noisy
//! background, with templated questions whose answers are derived from the
//! scene graph and therefore correct by construction.

mod generate;
mod store;

pub use generate::{generate, DEFAULT_MIX, LABEL_SMALL_COUNT};
pub use store::hex_string;

use crate::error::{Error, Result};
use crate::model::TokenSeq;
use crate::tensor::Tensor;

/// Image geometry used by the generator (matches `ModelConfig::default`).
pub const IMG_SIDE: usize = 16;
pub const IMG_CHANNELS: usize = 3;
/// Shapes are aligned to a 4x4 grid of 4x4-pixel cells.
pub const CELL: usize = 4;
pub const GRID: usize = IMG_SIDE / CELL;

/// Question vocabulary. Ids beyond the listed words are reserved.
pub const VOCAB_SIZE: usize = 32;
pub const WORDS: [&str; 13] = [
    "is", "there", "a", "square", "circle", "triangle", "how", "many", "shapes", "what", "color",
    "the", "?",
];

/// Answer label space (8 classes).
pub const ANSWERS: [&str; 8] = ["yes", "no", "red", "green", "blue", "one", "two", "three"];

pub const LABEL_YES: usize = 0;
pub const LABEL_NO: usize = 1;
pub const LABEL_COLOR_BASE: usize = 2; // red, green, blue
pub const LABEL_COUNT_BASE: usize = 5; // one, two, three

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    YesNo,
    Number,
    Other,
}

impl QType {
    pub const ALL: [QType; 3] = [QType::YesNo, QType::Number, QType::Other];

    pub fn tag(&self) -> &'static str {
        match self {
            QType::YesNo => "yes/no",
            QType::Number => "number",
            QType::Other => "other",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            QType::YesNo => 0,
            QType::Number => 1,
            QType::Other => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 3] = [ShapeColor::Red, ShapeColor::Green, ShapeColor::Blue];

    pub fn label(&self) -> usize {
        LABEL_COLOR_BASE
            + match self {
                ShapeColor::Red => 0,
                ShapeColor::Green => 1,
                ShapeColor::Blue => 2,
            }
    }
}

/// One shape instance placed on a grid cell, with a per-instance brightness
/// jitter shared by all of its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub row: u8,
    pub col: u8,
    pub jitter: f64,
}

/// Scene graph: the ground truth every answer is derived from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub shapes: Vec<ShapeSpec>,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.shapes.len()
    }

    pub fn kinds_present(&self) -> Vec<ShapeKind> {
        ShapeKind::ALL
            .iter()
            .copied()
            .filter(|k| self.shapes.iter().any(|s| s.kind == *k))
            .collect()
    }

    pub fn kind_occurrences(&self, kind: ShapeKind) -> usize {
        self.shapes.iter().filter(|s| s.kind == kind).count()
    }
}

/// Structured question, tokenized via [`tokenize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    IsThere(ShapeKind),
    HowMany,
    WhatColor(ShapeKind),
}

fn word_id(word: &str) -> u16 {
    WORDS
        .iter()
        .position(|w| *w == word)
        .expect("word in vocabulary") as u16
}

pub fn tokenize(question: Question) -> TokenSeq {
    let ids = match question {
        Question::IsThere(kind) => vec![
            word_id("is"),
            word_id("there"),
            word_id("a"),
            word_id(kind.word()),
            word_id("?"),
        ],
        Question::HowMany => vec![
            word_id("how"),
            word_id("many"),
            word_id("shapes"),
            word_id("?"),
        ],
        Question::WhatColor(kind) => vec![
            word_id("what"),
            word_id("color"),
            word_id("is"),
            word_id("the"),
            word_id(kind.word()),
            word_id("?"),
        ],
    };
    TokenSeq::new(ids, VOCAB_SIZE).expect("template tokens are in range")
}

/// Ground-truth answer label for a question about a scene.
pub fn answer_for(scene: &Scene, question: Question) -> Result<usize> {
    match question {
        Question::IsThere(kind) => Ok(if scene.kind_occurrences(kind) > 0 {
            LABEL_YES
        } else {
            LABEL_NO
        }),
        Question::HowMany => {
            let c = scene.count();
            if !(1..=3).contains(&c) {
                return Err(Error::Config(format!("scene has {c} shapes, expected 1..=3")));
            }
            Ok(LABEL_COUNT_BASE + c - 1)
        }
        Question::WhatColor(kind) => {
            let matches: Vec<_> = scene.shapes.iter().filter(|s| s.kind == kind).collect();
            if matches.len() != 1 {
                return Err(Error::Config(format!(
                    "color question needs exactly one {:?}, scene has {}",
                    kind,
                    matches.len()
                )));
            }
            Ok(matches[0].color.label())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub question: TokenSeq,
    pub answer_label: usize,
    pub qtype: QType,
    pub scene: Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub split: Split,
}

impl Dataset {
    pub fn qtype_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for s in &self.samples {
            counts[s.qtype.index()] += 1;
        }
        counts
    }
}
