//! Scene sampling, rendering, and question construction.

use super::*;
use crate::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Default question-type mix: (yes/no, number, other).
pub const DEFAULT_MIX: [f64; 3] = [0.384, 0.140, 0.476];

/// Count questions cover 1..=LABEL_SMALL_COUNT shapes.
pub const LABEL_SMALL_COUNT: usize = 3;

// rendering palette
const BG_LO: f64 = 0.32;
const BG_HI: f64 = 0.38;
const SHAPE_HI: f64 = 0.78;
const SHAPE_LO: f64 = 0.18;
const JITTER: f64 = 0.05;

/// 4x4-cell pixel masks, row-major. Glyphs are deliberately sparse (a few
/// pixels each) so that answers hinge on a handful of pixel sites.
fn shape_mask(kind: ShapeKind) -> [[bool; CELL]; CELL] {
    let o = false;
    let x = true;
    match kind {
        ShapeKind::Square => [
            [o, o, o, o],
            [o, x, x, o],
            [o, x, x, o],
            [o, o, o, o],
        ],
        ShapeKind::Circle => [
            [o, x, o, o],
            [x, o, x, o],
            [o, x, o, o],
            [o, o, o, o],
        ],
        ShapeKind::Triangle => [
            [o, o, o, o],
            [o, x, o, o],
            [o, x, x, o],
            [o, o, o, o],
        ],
    }
}

fn color_channels(color: ShapeColor) -> [f64; 3] {
    match color {
        ShapeColor::Red => [SHAPE_HI, SHAPE_LO, SHAPE_LO],
        ShapeColor::Green => [SHAPE_LO, SHAPE_HI, SHAPE_LO],
        ShapeColor::Blue => [SHAPE_LO, SHAPE_LO, SHAPE_HI],
    }
}

/// Deterministic generator: `n` samples with the requested question-type mix
/// (counts apportioned by largest remainder, then shuffled).
pub fn generate(n: usize, seed: u64, mix: [f64; 3], split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let total: f64 = mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "question-type mix must sum to 1, got {total}"
        )));
    }
    if mix.iter().any(|&p| p < 0.0) {
        return Err(Error::Config("question-type mix must be nonnegative".into()));
    }

    let counts = apportion(n, &mix);
    let mut qtypes = Vec::with_capacity(n);
    for (qt, &count) in QType::ALL.iter().zip(&counts) {
        qtypes.extend(std::iter::repeat(*qt).take(count));
    }

    let mut rng = substream(seed, &[split as u64 + 1]);
    qtypes.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(n);
    for qtype in qtypes {
        samples.push(sample_one(qtype, &mut rng)?);
    }
    Ok(Dataset {
        samples,
        seed,
        split,
    })
}

/// Largest-remainder apportionment of `n` into parts proportional to `mix`.
fn apportion(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % 3]] += 1;
    }
    counts
}

fn sample_one(qtype: QType, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut scene = sample_scene(rng);
    if qtype == QType::Other {
        // color questions need a shape kind that occurs exactly once
        let mut tries = 0;
        while unique_kinds(&scene).is_empty() {
            scene = sample_scene(rng);
            tries += 1;
            if tries > 100 {
                return Err(Error::Config(
                    "could not sample a scene with a unique shape kind".into(),
                ));
            }
        }
    }

    let question = match qtype {
        QType::YesNo => {
            let present = scene.kinds_present();
            let absent: Vec<ShapeKind> = ShapeKind::ALL
                .iter()
                .copied()
                .filter(|k| !present.contains(k))
                .collect();
            if absent.is_empty() || rng.gen_bool(0.5) {
                Question::IsThere(*present.choose(rng).expect("scene is nonempty"))
            } else {
                Question::IsThere(*absent.choose(rng).expect("absent checked"))
            }
        }
        QType::Number => Question::HowMany,
        QType::Other => {
            let uniques = unique_kinds(&scene);
            Question::WhatColor(*uniques.choose(rng).expect("uniqueness enforced"))
        }
    };

    let answer_label = answer_for(&scene, question)?;
    let image = render(&scene, rng);
    Ok(Sample {
        image,
        question: tokenize(question),
        answer_label,
        qtype,
        scene,
    })
}

fn unique_kinds(scene: &Scene) -> Vec<ShapeKind> {
    ShapeKind::ALL
        .iter()
        .copied()
        .filter(|k| scene.kind_occurrences(*k) == 1)
        .collect()
}

fn sample_scene(rng: &mut ChaCha8Rng) -> Scene {
    let count = rng.gen_range(1..=LABEL_SMALL_COUNT);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let mut shapes = Vec::with_capacity(count);
    for &cell in cells.iter().take(count) {
        let kind = *ShapeKind::ALL.choose(rng).expect("nonempty");
        let color = *ShapeColor::ALL.choose(rng).expect("nonempty");
        shapes.push(ShapeSpec {
            kind,
            color,
            row: (cell / GRID) as u8,
            col: (cell % GRID) as u8,
            jitter: rng.gen_range(-JITTER..JITTER),
        });
    }
    Scene { shapes }
}

/// Render with per-pixel background noise, then crisp shape pixels. No
/// anti-aliasing, so pixels are reproducible bit-exactly.
pub fn render(scene: &Scene, rng: &mut ChaCha8Rng) -> Tensor {
    let mut pixels = vec![0.0f64; IMG_SIDE * IMG_SIDE * IMG_CHANNELS];
    for p in pixels.iter_mut() {
        *p = rng.gen_range(BG_LO..BG_HI);
    }
    for shape in &scene.shapes {
        let mask = shape_mask(shape.kind);
        let base = color_channels(shape.color);
        for (mr, mask_row) in mask.iter().enumerate() {
            for (mc, &on) in mask_row.iter().enumerate() {
                if !on {
                    continue;
                }
                let r = shape.row as usize * CELL + mr;
                let c = shape.col as usize * CELL + mc;
                for ch in 0..IMG_CHANNELS {
                    let v = (base[ch] + shape.jitter).clamp(0.0, 1.0);
                    pixels[(r * IMG_SIDE + c) * IMG_CHANNELS + ch] = v;
                }
            }
        }
    }
    Tensor::new(&[IMG_SIDE, IMG_SIDE, IMG_CHANNELS], pixels).expect("render shape")
}
