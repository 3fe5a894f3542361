//! Seeded, trainable toy vision-language model.
//!
//! Images become M visual tokens through a patch projection, the question
//! becomes N embedded text tokens, and a single learned answer-slot token is
//! appended. A small full-attention transformer runs over the sequence
//! `[visual; text; slot]`; the slot position's attention rows over the visual
//! tokens form the cross-modal attention tensor, and its final hidden state
//! produces the answer logits.

mod attention;
mod checkpoint;
mod graph;
mod train;

pub use attention::{smoothed_distribution, AttentionTensor, DistanceKind, KL_SMOOTH_EPS};
pub use graph::ATTN_TEMP;
pub use train::{train, TrainOutcome, Trainer};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};
use rand::Rng;

/// Architecture and sizing for the toy model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub answer_classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_question_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch: 4,
            vocab_size: 32,
            answer_classes: 8,
            layers: 3,
            heads: 4,
            dim: 48,
            max_question_len: 8,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 || self.patch == 0 {
            return Err(Error::Config("image and patch sizes must be positive".into()));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.layers == 0
            || self.heads == 0
            || self.dim == 0
            || self.vocab_size == 0
            || self.answer_classes == 0
            || self.max_question_len == 0
        {
            return Err(Error::Config("all model extents must be >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Number of visual tokens.
    pub fn visual_tokens(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Feed-forward inner width.
    pub fn ff_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

/// Tokenized question: ids in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u16>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u16>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Config("question must have at least one token".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Config(format!(
                "token id {bad} out of range for vocab {vocab_size}"
            )));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One transformer layer's weights; attention projections are stored per head.
/// Layers are pre-norm: `x + Attn(ln1(x))` then `x + FF(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub text_embed: Tensor,
    pub pos_vis: Tensor,
    pub pos_txt: Tensor,
    pub slot_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub answer_w: Tensor,
    pub answer_b: Tensor,
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform matrices, uniform embeddings,
    /// zero biases.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(cfg.seed, &[0x6d6f64656c]);
        let mut xavier = |rows: usize, cols: usize| -> Tensor {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-s..s))
        };
        let patch_w = xavier(cfg.patch_dim(), cfg.dim);
        let answer_w = xavier(cfg.dim, cfg.answer_classes);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut per_head = |rows: usize, cols: usize| -> Vec<Tensor> {
                (0..cfg.heads)
                    .map(|_| {
                        let s = (6.0 / (rows + cols) as f64).sqrt();
                        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-s..s))
                    })
                    .collect()
            };
            let wq = per_head(cfg.dim, cfg.head_dim());
            let wk = per_head(cfg.dim, cfg.head_dim());
            let wv = per_head(cfg.dim, cfg.head_dim());
            let wo = per_head(cfg.head_dim(), cfg.dim);
            let s1 = (6.0 / (cfg.dim + cfg.ff_dim()) as f64).sqrt();
            let ff_w1 = Tensor::from_fn(&[cfg.dim, cfg.ff_dim()], |_| rng.gen_range(-s1..s1));
            let ff_w2 = Tensor::from_fn(&[cfg.ff_dim(), cfg.dim], |_| rng.gen_range(-s1..s1));
            layers.push(LayerParams {
                ln1_gain: Tensor::from_fn(&[cfg.dim], |_| 1.0),
                ln1_bias: Tensor::zeros(&[cfg.dim]),
                wq,
                wk,
                wv,
                wo,
                ln2_gain: Tensor::from_fn(&[cfg.dim], |_| 1.0),
                ln2_bias: Tensor::zeros(&[cfg.dim]),
                ff_w1,
                ff_b1: Tensor::zeros(&[cfg.ff_dim()]),
                ff_w2,
                ff_b2: Tensor::zeros(&[cfg.dim]),
            });
        }
        let mut emb = |rows: usize| -> Tensor {
            Tensor::from_fn(&[rows, cfg.dim], |_| rng.gen_range(-0.3..0.3))
        };
        Ok(ModelParams {
            patch_w,
            patch_b: Tensor::zeros(&[cfg.dim]),
            text_embed: emb(cfg.vocab_size),
            pos_vis: emb(cfg.visual_tokens()),
            pos_txt: emb(cfg.max_question_len),
            slot_embed: emb(1),
            layers,
            ln_final_gain: Tensor::from_fn(&[cfg.dim], |_| 1.0),
            ln_final_bias: Tensor::zeros(&[cfg.dim]),
            answer_w,
            answer_b: Tensor::zeros(&[cfg.answer_classes]),
        })
    }

    /// All parameter tensors in a fixed order (shared with `graph::ParamVars`).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.patch_w,
            &self.patch_b,
            &self.text_embed,
            &self.pos_vis,
            &self.pos_txt,
            &self.slot_embed,
        ];
        for layer in &self.layers {
            out.push(&layer.ln1_gain);
            out.push(&layer.ln1_bias);
            out.extend(layer.wq.iter());
            out.extend(layer.wk.iter());
            out.extend(layer.wv.iter());
            out.extend(layer.wo.iter());
            out.push(&layer.ln2_gain);
            out.push(&layer.ln2_bias);
            out.push(&layer.ff_w1);
            out.push(&layer.ff_b1);
            out.push(&layer.ff_w2);
            out.push(&layer.ff_b2);
        }
        out.push(&self.ln_final_gain);
        out.push(&self.ln_final_bias);
        out.push(&self.answer_w);
        out.push(&self.answer_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.text_embed,
            &mut self.pos_vis,
            &mut self.pos_txt,
            &mut self.slot_embed,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.extend(layer.wq.iter_mut());
            out.extend(layer.wk.iter_mut());
            out.extend(layer.wv.iter_mut());
            out.extend(layer.wo.iter_mut());
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.ff_w1);
            out.push(&mut layer.ff_b1);
            out.push(&mut layer.ff_w2);
            out.push(&mut layer.ff_b2);
        }
        out.push(&mut self.ln_final_gain);
        out.push(&mut self.ln_final_bias);
        out.push(&mut self.answer_w);
        out.push(&mut self.answer_b);
        out
    }
}

/// Loss selector for [`ToyVlm::input_grad`].
pub enum LossSpec<'a> {
    /// A constant; the gradient is identically zero.
    Constant(f64),
    /// Cross-entropy of the answer logits against a label.
    Answer { label: usize },
    /// Answer loss minus `c` times the l2 distance to the original image.
    CarliniWagner {
        original: &'a Tensor,
        c: f64,
        label: usize,
    },
    /// Distance between the model's attention on this input and a fixed
    /// reference attention tensor. No gradient flows through the reference.
    AttentionDistance {
        reference: &'a AttentionTensor,
        kind: DistanceKind,
    },
}

/// A config plus trained (or freshly initialized) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl ToyVlm {
    /// Freshly initialized model from the config seed.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg)?;
        Ok(ToyVlm { cfg, params })
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.cfg.image_shape() {
            return Err(Error::Config(format!(
                "image shape {:?} does not match model {:?}",
                image.shape(),
                self.cfg.image_shape()
            )));
        }
        if !image.all_finite() {
            return Err(Error::Config("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    fn check_question(&self, question: &TokenSeq) -> Result<()> {
        if question.len() > self.cfg.max_question_len {
            return Err(Error::Config(format!(
                "question length {} exceeds max {}",
                question.len(),
                self.cfg.max_question_len
            )));
        }
        if let Some(&bad) = question
            .ids()
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::Config(format!("token id {bad} out of vocab range")));
        }
        Ok(())
    }

    /// Patch projection of an image into M visual token vectors, before
    /// position embeddings are added.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let cfg = &self.cfg;
        let (p, d) = (cfg.patch, cfg.dim);
        let grid_w = cfg.image_w / p;
        let m = cfg.visual_tokens();
        let pd = cfg.patch_dim();
        let mut out = vec![0.0; m * d];
        let pixels = image.data();
        let w = self.params.patch_w.data();
        let b = self.params.patch_b.data();
        for token in 0..m {
            let (gr, gc) = (token / grid_w, token % grid_w);
            let row = &mut out[token * d..(token + 1) * d];
            row.copy_from_slice(b);
            for pr in 0..p {
                for pc in 0..p {
                    for ch in 0..cfg.channels {
                        let pix = pixels
                            [((gr * p + pr) * cfg.image_w + (gc * p + pc)) * cfg.channels + ch];
                        if pix == 0.0 {
                            continue;
                        }
                        let widx = (pr * p + pc) * cfg.channels + ch;
                        debug_assert!(widx < pd);
                        let wrow = &w[widx * d..(widx + 1) * d];
                        for (o, &wv) in row.iter_mut().zip(wrow) {
                            *o += pix * wv;
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(&[m, d], out)?)
    }

    /// Full forward pass: answer logits and the cross-modal attention tensor.
    /// Pure and deterministic.
    pub fn forward(&self, image: &Tensor, question: &TokenSeq) -> Result<(Tensor, AttentionTensor)> {
        self.check_image(image)?;
        self.check_question(question)?;
        let mut tape = Tape::new();
        let image_var = tape.constant(image.clone());
        let params = graph::ParamVars::register(&mut tape, &self.params, false);
        let out = graph::build(&mut tape, &self.cfg, &params, image_var, question)?;
        let logits = tape.value(out.logits).clone();
        let attention = AttentionTensor::new(
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.visual_tokens(),
            tape.value(out.attention).data().to_vec(),
        )?;
        Ok((logits, attention))
    }

    /// Argmax answer label.
    pub fn predict(&self, image: &Tensor, question: &TokenSeq) -> Result<usize> {
        let (logits, _) = self.forward(image, question)?;
        Ok(argmax(logits.data()))
    }

    /// Cross-entropy of the answer logits against `label`.
    pub fn lvlm_loss(&self, image: &Tensor, question: &TokenSeq, label: usize) -> Result<f64> {
        if label >= self.cfg.answer_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                self.cfg.answer_classes
            )));
        }
        self.check_image(image)?;
        self.check_question(question)?;
        let mut tape = Tape::new();
        let image_var = tape.constant(image.clone());
        let params = graph::ParamVars::register(&mut tape, &self.params, false);
        let out = graph::build(&mut tape, &self.cfg, &params, image_var, question)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        Ok(tape.value(loss).item())
    }

    /// Gradient of the selected loss with respect to the image pixels.
    pub fn input_grad(
        &self,
        image: &Tensor,
        question: &TokenSeq,
        loss: &LossSpec,
    ) -> Result<Tensor> {
        self.check_image(image)?;
        self.check_question(question)?;
        let mut tape = Tape::new();
        let image_var = tape.leaf(image.clone(), true);
        let loss_var = graph::loss_graph(&mut tape, &self.cfg, &self.params, image_var, question, loss)?;
        tape.backward(loss_var)?;
        Ok(tape.grad(image_var)?)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            layers: 2,
            heads: 2,
            dim: 16,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn question(cfg: &ModelConfig, ids: &[u16]) -> TokenSeq {
        TokenSeq::new(ids.to_vec(), cfg.vocab_size).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        let mut cfg = ModelConfig::default();
        cfg.patch = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.dim = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_zero_image_gives_bias_rows() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::zeros(&cfg.image_shape());
        let tokens = model.encode_image(&image).unwrap();
        let bias = model.params.patch_b.data();
        for row in tokens.data().chunks(cfg.dim) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn encode_single_patch_localized() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let mut data = vec![0.0; cfg.pixels()];
        // light one pixel inside patch (row 0, col 1): pixel (1, 5)
        data[(1 * cfg.image_w + 5) * cfg.channels] = 1.0;
        let image = Tensor::new(&cfg.image_shape(), data).unwrap();
        let tokens = model.encode_image(&image).unwrap();
        let bias = model.params.patch_b.data();
        let mut differing = Vec::new();
        for (i, row) in tokens.data().chunks(cfg.dim).enumerate() {
            if row != bias {
                differing.push(i);
            }
        }
        assert_eq!(differing, vec![1]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::from_fn(&cfg.image_shape(), |i| (i % 7) as f64 / 7.0);
        let a = model.encode_image(&image).unwrap();
        let b = model.encode_image(&image).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_attention_shape_and_normalization() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::from_fn(&cfg.image_shape(), |i| ((i * 31) % 11) as f64 / 11.0);
        let q = question(&cfg, &[0, 1, 2]);
        let (logits, a) = model.forward(&image, &q).unwrap();
        assert_eq!(logits.numel(), cfg.answer_classes);
        assert_eq!(
            (a.layers(), a.heads(), a.tokens()),
            (cfg.layers, cfg.heads, cfg.visual_tokens())
        );
        // visual attention mass is at most 1 per (layer, head)
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let s: f64 = a.row(l, h).iter().sum();
                assert!(s <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_bit_identical() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::from_fn(&cfg.image_shape(), |i| ((i * 13) % 17) as f64 / 17.0);
        let q = question(&cfg, &[4, 9]);
        let (l1, a1) = model.forward(&image, &q).unwrap();
        let (l2, a2) = model.forward(&image, &q).unwrap();
        assert!(l1
            .data()
            .iter()
            .zip(l2.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a1
            .values()
            .iter()
            .zip(a2.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn attention_is_question_conditioned() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::from_fn(&cfg.image_shape(), |i| ((i * 5) % 13) as f64 / 13.0);
        let (_, a1) = model.forward(&image, &question(&cfg, &[0, 1])).unwrap();
        let (_, a2) = model.forward(&image, &question(&cfg, &[2, 3])).unwrap();
        assert_ne!(a1.values(), a2.values());
    }

    #[test]
    fn lvlm_loss_uniform_logits_is_ln_k() {
        // A model with zeroed answer head produces uniform logits.
        let cfg = small_cfg();
        let mut model = ToyVlm::init(cfg.clone()).unwrap();
        model.params.answer_w = Tensor::zeros(&[cfg.dim, cfg.answer_classes]);
        model.params.answer_b = Tensor::zeros(&[cfg.answer_classes]);
        let image = Tensor::zeros(&cfg.image_shape());
        let q = question(&cfg, &[1]);
        let loss = model.lvlm_loss(&image, &q, 3).unwrap();
        assert!((loss - (cfg.answer_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lvlm_loss_peaked_logits_near_zero() {
        let cfg = small_cfg();
        let mut model = ToyVlm::init(cfg.clone()).unwrap();
        model.params.answer_w = Tensor::zeros(&[cfg.dim, cfg.answer_classes]);
        let mut bias = vec![0.0; cfg.answer_classes];
        bias[2] = 50.0;
        model.params.answer_b = Tensor::new(&[cfg.answer_classes], bias).unwrap();
        let image = Tensor::zeros(&cfg.image_shape());
        let loss = model.lvlm_loss(&image, &question(&cfg, &[1]), 2).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn label_out_of_range_is_error() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::zeros(&cfg.image_shape());
        assert!(model
            .lvlm_loss(&image, &question(&cfg, &[1]), cfg.answer_classes)
            .is_err());
    }

    #[test]
    fn constant_loss_spec_gives_zero_gradient() {
        let cfg = small_cfg();
        let model = ToyVlm::init(cfg.clone()).unwrap();
        let image = Tensor::from_fn(&cfg.image_shape(), |i| (i % 3) as f64 / 3.0);
        let g = model
            .input_grad(&image, &question(&cfg, &[0]), &LossSpec::Constant(1.5))
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
