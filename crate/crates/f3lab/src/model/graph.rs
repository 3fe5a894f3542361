//! Tape-graph construction for the toy model forward pass and the losses
//! differentiated through it.

use super::attention::{smoothed_distribution, AttentionTensor, DistanceKind, KL_SMOOTH_EPS};
use super::{LossSpec, ModelConfig, ModelParams, TokenSeq};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Sharpening factor on attention logits. Values above 1 push the softmax
/// toward decisive routing, which is what makes the slot's attention rows an
/// informative fingerprint of the model's visual grounding.
pub const ATTN_TEMP: f64 = 1.0;

/// Tape handles for every parameter tensor, in `ModelParams::tensors` order.
pub struct ParamVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub text_embed: Var,
    pub pos_vis: Var,
    pub pos_txt: Var,
    pub slot_embed: Var,
    pub layers: Vec<LayerVars>,
    pub ln_final_gain: Var,
    pub ln_final_bias: Var,
    pub answer_w: Var,
    pub answer_b: Var,
}

pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> ParamVars {
        let mut reg = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        let patch_w = reg(&params.patch_w);
        let patch_b = reg(&params.patch_b);
        let text_embed = reg(&params.text_embed);
        let pos_vis = reg(&params.pos_vis);
        let pos_txt = reg(&params.pos_txt);
        let slot_embed = reg(&params.slot_embed);
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            layers.push(LayerVars {
                ln1_gain: reg(&layer.ln1_gain),
                ln1_bias: reg(&layer.ln1_bias),
                wq: layer.wq.iter().map(&mut reg).collect(),
                wk: layer.wk.iter().map(&mut reg).collect(),
                wv: layer.wv.iter().map(&mut reg).collect(),
                wo: layer.wo.iter().map(&mut reg).collect(),
                ln2_gain: reg(&layer.ln2_gain),
                ln2_bias: reg(&layer.ln2_bias),
                ff_w1: reg(&layer.ff_w1),
                ff_b1: reg(&layer.ff_b1),
                ff_w2: reg(&layer.ff_w2),
                ff_b2: reg(&layer.ff_b2),
            });
        }
        let ln_final_gain = reg(&params.ln_final_gain);
        let ln_final_bias = reg(&params.ln_final_bias);
        let answer_w = reg(&params.answer_w);
        let answer_b = reg(&params.answer_b);
        ParamVars {
            patch_w,
            patch_b,
            text_embed,
            pos_vis,
            pos_txt,
            slot_embed,
            layers,
            ln_final_gain,
            ln_final_bias,
            answer_w,
            answer_b,
        }
    }

    /// Vars in the same order as `ModelParams::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_w,
            self.patch_b,
            self.text_embed,
            self.pos_vis,
            self.pos_txt,
            self.slot_embed,
        ];
        for layer in &self.layers {
            out.push(layer.ln1_gain);
            out.push(layer.ln1_bias);
            out.extend(layer.wq.iter().copied());
            out.extend(layer.wk.iter().copied());
            out.extend(layer.wv.iter().copied());
            out.extend(layer.wo.iter().copied());
            out.push(layer.ln2_gain);
            out.push(layer.ln2_bias);
            out.push(layer.ff_w1);
            out.push(layer.ff_b1);
            out.push(layer.ff_w2);
            out.push(layer.ff_b2);
        }
        out.push(self.ln_final_gain);
        out.push(self.ln_final_bias);
        out.push(self.answer_w);
        out.push(self.answer_b);
        out
    }
}

pub struct GraphOutput {
    pub logits: Var,
    /// Flattened (layers * heads * tokens) attention of the slot position
    /// over the visual tokens.
    pub attention: Var,
}

/// Build the forward graph on `tape` from an image var and a question.
pub fn build(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamVars,
    image: Var,
    question: &TokenSeq,
) -> Result<GraphOutput> {
    let (p, d, ch) = (cfg.patch, cfg.dim, cfg.channels);
    let grid_w = cfg.image_w / p;
    let m = cfg.visual_tokens();
    let n = question.len();
    let seq = m + n + 1;
    let slot = seq - 1;

    // gather patches: one contiguous pixel-row slice per patch row
    let mut patch_rows = Vec::with_capacity(m * p);
    for token in 0..m {
        let (gr, gc) = (token / grid_w, token % grid_w);
        for pr in 0..p {
            let offset = ((gr * p + pr) * cfg.image_w + gc * p) * ch;
            patch_rows.push(tape.slice(image, offset, p * ch)?);
        }
    }
    let patches_flat = tape.concat(&patch_rows)?;
    let patches = tape.reshape(patches_flat, &[m, cfg.patch_dim()])?;

    // visual tokens: projection + bias + position embedding
    let proj = tape.matmul(patches, params.patch_w)?;
    let proj = tape.add_row(proj, params.patch_b)?;
    let vis = tape.add(proj, params.pos_vis)?;

    // text tokens: embedding lookup + position embedding
    let mut rows = vec![vis];
    for (j, &tok) in question.ids().iter().enumerate() {
        let emb = tape.slice(params.text_embed, tok as usize * d, d)?;
        let pos = tape.slice(params.pos_txt, j * d, d)?;
        rows.push(tape.add(emb, pos)?);
    }
    rows.push(params.slot_embed);

    let x_flat = tape.concat(&rows)?;
    let mut x = tape.reshape(x_flat, &[seq, d])?;

    let scale = ATTN_TEMP / (cfg.head_dim() as f64).sqrt();
    const LN_EPS: f64 = 1e-6;
    let mut attn_rows = Vec::with_capacity(cfg.layers * cfg.heads);
    for layer in &params.layers {
        // pre-norm multi-head attention, full (unmasked) over [visual; text; slot]
        let normed = tape.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
        let mut attn_out: Option<Var> = None;
        for h in 0..cfg.heads {
            let q = tape.matmul(normed, layer.wq[h])?;
            let k = tape.matmul(normed, layer.wk[h])?;
            let v = tape.matmul(normed, layer.wv[h])?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, scale)?;
            let probs = tape.softmax(scaled, 1)?;
            attn_rows.push(tape.slice(probs, slot * seq, m)?);
            let ctx = tape.matmul(probs, v)?;
            let contrib = tape.matmul(ctx, layer.wo[h])?;
            attn_out = Some(match attn_out {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        x = tape.add(x, attn_out.expect("heads >= 1"))?;

        // pre-norm feed-forward with tanh nonlinearity, residual
        let normed = tape.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        let h1 = tape.matmul(normed, layer.ff_w1)?;
        let h1 = tape.add_row(h1, layer.ff_b1)?;
        let h1 = tape.tanh(h1)?;
        let h2 = tape.matmul(h1, layer.ff_w2)?;
        let h2 = tape.add_row(h2, layer.ff_b2)?;
        x = tape.add(x, h2)?;
    }

    let x = tape.layer_norm_rows(x, params.ln_final_gain, params.ln_final_bias, LN_EPS)?;
    let slot_state = tape.slice(x, slot * d, d)?;
    let slot_state = tape.reshape(slot_state, &[1, d])?;
    let logits = tape.matmul(slot_state, params.answer_w)?;
    let logits = tape.add_row(logits, params.answer_b)?;
    let logits = tape.reshape(logits, &[cfg.answer_classes])?;

    let attention = tape.concat(&attn_rows)?;
    Ok(GraphOutput { logits, attention })
}

/// Attention-distance loss between an on-tape attention var and a fixed
/// reference tensor. The reference is a constant: no gradient flows into it.
pub fn distance_loss(
    tape: &mut Tape,
    attention: Var,
    reference: &AttentionTensor,
    kind: DistanceKind,
) -> Result<Var> {
    let rows = reference.layers() * reference.heads();
    let tokens = reference.tokens();
    match kind {
        DistanceKind::Mse => {
            let ref_var = tape.constant(Tensor::new(
                &[rows * tokens],
                reference.values().to_vec(),
            )?);
            let diff = tape.sub(attention, ref_var)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq)?)
        }
        DistanceKind::Kl => {
            let denom = 1.0 + tokens as f64 * KL_SMOOTH_EPS;
            let mut total: Option<Var> = None;
            for r in 0..rows {
                let p = smoothed_distribution(
                    &reference.values()[r * tokens..(r + 1) * tokens],
                );
                let p_var = tape.constant(Tensor::new(&[tokens], p)?);
                let row = tape.slice(attention, r * tokens, tokens)?;
                let q = tape.normalize(row)?;
                let q = tape.add_scalar(q, KL_SMOOTH_EPS)?;
                let q = tape.scale(q, 1.0 / denom)?;
                let terms = tape.kl_terms(p_var, q)?;
                let s = tape.sum(terms)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, s)?,
                    None => s,
                });
            }
            Ok(tape.scale(total.expect("at least one row"), 1.0 / rows as f64)?)
        }
    }
}

/// Build the full graph for a [`LossSpec`], returning the scalar loss var.
pub fn loss_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams,
    image: Var,
    question: &TokenSeq,
    loss: &LossSpec,
) -> Result<Var> {
    if let LossSpec::Constant(v) = loss {
        let c = tape.constant(Tensor::scalar(*v));
        return Ok(tape.sum(c)?);
    }
    let param_vars = ParamVars::register(tape, params, false);
    let out = build(tape, cfg, &param_vars, image, question)?;
    match loss {
        LossSpec::Constant(_) => unreachable!(),
        LossSpec::Answer { label } => Ok(tape.cross_entropy(out.logits, *label)?),
        LossSpec::CarliniWagner { original, c, label } => {
            let ce = tape.cross_entropy(out.logits, *label)?;
            let orig = tape.constant((*original).clone());
            let diff = tape.sub(image, orig)?;
            let dist = tape.l2_norm(diff)?;
            let penalty = tape.scale(dist, -*c)?;
            Ok(tape.add(ce, penalty)?)
        }
        LossSpec::AttentionDistance { reference, kind } => {
            distance_loss(tape, out.attention, reference, *kind)
        }
    }
}
