//! Noise-based purification of (possibly adversarial) images.
//!
//! All variants deliberately add noise to the input. v1 adds plain uniform
//! noise. v2 and v3 first derive a reference attention from a randomly
//! perturbed copy of the input, then step against the gradient of the
//! attention distance to that reference: v2 with a single random step size,
//! v3 with a per-pixel magnitude map built from the normalized gradient.
//! The oracle variant steps toward the attention of the true clean image and
//! is usable only in analysis. A random resize-and-pad baseline is included
//! as the classical comparator.

mod rp;

pub use rp::rp_baseline;

use crate::error::{Error, Result};
use crate::model::{
    smoothed_distribution, AttentionTensor, DistanceKind, LossSpec, TokenSeq, ToyVlm,
};
use crate::tensor::{signum0, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    V1,
    V2,
    V3,
    V3MultiStep,
    Oracle,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V3MultiStep => "v3_multistep",
            Variant::Oracle => "oracle",
        };
        write!(f, "{s}")
    }
}

/// Full parameterization of one purification condition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PurifyConfig {
    pub variant: Variant,
    /// Reference-noise bound (pixel units).
    pub alpha_inf: f64,
    /// Purification-noise bound.
    pub beta_inf: f64,
    /// Oracle step bound.
    pub gamma_inf: f64,
    /// Iteration count for the multi-step variant.
    pub k_steps: usize,
    /// Total multi-step budget around the original input.
    pub eps_inf_total: f64,
    pub distance: DistanceKind,
    pub seed: u64,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        PurifyConfig {
            variant: Variant::V3,
            alpha_inf: 16.0 / 255.0,
            beta_inf: 32.0 / 255.0,
            gamma_inf: 32.0 / 255.0,
            k_steps: 1,
            eps_inf_total: 32.0 / 255.0,
            distance: DistanceKind::Mse,
            seed: 0,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_inf", self.alpha_inf),
            ("beta_inf", self.beta_inf),
            ("gamma_inf", self.gamma_inf),
            ("eps_inf_total", self.eps_inf_total),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be >= 1".into()));
        }
        if self.variant == Variant::V3MultiStep && self.beta_inf > self.eps_inf_total {
            return Err(Error::Config(format!(
                "multistep per-step bound {} exceeds total budget {}",
                self.beta_inf, self.eps_inf_total
            )));
        }
        Ok(())
    }

    /// Short human-readable condition label, used in reports.
    pub fn label(&self) -> String {
        let px = |v: f64| format!("{:.1}", v * 255.0);
        match self.variant {
            Variant::V1 => format!("v1 a={}", px(self.alpha_inf)),
            Variant::V2 => format!("v2 a={} b={}", px(self.alpha_inf), px(self.beta_inf)),
            Variant::V3 => format!(
                "v3 a={} b={} {}",
                px(self.alpha_inf),
                px(self.beta_inf),
                self.distance
            ),
            Variant::V3MultiStep => format!(
                "v3xK K={} a={} b={} eps={}",
                self.k_steps,
                px(self.alpha_inf),
                px(self.beta_inf),
                px(self.eps_inf_total)
            ),
            Variant::Oracle => format!("oracle g={}", px(self.gamma_inf)),
        }
    }
}

/// Output of one purification call. Noise norms are computed from the final
/// purified image against the input.
#[derive(Debug, Clone)]
pub struct PurifyResult {
    pub purified: Tensor,
    /// Randomly perturbed reference image, when the variant uses one.
    pub reference: Option<Tensor>,
    /// Attention-distance gradient, when the variant computes one.
    pub grad: Option<Tensor>,
    pub noise_l1: f64,
    pub noise_linf: f64,
    /// Scalar draws made by the variant (step sizes), in draw order.
    pub draws: Vec<f64>,
}

impl PurifyResult {
    fn build(
        input: &Tensor,
        purified: Tensor,
        reference: Option<Tensor>,
        grad: Option<Tensor>,
        draws: Vec<f64>,
    ) -> Result<PurifyResult> {
        let noise_l1 = purified.l1_dist(input)?;
        let noise_linf = purified.linf_dist(input)?;
        Ok(PurifyResult {
            purified,
            reference,
            grad,
            noise_l1,
            noise_linf,
            draws,
        })
    }
}

fn uniform_sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    rng.gen_range(-bound..=bound)
}

fn uniform_pos(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        return 0.0;
    }
    rng.gen_range(0.0..=bound)
}

/// Subtract per-pixel i.i.d. uniform noise in [-alpha, alpha], clamped to [0, 1].
pub fn random_perturb(input: &Tensor, alpha_inf: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = input
        .data()
        .iter()
        .map(|&v| v - uniform_sym(rng, alpha_inf))
        .collect();
    Tensor::new(input.shape(), data)
        .expect("random_perturb preserves shape")
        .clamp01()
}

/// Plain-value distance between two attention tensors.
pub fn attention_distance(a1: &AttentionTensor, a2: &AttentionTensor, kind: DistanceKind) -> Result<f64> {
    if !a1.same_shape(a2) {
        return Err(TensorError::ShapeMismatch {
            op: "attention_distance",
            detail: format!(
                "({}, {}, {}) vs ({}, {}, {})",
                a1.layers(),
                a1.heads(),
                a1.tokens(),
                a2.layers(),
                a2.heads(),
                a2.tokens()
            ),
        }
        .into());
    }
    match kind {
        DistanceKind::Mse => {
            let n = a1.values().len() as f64;
            Ok(a1
                .values()
                .iter()
                .zip(a2.values())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                / n)
        }
        DistanceKind::Kl => {
            let rows = a1.layers() * a1.heads();
            let tokens = a1.tokens();
            let mut total = 0.0;
            for r in 0..rows {
                let p = smoothed_distribution(&a1.values()[r * tokens..(r + 1) * tokens]);
                let q = smoothed_distribution(&a2.values()[r * tokens..(r + 1) * tokens]);
                for (pv, qv) in p.iter().zip(&q) {
                    if *pv > 0.0 {
                        total += pv * (pv / qv).ln();
                    }
                }
            }
            Ok(total / rows as f64)
        }
    }
}

/// Gradient of the attention distance between the input's attention and the
/// attention of a freshly drawn randomly perturbed reference. The reference
/// branch is a constant target; no gradient flows through it.
pub fn f3_grad(
    model: &ToyVlm,
    input: &Tensor,
    question: &TokenSeq,
    alpha_inf: f64,
    distance: DistanceKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let reference = random_perturb(input, alpha_inf, rng);
    let (_, ref_attention) = model.forward(&reference, question)?;
    let grad = model.input_grad(
        input,
        question,
        &LossSpec::AttentionDistance {
            reference: &ref_attention,
            kind: distance,
        },
    )?;
    Ok((grad, reference))
}

/// Per-pixel purification magnitudes from a gradient tensor:
/// min-max normalize the gradient globally, amplify by its mean, clip the
/// ratio to [0, 1], scale by `beta_inf`. A constant gradient normalizes to 1
/// everywhere; a zero-mean normalized gradient maps to no perturbation.
pub fn f3_scale(grad: &Tensor, beta_inf: f64) -> Tensor {
    let g = grad.data();
    let g_min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let g_max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = g_max - g_min < 1e-12;
    let g_norm: Vec<f64> = if degenerate {
        vec![1.0; g.len()]
    } else {
        g.iter().map(|&v| (v - g_min) / (g_max - g_min)).collect()
    };
    let mean = g_norm.iter().sum::<f64>() / g_norm.len() as f64;
    let data: Vec<f64> = g_norm
        .iter()
        .map(|&v| {
            let ratio = if mean < 1e-12 { 0.0 } else { v / mean };
            beta_inf * f64::max(0.0, f64::min(ratio, 1.0))
        })
        .collect();
    Tensor::new(grad.shape(), data).expect("f3_scale preserves shape")
}

/// Direction-only purification: one sign step of random magnitude toward the
/// reference attention.
pub fn f3_v2(
    model: &ToyVlm,
    input: &Tensor,
    question: &TokenSeq,
    alpha_inf: f64,
    beta_inf: f64,
    distance: DistanceKind,
    rng: &mut ChaCha8Rng,
) -> Result<PurifyResult> {
    let (grad, reference) = f3_grad(model, input, question, alpha_inf, distance, rng)?;
    let beta = uniform_pos(rng, beta_inf);
    let purified = input.zip(&grad, |x, g| x - beta * signum0(g))?.clamp01();
    PurifyResult::build(input, purified, Some(reference), Some(grad), vec![beta])
}

/// Magnitude-scaled purification: per-pixel step sizes from the normalized
/// gradient, direction from its sign.
pub fn f3_v3(
    model: &ToyVlm,
    input: &Tensor,
    question: &TokenSeq,
    alpha_inf: f64,
    beta_inf: f64,
    distance: DistanceKind,
    rng: &mut ChaCha8Rng,
) -> Result<PurifyResult> {
    let (grad, reference) = f3_grad(model, input, question, alpha_inf, distance, rng)?;
    let magnitude = f3_scale(&grad, beta_inf);
    let mut data = Vec::with_capacity(input.numel());
    for ((&x, &g), &m) in input
        .data()
        .iter()
        .zip(grad.data())
        .zip(magnitude.data())
    {
        data.push(x - m * signum0(g));
    }
    let purified = Tensor::new(input.shape(), data)?.clamp01();
    PurifyResult::build(input, purified, Some(reference), Some(grad), Vec::new())
}

/// K magnitude-scaled steps, re-drawing the reference from the current
/// iterate each step, projecting onto the l-inf ball of radius
/// `eps_inf_total` around the original input after every step.
#[allow(clippy::too_many_arguments)]
pub fn f3_multistep(
    model: &ToyVlm,
    input: &Tensor,
    question: &TokenSeq,
    alpha_inf: f64,
    beta_inf_step: f64,
    k_steps: usize,
    eps_inf_total: f64,
    distance: DistanceKind,
    rng: &mut ChaCha8Rng,
) -> Result<PurifyResult> {
    if k_steps == 0 {
        return Err(Error::Config("k_steps must be >= 1".into()));
    }
    let mut current = input.clone();
    let mut last_grad = None;
    let mut last_reference = None;
    for _ in 0..k_steps {
        let step = f3_v3(
            model,
            &current,
            question,
            alpha_inf,
            beta_inf_step,
            distance,
            rng,
        )?;
        // project each pixel back into the total budget around the original
        current = step
            .purified
            .zip(input, |p, orig| {
                p.clamp(orig - eps_inf_total, orig + eps_inf_total)
            })?
            .clamp01();
        last_grad = step.grad;
        last_reference = step.reference;
    }
    PurifyResult::build(input, current, last_reference, last_grad, Vec::new())
}

/// Analysis-only purification toward the true clean attention.
pub fn oracle_purify(
    model: &ToyVlm,
    input: &Tensor,
    clean: &Tensor,
    question: &TokenSeq,
    gamma_inf: f64,
    distance: DistanceKind,
    rng: &mut ChaCha8Rng,
) -> Result<PurifyResult> {
    let (_, clean_attention) = model.forward(clean, question)?;
    let grad = model.input_grad(
        input,
        question,
        &LossSpec::AttentionDistance {
            reference: &clean_attention,
            kind: distance,
        },
    )?;
    let gamma = uniform_pos(rng, gamma_inf);
    let purified = input.zip(&grad, |x, g| x - gamma * signum0(g))?.clamp01();
    PurifyResult::build(input, purified, None, Some(grad), vec![gamma])
}

/// Dispatch on the configured variant. `clean` is required by the oracle
/// variant only.
pub fn purify(
    model: &ToyVlm,
    cfg: &PurifyConfig,
    input: &Tensor,
    question: &TokenSeq,
    clean: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<PurifyResult> {
    cfg.validate()?;
    match cfg.variant {
        Variant::V1 => {
            let purified = random_perturb(input, cfg.alpha_inf, rng);
            PurifyResult::build(input, purified, None, None, Vec::new())
        }
        Variant::V2 => f3_v2(
            model,
            input,
            question,
            cfg.alpha_inf,
            cfg.beta_inf,
            cfg.distance,
            rng,
        ),
        Variant::V3 => f3_v3(
            model,
            input,
            question,
            cfg.alpha_inf,
            cfg.beta_inf,
            cfg.distance,
            rng,
        ),
        Variant::V3MultiStep => f3_multistep(
            model,
            input,
            question,
            cfg.alpha_inf,
            cfg.beta_inf,
            cfg.k_steps,
            cfg.eps_inf_total,
            cfg.distance,
            rng,
        ),
        Variant::Oracle => {
            let clean = clean.ok_or_else(|| {
                Error::Config("oracle purification needs the clean image".into())
            })?;
            oracle_purify(
                model,
                input,
                clean,
                question,
                cfg.gamma_inf,
                cfg.distance,
                rng,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionTensor, ModelConfig};
    use crate::rng::substream;

    fn tiny_model() -> ToyVlm {
        ToyVlm::init(ModelConfig {
            image_h: 8,
            image_w: 8,
            layers: 2,
            heads: 2,
            dim: 16,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_input(model: &ToyVlm) -> (Tensor, TokenSeq) {
        let image = Tensor::from_fn(&model.cfg.image_shape(), |i| ((i * 29) % 23) as f64 / 23.0);
        let q = TokenSeq::new(vec![9, 10, 0], model.cfg.vocab_size).unwrap();
        (image, q)
    }

    #[test]
    fn random_perturb_zero_alpha_is_identity() {
        let x = Tensor::from_fn(&[4, 4, 3], |i| (i % 5) as f64 / 5.0);
        let mut rng = substream(1, &[]);
        assert_eq!(random_perturb(&x, 0.0, &mut rng), x);
    }

    #[test]
    fn random_perturb_respects_bound_before_clamping() {
        let x = Tensor::from_fn(&[100], |_| 0.5);
        let alpha = 16.0 / 255.0;
        for trial in 0..50 {
            let mut rng = substream(trial, &[]);
            let r = random_perturb(&x, alpha, &mut rng);
            assert!(r.linf_dist(&x).unwrap() <= alpha + 1e-15);
            assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn random_perturb_noise_is_uniform_ks_test() {
        // 1e6 draws with the input at 0.5 and alpha small enough that no
        // clamping occurs; Kolmogorov-Smirnov against U[-a, a] at p > 0.01.
        let a = 0.3;
        let x = Tensor::from_fn(&[1_000_000], |_| 0.5);
        let mut rng = substream(1234, &[]);
        let r = random_perturb(&x, a, &mut rng);
        let mut noise: Vec<f64> = x
            .data()
            .iter()
            .zip(r.data())
            .map(|(&xv, &rv)| xv - rv)
            .collect();
        noise.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let n = noise.len() as f64;
        let mut d_stat = 0.0f64;
        for (i, &v) in noise.iter().enumerate() {
            let cdf = ((v + a) / (2.0 * a)).clamp(0.0, 1.0);
            let hi = (i + 1) as f64 / n;
            let lo = i as f64 / n;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        // asymptotic Kolmogorov p-value
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d_stat;
        let mut p = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        assert!(p > 0.01, "KS statistic {d_stat}, p {p}");
    }

    #[test]
    fn attention_distance_identical_is_zero() {
        let a = AttentionTensor::new(2, 2, 4, vec![0.05; 16]).unwrap();
        assert_eq!(attention_distance(&a, &a, DistanceKind::Mse).unwrap(), 0.0);
        assert!(attention_distance(&a, &a, DistanceKind::Kl).unwrap().abs() < 1e-12);
    }

    #[test]
    fn attention_distance_hand_examples() {
        // single row [0.5, 0.5] vs [0.25, 0.75]: KL = 0.5 ln 2 + 0.5 ln(2/3)
        let a1 = AttentionTensor::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let a2 = AttentionTensor::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = attention_distance(&a1, &a2, DistanceKind::Kl).unwrap();
        assert!((kl - expected).abs() < 1e-6, "kl {kl} vs {expected}");

        // single row [0, 1] vs [1, 1]: MSE = ((0-1)^2 + 0) / 2 = 0.5
        let b1 = AttentionTensor::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let b2 = AttentionTensor::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(attention_distance(&b1, &b2, DistanceKind::Mse).unwrap(), 0.5);
    }

    #[test]
    fn attention_distance_shape_mismatch_is_error() {
        let a1 = AttentionTensor::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let a2 = AttentionTensor::new(1, 2, 2, vec![0.25; 4]).unwrap();
        assert!(attention_distance(&a1, &a2, DistanceKind::Mse).is_err());
    }

    #[test]
    fn f3_scale_hand_examples() {
        // g = [1, 3] -> g_norm [0, 1], mean 0.5, ratios [0, 2] -> clamped [0, 1]
        let g = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let beta = 32.0 / 255.0;
        let m = f3_scale(&g, beta);
        assert_eq!(m.data(), &[0.0, beta]);

        // g = [0, 1, 2] -> g_norm [0, 0.5, 1], mean 0.5 -> ratios [0, 1, 2] -> [0, 1, 1]
        let g = Tensor::new(&[3], vec![0.0, 1.0, 2.0]).unwrap();
        let m = f3_scale(&g, beta);
        assert_eq!(m.data(), &[0.0, beta, beta]);

        // constant g -> g_norm defined as 1 everywhere -> magnitude beta everywhere
        let g = Tensor::new(&[3], vec![0.7; 3]).unwrap();
        let m = f3_scale(&g, beta);
        assert_eq!(m.data(), &[beta, beta, beta]);
    }

    #[test]
    fn f3_scale_outputs_lie_in_zero_beta() {
        let mut rng = substream(5, &[]);
        use rand::Rng;
        for _ in 0..50 {
            let g = Tensor::from_fn(&[64], |_| rng.gen_range(-3.0..3.0));
            let beta = rng.gen_range(0.0..0.2);
            let m = f3_scale(&g, beta);
            assert!(m.data().iter().all(|&v| (0.0..=beta + 1e-15).contains(&v)));
        }
    }

    #[test]
    fn f3_grad_zero_alpha_gives_zero_gradient() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut rng = substream(3, &[]);
        let (g, x_ref) = f3_grad(&model, &x, &q, 0.0, DistanceKind::Mse, &mut rng).unwrap();
        assert_eq!(x_ref, x);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f3_grad_varies_with_rng_draw() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut differing = 0;
        for trial in 0..50u64 {
            let mut ra = substream(trial, &[0]);
            let mut rb = substream(trial, &[1]);
            let (ga, _) = f3_grad(&model, &x, &q, 16.0 / 255.0, DistanceKind::Mse, &mut ra).unwrap();
            let (gb, _) = f3_grad(&model, &x, &q, 16.0 / 255.0, DistanceKind::Mse, &mut rb).unwrap();
            if ga.data() != gb.data() {
                differing += 1;
            }
        }
        assert!(differing >= 48, "only {differing}/50 gradient draws differed");
    }

    #[test]
    fn v2_zero_beta_is_identity_and_budget_holds() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut rng = substream(4, &[]);
        let r = f3_v2(&model, &x, &q, 16.0 / 255.0, 0.0, DistanceKind::Mse, &mut rng).unwrap();
        assert_eq!(r.purified, x);

        let beta = 32.0 / 255.0;
        for trial in 0..20 {
            let mut rng = substream(trial, &[7]);
            let r = f3_v2(&model, &x, &q, 16.0 / 255.0, beta, DistanceKind::Mse, &mut rng).unwrap();
            assert!(r.noise_linf <= beta + 1e-15);
            assert!(r.purified.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn v3_budget_and_support() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let beta = 32.0 / 255.0;
        for trial in 0..20 {
            let mut rng = substream(trial, &[8]);
            let r = f3_v3(&model, &x, &q, 16.0 / 255.0, beta, DistanceKind::Mse, &mut rng).unwrap();
            assert!(r.noise_linf <= beta + 1e-15);
            // purification noise is zero exactly where sign(g) = 0
            let g = r.grad.as_ref().unwrap();
            for ((&p, &orig), &gv) in r.purified.data().iter().zip(x.data()).zip(g.data()) {
                if crate::tensor::signum0(gv) == 0.0 {
                    assert_eq!(p, orig);
                }
            }
        }
    }

    #[test]
    fn v3_zero_beta_is_identity() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut rng = substream(4, &[]);
        let r = f3_v3(&model, &x, &q, 16.0 / 255.0, 0.0, DistanceKind::Mse, &mut rng).unwrap();
        assert_eq!(r.purified, x);
    }

    #[test]
    fn multistep_k1_matches_v3_bit_exactly() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let beta = 8.0 / 255.0;
        let mut r1 = substream(11, &[]);
        let mut r2 = substream(11, &[]);
        let single = f3_v3(&model, &x, &q, 16.0 / 255.0, beta, DistanceKind::Mse, &mut r1).unwrap();
        let multi = f3_multistep(
            &model,
            &x,
            &q,
            16.0 / 255.0,
            beta,
            1,
            16.0 / 255.0,
            DistanceKind::Mse,
            &mut r2,
        )
        .unwrap();
        assert!(single
            .purified
            .data()
            .iter()
            .zip(multi.purified.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn multistep_total_budget_holds() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let eps = 16.0 / 255.0;
        for trial in 0..10 {
            let mut rng = substream(trial, &[12]);
            let r = f3_multistep(
                &model,
                &x,
                &q,
                16.0 / 255.0,
                4.0 / 255.0,
                8,
                eps,
                DistanceKind::Mse,
                &mut rng,
            )
            .unwrap();
            assert!(r.noise_linf <= eps + 1e-15);
            assert!(r.purified.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn multistep_reported_l1_matches_recomputation() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut rng = substream(13, &[]);
        let r = f3_multistep(
            &model,
            &x,
            &q,
            16.0 / 255.0,
            4.0 / 255.0,
            4,
            16.0 / 255.0,
            DistanceKind::Mse,
            &mut rng,
        )
        .unwrap();
        // independent recomputation: mean absolute perturbation times count
        let n = x.numel() as f64;
        let mean_abs: f64 = r
            .purified
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n;
        assert!((r.noise_l1 - mean_abs * n).abs() < 1e-12);
        assert_eq!(r.noise_l1, r.purified.l1_dist(&x).unwrap());
    }

    #[test]
    fn oracle_fixed_point_at_clean_input() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let mut rng = substream(14, &[]);
        let r = oracle_purify(&model, &x, &x, &q, 32.0 / 255.0, DistanceKind::Mse, &mut rng).unwrap();
        // distance to own attention is zero, gradient zero, sign(0) = 0
        assert_eq!(r.purified, x);
        assert!(r.grad.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_budget_holds_over_many_trials() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let gamma = 32.0 / 255.0;
        let adv = x.map(|v| (v + 0.02).min(1.0));
        for trial in 0..50 {
            let mut rng = substream(trial, &[15]);
            let r = oracle_purify(&model, &adv, &x, &q, gamma, DistanceKind::Mse, &mut rng).unwrap();
            assert!(r.purified.linf_dist(&adv).unwrap() <= gamma + 1e-15);
        }
    }

    #[test]
    fn purify_result_norms_match_recomputation() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let cfg = PurifyConfig::default();
        let mut rng = substream(16, &[]);
        let r = purify(&model, &cfg, &x, &q, None, &mut rng).unwrap();
        assert_eq!(r.noise_l1, r.purified.l1_dist(&x).unwrap());
        assert_eq!(r.noise_linf, r.purified.linf_dist(&x).unwrap());
    }

    #[test]
    fn purify_is_deterministic_given_seed_stream() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let cfg = PurifyConfig::default();
        let run = || {
            let mut rng = substream(17, &[3]);
            purify(&model, &cfg, &x, &q, None, &mut rng).unwrap().purified
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn oracle_variant_without_clean_image_is_error() {
        let model = tiny_model();
        let (x, q) = tiny_input(&model);
        let cfg = PurifyConfig {
            variant: Variant::Oracle,
            ..PurifyConfig::default()
        };
        let mut rng = substream(18, &[]);
        assert!(purify(&model, &cfg, &x, &q, None, &mut rng).is_err());
    }

    #[test]
    fn multistep_config_requires_consistent_budget() {
        let cfg = PurifyConfig {
            variant: Variant::V3MultiStep,
            beta_inf: 32.0 / 255.0,
            eps_inf_total: 16.0 / 255.0,
            ..PurifyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
