//! White-box pixel attacks against the toy model: PGD, an unconstrained
//! C&W-style attack, and EOT-PGD for attacking randomized defenses.

mod store;

pub use store::{PerturbedDataset, Provenance};

use crate::error::{Error, Result};
use crate::model::{LossSpec, TokenSeq, ToyVlm};
use crate::purify::{purify, PurifyConfig};
use crate::rng::substream;
use crate::tensor::{signum0, Tensor};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Pgd,
    Cw,
    EotPgd,
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackMethod::Pgd => write!(f, "pgd"),
            AttackMethod::Cw => write!(f, "cw"),
            AttackMethod::EotPgd => write!(f, "eot_pgd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub steps: usize,
    /// Per-step magnitude in pixel units (images live in [0, 1]).
    pub step_size: f64,
    /// l-inf budget for pgd / eot_pgd.
    pub eps_inf: f64,
    /// l2-penalty constant for cw.
    pub c: f64,
    /// Independent defense draws averaged per eot_pgd step.
    pub eot_samples: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// PGD: 20 iterations, step 2/255, budget 8/255.
    pub fn pgd_default() -> Self {
        AttackConfig {
            method: AttackMethod::Pgd,
            steps: 20,
            step_size: 2.0 / 255.0,
            eps_inf: 8.0 / 255.0,
            c: 0.0,
            eot_samples: 1,
            seed: 0,
        }
    }

    /// C&W-style: 50 steps of size 0.01, penalty constant 0.005.
    pub fn cw_default() -> Self {
        AttackConfig {
            method: AttackMethod::Cw,
            steps: 50,
            step_size: 0.01,
            eps_inf: 0.0,
            c: 0.005,
            eot_samples: 1,
            seed: 0,
        }
    }

    /// EOT-PGD: 20 attack steps, 10 defense draws per step.
    pub fn eot_default() -> Self {
        AttackConfig {
            method: AttackMethod::EotPgd,
            steps: 20,
            step_size: 2.0 / 255.0,
            eps_inf: 8.0 / 255.0,
            c: 0.0,
            eot_samples: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        match self.method {
            AttackMethod::Pgd | AttackMethod::EotPgd => {
                if self.eps_inf <= 0.0 {
                    return Err(Error::Config("eps_inf must be > 0 for pgd/eot_pgd".into()));
                }
            }
            AttackMethod::Cw => {
                if self.c < 0.0 {
                    return Err(Error::Config("c must be >= 0 for cw".into()));
                }
            }
        }
        if self.method == AttackMethod::EotPgd && self.eot_samples == 0 {
            return Err(Error::Config("eot_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.method {
            AttackMethod::Pgd => format!(
                "pgd s={} step={:.1}/255 eps={:.1}/255",
                self.steps,
                self.step_size * 255.0,
                self.eps_inf * 255.0
            ),
            AttackMethod::Cw => format!("cw s={} step={} c={}", self.steps, self.step_size, self.c),
            AttackMethod::EotPgd => format!(
                "eot_pgd s={} eot={} eps={:.1}/255",
                self.steps, self.eot_samples, self.eps_inf * 255.0
            ),
        }
    }
}

/// The part of a sample an attack needs.
pub struct AttackTarget<'a> {
    pub image: &'a Tensor,
    pub question: &'a TokenSeq,
    pub label: usize,
}

fn project_ball(candidate: &Tensor, origin: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(candidate
        .zip(origin, |c, o| c.clamp(o - eps, o + eps))?
        .clamp01())
}

/// Sign-gradient ascent on the answer loss with l-inf projection and pixel
/// clamping after every step.
pub fn pgd_attack(model: &ToyVlm, target: &AttackTarget, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut adv = target.image.clone();
    for _ in 0..cfg.steps {
        let grad = model.input_grad(
            &adv,
            target.question,
            &LossSpec::Answer {
                label: target.label,
            },
        )?;
        let stepped = adv.zip(&grad, |x, g| x + cfg.step_size * signum0(g))?;
        adv = project_ball(&stepped, target.image, cfg.eps_inf)?;
    }
    Ok(adv)
}

/// Ascent on `answer_loss(x') - c * ||x - x'||_2`, unconstrained except for
/// pixel clamping. The smooth answer loss is ascended with its raw gradient;
/// the nonsmooth l2 penalty is applied exactly as a proximal shrink toward
/// the original after each step, so the iterates stay at the original in the
/// large-`c` limit.
pub fn cw_attack(model: &ToyVlm, target: &AttackTarget, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut adv = target.image.clone();
    for _ in 0..cfg.steps {
        let grad = model.input_grad(
            &adv,
            target.question,
            &LossSpec::Answer {
                label: target.label,
            },
        )?;
        let stepped = adv.zip(&grad, |x, g| x + cfg.step_size * g)?.clamp01();
        let l2: f64 = stepped
            .data()
            .iter()
            .zip(target.image.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let shrink = if l2 > 0.0 {
            f64::max(0.0, 1.0 - cfg.step_size * cfg.c / l2)
        } else {
            0.0
        };
        adv = stepped.zip(target.image, |s, o| o + shrink * (s - o))?;
    }
    Ok(adv)
}

/// EOT-PGD against a randomized purification defense. Each step averages,
/// over independent defense draws, the answer-loss gradient evaluated at the
/// purified point (straight-through: the defense's noise is treated as
/// constant, and gradient is blocked where the defense's final clamp was
/// active).
pub fn eot_pgd_adaptive(
    model: &ToyVlm,
    purifier: &PurifyConfig,
    target: &AttackTarget,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    purifier.validate()?;
    let mut adv = target.image.clone();
    for _ in 0..cfg.steps {
        let mut acc = vec![0.0; adv.numel()];
        for _ in 0..cfg.eot_samples {
            let defended = purify(model, purifier, &adv, target.question, None, rng)?;
            let grad = model.input_grad(
                &defended.purified,
                target.question,
                &LossSpec::Answer {
                    label: target.label,
                },
            )?;
            for ((a, &g), &p) in acc
                .iter_mut()
                .zip(grad.data())
                .zip(defended.purified.data())
            {
                if p > 0.0 && p < 1.0 {
                    *a += g;
                }
            }
        }
        let n = cfg.eot_samples as f64;
        let stepped = Tensor::new(
            adv.shape(),
            adv.data()
                .iter()
                .zip(&acc)
                .map(|(&x, &g)| x + cfg.step_size * signum0(g / n))
                .collect(),
        )?;
        adv = project_ball(&stepped, target.image, cfg.eps_inf)?;
    }
    Ok(adv)
}

/// Fraction of positions whose answers differ.
pub fn attack_success_rate(before: &[usize], after: &[usize]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::Config(format!(
            "answer lists have different lengths: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(Error::Config("answer lists are empty".into()));
    }
    let differing = before.iter().zip(after).filter(|(b, a)| b != a).count();
    Ok(differing as f64 / before.len() as f64)
}

/// Attack every sample of a dataset in parallel. Per-sample RNG substreams
/// derive from `(cfg.seed, sample index)`, so results are independent of
/// worker count; `purifier` is required by (and only by) eot_pgd.
pub fn attack_dataset(
    model: &ToyVlm,
    dataset: &crate::data::Dataset,
    cfg: &AttackConfig,
    purifier: Option<&PurifyConfig>,
) -> Result<PerturbedDataset> {
    cfg.validate()?;
    if cfg.method == AttackMethod::EotPgd && purifier.is_none() {
        return Err(Error::Config("eot_pgd needs a purifier config".into()));
    }
    let images: Vec<Result<Tensor>> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let target = AttackTarget {
                image: &sample.image,
                question: &sample.question,
                label: sample.answer_label,
            };
            match cfg.method {
                AttackMethod::Pgd => pgd_attack(model, &target, cfg),
                AttackMethod::Cw => cw_attack(model, &target, cfg),
                AttackMethod::EotPgd => {
                    let mut rng = substream(cfg.seed, &[i as u64]);
                    eot_pgd_adaptive(
                        model,
                        purifier.expect("checked above"),
                        &target,
                        cfg,
                        &mut rng,
                    )
                }
            }
            .map_err(|e| Error::in_stage("attack", i, e))
        })
        .collect();

    let mut out = Vec::with_capacity(images.len());
    for r in images {
        out.push(r?);
    }
    PerturbedDataset::from_attack(dataset, out, cfg.clone())
}
