// scratch phenomenology probe (deleted before release)
use f3lab::attack::{attack_dataset, AttackConfig};
use f3lab::data::{generate, Split, DEFAULT_MIX};
use f3lab::model::{train, DistanceKind, ModelConfig, ToyVlm};
use f3lab::purify::{attention_distance, purify, PurifyConfig, Variant};
use f3lab::rng::substream;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

fn main() {
    let n_eval: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let ckpt = Path::new("/tmp/probe_model.ckpt");
    let cfg = ModelConfig::default();

    let model = if ckpt.exists() {
        let m = ToyVlm::load(ckpt).unwrap();
        if m.cfg == cfg { m } else { train_new(&cfg, ckpt) }
    } else {
        train_new(&cfg, ckpt)
    };

    let eval_set = generate(n_eval, 12, DEFAULT_MIX, Split::Eval).unwrap();
    let acc = |images: &[f3lab::Tensor]| -> f64 {
        let correct: usize = eval_set.samples.par_iter().zip(images).map(|(s, img)| {
            (model.predict(img, &s.question).unwrap() == s.answer_label) as usize
        }).sum();
        100.0 * correct as f64 / images.len() as f64
    };
    let clean_imgs: Vec<_> = eval_set.samples.iter().map(|s| s.image.clone()).collect();
    println!("clean acc = {:.2}", acc(&clean_imgs));

    let t0 = Instant::now();
    let adv = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::pgd_default() }, None).unwrap();
    println!("pgd acc = {:.2}  ({:.1}s)", acc(&adv.images), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let cw = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::cw_default() }, None).unwrap();
    println!("cw acc = {:.2}  ({:.1}s)  mean_linf={:.4}", acc(&cw.images), t0.elapsed().as_secs_f64(),
        cw.norms.iter().map(|n| n.1).sum::<f64>() / cw.norms.len() as f64);

    // purification probe on PGD images
    let mean_mse = |images: &[f3lab::Tensor]| -> f64 {
        eval_set.samples.par_iter().zip(images).map(|(s, img)| {
            let (_, a_clean) = model.forward(&s.image, &s.question).unwrap();
            let (_, a) = model.forward(img, &s.question).unwrap();
            attention_distance(&a_clean, &a, DistanceKind::Mse).unwrap()
        }).sum::<f64>() / images.len() as f64
    };
    println!("mse(clean, adv) = {:.6}", mean_mse(&adv.images));

    for (name, variant, a, b) in [
        ("v1 a=32", Variant::V1, 32.0/255.0, 0.0),
        ("v2 a=16 b=32", Variant::V2, 16.0/255.0, 32.0/255.0),
        ("v3 a=16 b=32", Variant::V3, 16.0/255.0, 32.0/255.0),
        ("oracle g=32", Variant::Oracle, 0.0, 0.0),
    ] {
        let t0 = Instant::now();
        let mut accs = vec![];
        let mut mses = vec![];
        for seed in 0..5u64 {
            let pcfg = PurifyConfig {
                variant, alpha_inf: a, beta_inf: b, gamma_inf: 32.0/255.0,
                seed, ..PurifyConfig::default()
            };
            let purified: Vec<_> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, img))| {
                let mut rng = substream(seed, &[i as u64]);
                purify(&model, &pcfg, img, &s.question, Some(&s.image), &mut rng).unwrap().purified
            }).collect();
            accs.push(acc(&purified));
            mses.push(mean_mse(&purified));
        }
        let m = accs.iter().sum::<f64>() / 5.0;
        let mm = mses.iter().sum::<f64>() / 5.0;
        println!("{name}: acc={m:.2} (seeds: {:?}) mse={mm:.6} ({:.1}s)", accs.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>(), t0.elapsed().as_secs_f64());
    }
}

fn train_new(cfg: &ModelConfig, ckpt: &Path) -> ToyVlm {
    let train_set = generate(2000, 11, DEFAULT_MIX, Split::Train).unwrap();
    let t0 = Instant::now();
    let out = train(cfg, &train_set, 30, 0.15, 42).unwrap();
    println!("trained: train_acc={:.2} ({:.0}s)", out.final_train_accuracy, t0.elapsed().as_secs_f64());
    out.model.save(ckpt).unwrap();
    out.model
}
