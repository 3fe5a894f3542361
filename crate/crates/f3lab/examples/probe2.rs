// scratch full-gate probe (deleted before release)
use f3lab::attack::{attack_dataset, AttackConfig};
use f3lab::data::{generate, Split, DEFAULT_MIX};
use f3lab::model::{train, DistanceKind, ModelConfig, ToyVlm};
use f3lab::purify::{attention_distance, purify, random_perturb, PurifyConfig, Variant};
use f3lab::rng::substream;
use rayon::prelude::*;
use std::path::Path;

fn main() {
    let ckpt = Path::new("/tmp/probe2_model.ckpt");
    let cfg = ModelConfig::default();
    let model = if ckpt.exists() {
        ToyVlm::load(ckpt).unwrap()
    } else {
        let train_set = generate(2000, 11, DEFAULT_MIX, Split::Train).unwrap();
        let out = train(&cfg, &train_set, 40, 0.15, 42).unwrap();
        println!("trained: train_acc={:.2}", out.final_train_accuracy);
        out.model.save(ckpt).unwrap();
        out.model
    };
    let eval_set = generate(200, 12, DEFAULT_MIX, Split::Eval).unwrap();
    let acc = |images: &Vec<f3lab::Tensor>| -> f64 {
        let c: usize = eval_set.samples.par_iter().zip(images).map(|(s, img)| {
            (model.predict(img, &s.question).unwrap() == s.answer_label) as usize
        }).sum();
        100.0 * c as f64 / images.len() as f64
    };
    let clean: Vec<_> = eval_set.samples.iter().map(|s| s.image.clone()).collect();
    println!("clean acc = {:.2}", acc(&clean));
    let pgd = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::pgd_default() }, None).unwrap();
    println!("pgd acc = {:.2}", acc(&pgd.images));
    let cw = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::cw_default() }, None).unwrap();
    println!("cw acc = {:.2}", acc(&cw.images));
    for (aname, adv) in [("PGD", &pgd), ("CW", &cw)] {
    println!("==== attack set: {aname}");

    let mmse = |images: &Vec<f3lab::Tensor>| -> f64 {
        eval_set.samples.par_iter().zip(images).map(|(s, img)| {
            let (_, ac) = model.forward(&s.image, &s.question).unwrap();
            let (_, a) = model.forward(img, &s.question).unwrap();
            attention_distance(&ac, &a, DistanceKind::Mse).unwrap()
        }).sum::<f64>() / images.len() as f64
    };
    let mse_adv = mmse(&adv.images);
    println!("mse(clean, adv) = {mse_adv:.6}");

    // criterion 7 drift curve: x^R over alpha grid (5 seeds)
    print!("drift mse over alpha: ");
    for a255 in [2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let xr: Vec<_> = adv.images.par_iter().enumerate().map(|(i, img)| {
                let mut rng = substream(seed, &[i as u64]);
                random_perturb(img, a255 / 255.0, &mut rng)
            }).collect();
            total += mmse(&xr);
        }
        print!("{a255}:{:.6} ", total / 5.0);
    }
    println!();
    // v1 accuracy over alpha grid (5 seeds)
    print!("v1 acc over alpha: ");
    for a255 in [2.0, 4.0, 8.0, 16.0, 32.0] {
        let mut total = 0.0;
        for seed in 0..5u64 {
            let xr: Vec<_> = adv.images.par_iter().enumerate().map(|(i, img)| {
                let mut rng = substream(seed, &[i as u64]);
                random_perturb(img, a255 / 255.0, &mut rng)
            }).collect();
            total += acc(&xr);
        }
        print!("{a255}:{:.1} ", total / 5.0);
    }
    println!();

    for (name, variant, a, b, k) in [
        ("v2 16/32", Variant::V2, 16.0, 32.0, 1usize),
        ("v3 16/32", Variant::V3, 16.0, 32.0, 1),
        ("oracle 32", Variant::Oracle, 16.0, 32.0, 1),
        ("v3x8 b4 e16", Variant::V3MultiStep, 16.0, 4.0, 8),
    ] {
        let mut accs = 0.0;
        let mut mses = 0.0;
        let mut l1s = 0.0;
        for seed in 0..5u64 {
            let pcfg = PurifyConfig {
                variant, alpha_inf: a / 255.0, beta_inf: b / 255.0, gamma_inf: 32.0 / 255.0,
                k_steps: k, eps_inf_total: 16.0 / 255.0, seed, ..PurifyConfig::default()
            };
            let imgs: Vec<_> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, img))| {
                let mut rng = substream(seed, &[i as u64]);
                purify(&model, &pcfg, img, &s.question, Some(&s.image), &mut rng).unwrap().purified
            }).collect();
            accs += acc(&imgs);
            mses += mmse(&imgs);
            l1s += imgs.iter().zip(&adv.images).map(|(p, o)| p.l1_dist(o).unwrap()).sum::<f64>() / imgs.len() as f64;
        }
        println!("{name}: acc={:.2} mse={:.6} l1={:.3}", accs / 5.0, mses / 5.0, l1s / 5.0);
    }

    // kl distance variant
    for a255 in [8.0, 16.0] {
        let mut accs = 0.0;
        for seed in 0..5u64 {
            let pcfg = PurifyConfig {
                variant: Variant::V3, alpha_inf: a255 / 255.0, beta_inf: 32.0 / 255.0,
                distance: DistanceKind::Kl, seed, ..PurifyConfig::default()
            };
            let imgs: Vec<_> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, img))| {
                let mut rng = substream(seed, &[i as u64]);
                purify(&model, &pcfg, img, &s.question, Some(&s.image), &mut rng).unwrap().purified
            }).collect();
            accs += acc(&imgs);
        }
        println!("v3-kl a={a255} b=32: acc={:.2}", accs / 5.0);
    }
    } // attack loop
}
// appended: cw-set analysis entrypoint is in main already via args
