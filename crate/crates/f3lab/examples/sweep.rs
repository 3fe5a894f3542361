// scratch design-sweep harness (deleted before release)
use f3lab::attack::{attack_dataset, AttackConfig};
use f3lab::data::{generate, Split, DEFAULT_MIX};
use f3lab::model::{train, DistanceKind, ModelConfig};
use f3lab::purify::{attention_distance, purify, random_perturb, PurifyConfig, Variant};
use f3lab::rng::substream;
use rayon::prelude::*;

fn main() {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(18);
    let cfg = ModelConfig { dim: 48, ..ModelConfig::default() };
    let train_set = generate(1500, 11, DEFAULT_MIX, Split::Train).unwrap();
    let eval_set = generate(120, 12, DEFAULT_MIX, Split::Eval).unwrap();
    let out = train(&cfg, &train_set, epochs, 0.15, 42).unwrap();
    let model = out.model;

    let acc = |images: &[f3lab::Tensor]| -> f64 {
        let c: usize = eval_set.samples.par_iter().zip(images).map(|(s, img)| {
            (model.predict(img, &s.question).unwrap() == s.answer_label) as usize
        }).sum();
        100.0 * c as f64 / images.len() as f64
    };
    let clean_imgs: Vec<_> = eval_set.samples.iter().map(|s| s.image.clone()).collect();
    let clean_acc = acc(&clean_imgs);

    let adv = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::pgd_default() }, None).unwrap();
    let adv_acc = acc(&adv.images);

    // attention stats
    let stats: Vec<(f64, f64)> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, a))| {
        let (_, ac) = model.forward(&s.image, &s.question).unwrap();
        let (_, aa) = model.forward(a, &s.question).unwrap();
        let mut rng = substream(99, &[i as u64]);
        let xr = random_perturb(a, 16.0/255.0, &mut rng);
        let (_, ar) = model.forward(&xr, &s.question).unwrap();
        let d = |x: &_, y: &_| attention_distance(x, y, DistanceKind::Mse).unwrap();
        (d(&ac, &aa), d(&ac, &ar))
    }).collect();
    let n = stats.len() as f64;
    let mse_adv = stats.iter().map(|s| s.0).sum::<f64>() / n;
    let mse_xr = stats.iter().map(|s| s.1).sum::<f64>() / n;

    let prow = |variant: Variant, a: f64, b: f64| -> f64 {
        let mut accs = 0.0;
        for seed in 0..3u64 {
            let pcfg = PurifyConfig { variant, alpha_inf: a, beta_inf: b, seed, ..PurifyConfig::default() };
            let imgs: Vec<_> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, img))| {
                let mut rng = substream(seed, &[i as u64]);
                purify(&model, &pcfg, img, &s.question, Some(&s.image), &mut rng).unwrap().purified
            }).collect();
            accs += acc(&imgs);
        }
        accs / 3.0
    };
    let v1 = prow(Variant::V1, 32.0/255.0, 0.0);
    let v2 = prow(Variant::V2, 16.0/255.0, 32.0/255.0);
    let v3 = prow(Variant::V3, 16.0/255.0, 32.0/255.0);
    let orc = prow(Variant::Oracle, 0.0, 0.0);

    println!("RESULT clean={clean_acc:.1} pgd={adv_acc:.1} mse_adv={mse_adv:.6} mse_xr={mse_xr:.6} v1={v1:.1} v2={v2:.1} v3={v3:.1} oracle={orc:.1}");
}
