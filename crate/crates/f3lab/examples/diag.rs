// scratch diagnostics (deleted before release)
use f3lab::attack::{attack_dataset, AttackConfig};
use f3lab::data::{generate, Split, DEFAULT_MIX};
use f3lab::model::{DistanceKind, ToyVlm};
use f3lab::purify::{attention_distance, random_perturb};
use f3lab::rng::substream;
use rayon::prelude::*;
use std::path::Path;

fn main() {
    let model = ToyVlm::load(Path::new("/tmp/probe_model.ckpt")).unwrap();
    let eval_set = generate(100, 12, DEFAULT_MIX, Split::Eval).unwrap();
    let adv = attack_dataset(&model, &eval_set, &AttackConfig { seed: 1, ..AttackConfig::pgd_default() }, None).unwrap();

    let stats: Vec<(f64, f64, f64, f64)> = eval_set.samples.par_iter().zip(&adv.images).enumerate().map(|(i, (s, adv_img))| {
        let (_, a_clean) = model.forward(&s.image, &s.question).unwrap();
        let (_, a_adv) = model.forward(adv_img, &s.question).unwrap();
        let mut rng = substream(99, &[i as u64]);
        // noise on CLEAN image (16/255)
        let noisy_clean = random_perturb(&s.image, 16.0/255.0, &mut rng);
        let (_, a_nc) = model.forward(&noisy_clean, &s.question).unwrap();
        // noise on ADV image (16/255) = x^R
        let xr = random_perturb(adv_img, 16.0/255.0, &mut rng);
        let (_, a_xr) = model.forward(&xr, &s.question).unwrap();
        let d = |a: &_, b: &_| attention_distance(a, b, DistanceKind::Mse).unwrap();
        (d(&a_clean, &a_adv), d(&a_clean, &a_nc), d(&a_clean, &a_xr), d(&a_adv, &a_xr))
    }).collect();
    let n = stats.len() as f64;
    let mean = |f: fn(&(f64,f64,f64,f64))->f64| stats.iter().map(f).sum::<f64>() / n;
    println!("mse(A_clean, A_adv)           = {:.6}", mean(|s| s.0));
    println!("mse(A_clean, A_clean+noise16) = {:.6}", mean(|s| s.1));
    println!("mse(A_clean, A_xR)            = {:.6}", mean(|s| s.2));
    println!("mse(A_adv,   A_xR)            = {:.6}", mean(|s| s.3));
}
