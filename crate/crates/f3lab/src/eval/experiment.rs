//! Experiment orchestrator: train-or-load, attack (cached), purification
//! grid, metrics, report, heatmaps. Fully deterministic given the config;
//! worker count never changes any reported number.

use super::config::ExperimentConfig;
use super::heatmap::heatmap_export;
use super::metrics;
use super::report::{
    aggregate, records_to_csv, EvalReport, ReportProvenance, SampleRecord,
};
use crate::attack::{attack_dataset, PerturbedDataset};
use crate::data::{generate, hex_string, Dataset, Split, DEFAULT_MIX};
use crate::error::{Error, Result};
use crate::model::{train, ToyVlm};
use crate::purify::{purify, rp_baseline, PurifyConfig};
use crate::rng::substream;
use crate::tensor::Tensor;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub struct ExperimentOutput {
    pub report: EvalReport,
    pub records: Vec<SampleRecord>,
    pub out_dir: PathBuf,
    pub report_path: PathBuf,
    pub records_path: PathBuf,
}

/// Parse the (override-applied) config text and run the full pipeline. The
/// config hash embedded in the report is the sha-256 of the config text with
/// the `workers` and `out_dir` lines removed: those fields control execution
/// resources and output location, never results, so reports stay
/// byte-identical across worker counts and output roots.
pub fn run_experiment_from_text(text: &str) -> Result<ExperimentOutput> {
    let cfg = ExperimentConfig::from_toml(text)?;
    let mut hasher = Sha256::new();
    let mut in_preamble = true;
    for line in text.lines() {
        if line.trim_start().starts_with('[') {
            in_preamble = false;
        }
        if in_preamble {
            let key = line.split('=').next().unwrap_or("").trim();
            if key == "workers" || key == "out_dir" {
                continue;
            }
        }
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    let config_hash = hex_string(&hasher.finalize());

    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| run_inner(&cfg, &config_hash))
    } else {
        run_inner(&cfg, &config_hash)
    }
}

fn run_inner(cfg: &ExperimentConfig, config_hash: &str) -> Result<ExperimentOutput> {
    let out_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::create_dir_all(out_dir.join("cache"))?;

    // datasets
    let mix = cfg.dataset.mix.unwrap_or(DEFAULT_MIX);
    let train_set = generate(cfg.dataset.train_n, cfg.dataset.train_seed, mix, Split::Train)?;
    let eval_set = generate(cfg.dataset.eval_n, cfg.dataset.eval_seed, mix, Split::Eval)?;

    // model: load the checkpoint if present, otherwise train and save
    let model_cfg = cfg.model.model_config();
    let ckpt_path = out_dir.join(&cfg.model.checkpoint);
    let model = if ckpt_path.exists() {
        let m = ToyVlm::load(&ckpt_path)?;
        if m.cfg != model_cfg {
            return Err(Error::Config(format!(
                "checkpoint {} was built with a different model config",
                ckpt_path.display()
            )));
        }
        m
    } else {
        let outcome = train(
            &model_cfg,
            &train_set,
            cfg.model.epochs,
            cfg.model.learning_rate,
            cfg.model.train_seed,
        )?;
        eprintln!(
            "trained model: final train accuracy {:.2}",
            outcome.final_train_accuracy
        );
        outcome.model.save(&ckpt_path)?;
        outcome.model
    };

    // attack stage, cached by (model, dataset, attack config) hash
    let attack_cfg = cfg.attack.attack_config();
    let attack_purifier = cfg
        .attack
        .purifier
        .as_ref()
        .map(|g| g.purify_config(cfg.attack.purifier_seed.unwrap_or(cfg.seed)));
    let adv = cached_attack(
        &out_dir,
        &model,
        &eval_set,
        &attack_cfg,
        attack_purifier.as_ref(),
    )?;

    // evaluation rows
    let clean_images: Vec<Tensor> = eval_set.samples.iter().map(|s| s.image.clone()).collect();
    let clean_refs: Vec<&Tensor> = clean_images.iter().collect();
    let clean_predictions = metrics::predictions(&model, &eval_set, &clean_refs)?;

    let mut records: Vec<SampleRecord> = Vec::new();
    let mut heatmap_specs: Vec<(String, Vec<Tensor>)> = Vec::new();

    let push_row = |records: &mut Vec<SampleRecord>,
                        heatmaps: &mut Vec<(String, Vec<Tensor>)>,
                        label: &str,
                        seed: u64,
                        images: Vec<Tensor>,
                        bases: &[Tensor],
                        keep_heatmap: bool|
     -> Result<()> {
        let refs: Vec<&Tensor> = images.iter().collect();
        let preds = metrics::predictions(&model, &eval_set, &refs)?;
        let attn = metrics::attention_metrics(&model, &eval_set, &refs)?;
        for (i, ((pred, (mse, kl)), image)) in
            preds.iter().zip(&attn).zip(&images).enumerate()
        {
            records.push(SampleRecord {
                condition: label.to_string(),
                seed,
                sample: i,
                prediction: *pred,
                correct: *pred == eval_set.samples[i].answer_label,
                clean_prediction: clean_predictions[i],
                mse_clean: *mse,
                kl_clean: *kl,
                noise_l1: image.l1_dist(&bases[i])?,
                noise_linf: image.linf_dist(&bases[i])?,
            });
        }
        if keep_heatmap {
            heatmaps.push((label.to_string(), images));
        }
        Ok(())
    };

    push_row(
        &mut records,
        &mut heatmap_specs,
        "clean",
        0,
        clean_images.clone(),
        &clean_images,
        true,
    )?;
    push_row(
        &mut records,
        &mut heatmap_specs,
        "adv",
        0,
        adv.images.clone(),
        &clean_images,
        true,
    )?;

    if cfg.purify.rp_baseline {
        let rp_images: Vec<Tensor> = adv
            .images
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = substream(cfg.seed ^ 0x7270, &[i as u64]);
                rp_baseline(img, &mut rng)
            })
            .collect();
        push_row(
            &mut records,
            &mut heatmap_specs,
            "adv+rp",
            cfg.seed,
            rp_images,
            &adv.images,
            false,
        )?;
    }

    for entry in cfg.conditions() {
        for &seed in &cfg.purify.seeds {
            let pcfg = entry.purify_config(seed);
            let label = pcfg.label();
            let purified = purify_images(&model, &eval_set, &adv.images, &pcfg)?;
            let keep = seed == cfg.purify.seeds[0];
            push_row(
                &mut records,
                &mut heatmap_specs,
                &label,
                seed,
                purified,
                &adv.images,
                keep,
            )?;
        }
        if cfg.purify.clean_impact {
            for &seed in &cfg.purify.seeds {
                let pcfg = entry.purify_config(seed);
                let label = format!("clean+{}", pcfg.label());
                let purified = purify_images(&model, &eval_set, &clean_images, &pcfg)?;
                push_row(
                    &mut records,
                    &mut heatmap_specs,
                    &label,
                    seed,
                    purified,
                    &clean_images,
                    false,
                )?;
            }
        }
    }

    // heatmaps for the first configured samples of each kept row
    if cfg.report.heatmap_samples > 0 {
        let dir = out_dir.join("heatmaps");
        std::fs::create_dir_all(&dir)?;
        for (label, images) in &heatmap_specs {
            let safe: String = label
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '_' })
                .collect();
            for i in 0..cfg.report.heatmap_samples.min(images.len()) {
                let a = metrics::attention_of(&model, &eval_set, i, &images[i])?;
                heatmap_export(&a, &dir.join(format!("sample{i}_{safe}")))?;
            }
        }
    }

    let rows = aggregate(&records)?;
    let report = EvalReport {
        provenance: ReportProvenance {
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            global_seed: cfg.seed,
            dataset_train_seed: cfg.dataset.train_seed,
            dataset_eval_seed: cfg.dataset.eval_seed,
            model_hash: model.content_hash()?,
            attack_label: attack_cfg.label(),
        },
        rows,
    };

    let records_path = out_dir.join("records.csv");
    std::fs::write(&records_path, records_to_csv(&records))?;
    let report_path = out_dir.join("report.txt");
    std::fs::write(&report_path, report.to_text())?;

    Ok(ExperimentOutput {
        report,
        records,
        out_dir,
        report_path,
        records_path,
    })
}

/// Purify every adversarial image under one condition, in parallel, with
/// per-sample RNG substreams derived from `(purify seed, sample index)`.
pub fn purify_images(
    model: &ToyVlm,
    eval_set: &Dataset,
    inputs: &[Tensor],
    pcfg: &PurifyConfig,
) -> Result<Vec<Tensor>> {
    let results: Vec<Result<Tensor>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = substream(pcfg.seed, &[i as u64]);
            purify(
                model,
                pcfg,
                img,
                &eval_set.samples[i].question,
                Some(&eval_set.samples[i].image),
                &mut rng,
            )
            .map(|r| r.purified)
            .map_err(|e| Error::in_stage("purify", i, e))
        })
        .collect();
    results.into_iter().collect()
}

/// Attack with a content-addressed cache under `out_dir/cache`.
pub fn cached_attack(
    out_dir: &Path,
    model: &ToyVlm,
    eval_set: &Dataset,
    attack_cfg: &crate::attack::AttackConfig,
    purifier: Option<&PurifyConfig>,
) -> Result<PerturbedDataset> {
    let mut hasher = Sha256::new();
    hasher.update(model.content_hash()?.as_bytes());
    hasher.update(eval_set.content_hash()?.as_bytes());
    hasher.update(
        toml::to_string(attack_cfg)
            .map_err(|e| Error::Config(format!("serialize attack config: {e}")))?
            .as_bytes(),
    );
    if let Some(p) = purifier {
        hasher.update(
            toml::to_string(p)
                .map_err(|e| Error::Config(format!("serialize purifier config: {e}")))?
                .as_bytes(),
        );
    }
    let hash = hex_string(&hasher.finalize());
    let cache_path = out_dir.join("cache").join(format!("attack-{}.bin", &hash[..16]));
    if cache_path.exists() {
        let cached = PerturbedDataset::load(&cache_path)?;
        if cached.matches_source(eval_set)? {
            return Ok(cached);
        }
    }
    let adv = attack_dataset(model, eval_set, attack_cfg, purifier)?;
    adv.save(&cache_path)?;
    Ok(adv)
}
