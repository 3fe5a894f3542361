//! Command-line interface: every subcommand takes a TOML config file plus
//! `--set key=value` overrides, writes its outputs to the configured paths,
//! and exits nonzero on any failure.

use clap::{Parser, Subcommand};
use f3lab::attack::{AttackMethod, PerturbedDataset, Provenance};
use f3lab::data::{generate, Dataset, Split, DEFAULT_MIX};
use f3lab::error::{Error, Result};
use f3lab::eval::{
    self, accuracy, attention_of, heatmap_export, purify_images, run_experiment_from_text,
};
use f3lab::model::{train, ModelConfig, ToyVlm};
use f3lab::tensor::Tensor;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "f3lab",
    about = "Toy vision-language model: attacks, attention-guided purification, experiment reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Path to the TOML config for this subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Override config fields, e.g. --set attack.steps=10 --set seed=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(ConfigArgs),
    /// Train the toy model on a dataset and save a checkpoint.
    Train(ConfigArgs),
    /// Attack a dataset with a trained model; write an adversarial dataset.
    Attack(ConfigArgs),
    /// Purify a (clean or adversarial) dataset under one condition.
    Purify(ConfigArgs),
    /// Evaluate accuracy and attention similarity of image sets.
    Eval(ConfigArgs),
    /// Run a full experiment pipeline from a config; write report + records.
    Report(ConfigArgs),
    /// Export attention heatmaps for one sample.
    Heatmap(ConfigArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Purify(a) => cmd_purify(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config_text(args: &ConfigArgs) -> Result<String> {
    let text = std::fs::read_to_string(&args.config)?;
    eval::config::apply_overrides(&text, &args.overrides)
}

fn parse_section<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
}

fn check_version(version: u32) -> Result<()> {
    if version != 1 {
        return Err(Error::Version {
            found: version,
            expected: 1,
        });
    }
    Ok(())
}

fn parse_split(tag: &str) -> Result<Split> {
    match tag {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    version: u32,
    n: usize,
    seed: u64,
    split: String,
    mix: Option<[f64; 3]>,
    out: String,
}

fn cmd_gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg: GenDataConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let split = parse_split(&cfg.split)?;
    let dataset = generate(cfg.n, cfg.seed, cfg.mix.unwrap_or(DEFAULT_MIX), split)?;
    dataset.save(Path::new(&cfg.out))?;
    let counts = dataset.qtype_counts();
    println!(
        "wrote {} ({} samples; yes/no {}, number {}, other {})",
        cfg.out,
        dataset.samples.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    version: u32,
    dataset: String,
    checkpoint: String,
    epochs: usize,
    learning_rate: f64,
    train_seed: u64,
    dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    weight_seed: Option<u64>,
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg: TrainConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let dataset = Dataset::load(Path::new(&cfg.dataset))?;
    let mut model_cfg = ModelConfig::default();
    if let Some(v) = cfg.dim {
        model_cfg.dim = v;
    }
    if let Some(v) = cfg.layers {
        model_cfg.layers = v;
    }
    if let Some(v) = cfg.heads {
        model_cfg.heads = v;
    }
    if let Some(v) = cfg.weight_seed {
        model_cfg.seed = v;
    }
    let outcome = train(
        &model_cfg,
        &dataset,
        cfg.epochs,
        cfg.learning_rate,
        cfg.train_seed,
    )?;
    outcome.model.save(Path::new(&cfg.checkpoint))?;
    println!(
        "wrote {} (final train accuracy {:.2})",
        cfg.checkpoint, outcome.final_train_accuracy
    );
    Ok(())
}

// ── attack ───────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackRunConfig {
    version: u32,
    dataset: String,
    checkpoint: String,
    out: String,
    attack: eval::config::AttackSection,
}

fn cmd_attack(args: &ConfigArgs) -> Result<()> {
    let cfg: AttackRunConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let dataset = Dataset::load(Path::new(&cfg.dataset))?;
    let model = ToyVlm::load(Path::new(&cfg.checkpoint))?;
    let attack_cfg = cfg.attack.attack_config();
    let purifier = cfg
        .attack
        .purifier
        .as_ref()
        .map(|g| g.purify_config(cfg.attack.purifier_seed.unwrap_or(attack_cfg.seed)));
    if attack_cfg.method == AttackMethod::EotPgd && purifier.is_none() {
        return Err(Error::Config(
            "eot_pgd needs an [attack.purifier] defense entry".into(),
        ));
    }
    let adv = f3lab::attack::attack_dataset(&model, &dataset, &attack_cfg, purifier.as_ref())?;
    adv.save(Path::new(&cfg.out))?;
    let mean_linf: f64 = adv.norms.iter().map(|n| n.1).sum::<f64>() / adv.norms.len() as f64;
    println!(
        "wrote {} ({}; mean linf perturbation {:.5})",
        cfg.out,
        attack_cfg.label(),
        mean_linf
    );
    Ok(())
}

// ── purify ───────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PurifyRunConfig {
    version: u32,
    /// Clean source dataset (questions, labels, clean images).
    dataset: String,
    /// Optional adversarial dataset to purify; purifies clean images if absent.
    adversarial: Option<String>,
    checkpoint: String,
    out: String,
    seed: u64,
    condition: eval::GridEntry,
}

fn cmd_purify(args: &ConfigArgs) -> Result<()> {
    let cfg: PurifyRunConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let dataset = Dataset::load(Path::new(&cfg.dataset))?;
    let model = ToyVlm::load(Path::new(&cfg.checkpoint))?;
    let pcfg = cfg.condition.purify_config(cfg.seed);
    let (inputs, attack_prov) = match &cfg.adversarial {
        Some(path) => {
            let adv = PerturbedDataset::load(Path::new(path))?;
            if !adv.matches_source(&dataset)? {
                return Err(Error::Config(format!(
                    "{path} was not derived from {}",
                    cfg.dataset
                )));
            }
            let prov = match &adv.provenance {
                Provenance::Attack(a) => Some(a.clone()),
                Provenance::Purify { attack, .. } => attack.clone(),
            };
            (adv.images, prov)
        }
        None => (
            dataset.samples.iter().map(|s| s.image.clone()).collect(),
            None,
        ),
    };
    let purified = purify_images(&model, &dataset, &inputs, &pcfg)?;
    let out = PerturbedDataset::from_purify(&dataset, purified, pcfg.clone(), attack_prov)?;
    out.save(Path::new(&cfg.out))?;
    println!("wrote {} ({})", cfg.out, pcfg.label());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRunConfig {
    version: u32,
    dataset: String,
    checkpoint: String,
    /// Labeled perturbed datasets to evaluate alongside clean.
    variants: Vec<EvalVariant>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalVariant {
    label: String,
    path: String,
}

fn cmd_eval(args: &ConfigArgs) -> Result<()> {
    let cfg: EvalRunConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let dataset = Dataset::load(Path::new(&cfg.dataset))?;
    let model = ToyVlm::load(Path::new(&cfg.checkpoint))?;
    println!("clean accuracy: {:.2}", accuracy(&model, &dataset)?);
    let mut loaded = Vec::new();
    for v in &cfg.variants {
        let pd = PerturbedDataset::load(Path::new(&v.path))?;
        if !pd.matches_source(&dataset)? {
            return Err(Error::Config(format!(
                "{} was not derived from {}",
                v.path, cfg.dataset
            )));
        }
        loaded.push((v.label.clone(), pd));
    }
    let mut sets = Vec::new();
    for (label, pd) in &loaded {
        let refs: Vec<&Tensor> = pd.images.iter().collect();
        let preds = eval::predictions(&model, &dataset, &refs)?;
        let correct = preds
            .iter()
            .zip(&dataset.samples)
            .filter(|(p, s)| **p == s.answer_label)
            .count();
        println!(
            "{label}: accuracy {:.2}",
            100.0 * correct as f64 / preds.len() as f64
        );
        sets.push((label.clone(), refs));
    }
    let rows = eval::attention_report(&model, &dataset, &sets)?;
    for row in rows {
        println!(
            "{}: mse(A_clean, A) {:.6}  kl(A_clean, A) {:.6}",
            row.label, row.mean_mse, row.mean_kl
        );
    }
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────

fn cmd_report(args: &ConfigArgs) -> Result<()> {
    let text = load_config_text(args)?;
    let out = run_experiment_from_text(&text)?;
    print!("{}", out.report.to_pretty());
    println!("report:  {}", out.report_path.display());
    println!("records: {}", out.records_path.display());
    Ok(())
}

// ── heatmap ──────────────────────────────────────────────────────────

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatmapConfig {
    version: u32,
    dataset: String,
    checkpoint: String,
    /// Sample index within the dataset.
    index: usize,
    /// Optional perturbed dataset; uses the clean image if absent.
    perturbed: Option<String>,
    /// Output base path; writes <out>.txt and <out>.pgm.
    out: String,
}

fn cmd_heatmap(args: &ConfigArgs) -> Result<()> {
    let cfg: HeatmapConfig = parse_section(&load_config_text(args)?)?;
    check_version(cfg.version)?;
    let dataset = Dataset::load(Path::new(&cfg.dataset))?;
    let model = ToyVlm::load(Path::new(&cfg.checkpoint))?;
    let image = match &cfg.perturbed {
        Some(path) => {
            let pd = PerturbedDataset::load(Path::new(path))?;
            pd.images
                .get(cfg.index)
                .cloned()
                .ok_or_else(|| Error::Config(format!("index {} out of range", cfg.index)))?
        }
        None => {
            dataset
                .samples
                .get(cfg.index)
                .ok_or_else(|| Error::Config(format!("index {} out of range", cfg.index)))?
                .image
                .clone()
        }
    };
    let attention = attention_of(&model, &dataset, cfg.index, &image)?;
    heatmap_export(&attention, Path::new(&cfg.out))?;
    println!("wrote {}.txt and {}.pgm", cfg.out, cfg.out);
    Ok(())
}
