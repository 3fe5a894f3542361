//! Experiment configuration: a versioned TOML schema with flag-style
//! overrides. Pixel-unit fields accept plain floats or "n/255" strings.

use crate::attack::{AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::model::{DistanceKind, ModelConfig};
use crate::purify::{PurifyConfig, Variant};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

/// Pixel-unit value: deserializes from a float or an "a/b" fraction string.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PixelValue(pub f64);

impl<'de> Deserialize<'de> for PixelValue {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(PixelValue(v)),
            Raw::Text(s) => parse_pixel(&s).map(PixelValue).map_err(D::Error::custom),
        }
    }
}

pub fn parse_pixel(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| format!("bad fraction {s}"))?;
        let d: f64 = den.trim().parse().map_err(|_| format!("bad fraction {s}"))?;
        if d == 0.0 {
            return Err(format!("zero denominator in {s}"));
        }
        Ok(n / d)
    } else {
        s.parse().map_err(|_| format!("bad number {s}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train_n: usize,
    pub eval_n: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    /// (yes/no, number, other); defaults to the standard mix.
    pub mix: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Checkpoint path, relative to the output dir. Trained if absent.
    pub checkpoint: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_seed: u64,
    /// Model architecture; defaults to `ModelConfig::default()` fields.
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub weight_seed: Option<u64>,
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        if let Some(d) = self.dim {
            cfg.dim = d;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(s) = self.weight_seed {
            cfg.seed = s;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub method: AttackMethod,
    pub steps: Option<usize>,
    pub step_size: Option<PixelValue>,
    pub eps_inf: Option<PixelValue>,
    pub c: Option<f64>,
    pub eot_samples: Option<usize>,
    pub seed: u64,
    /// Defense the adaptive (eot_pgd) attack differentiates through.
    pub purifier: Option<GridEntry>,
    pub purifier_seed: Option<u64>,
}

impl AttackSection {
    pub fn attack_config(&self) -> AttackConfig {
        let mut cfg = match self.method {
            AttackMethod::Pgd => AttackConfig::pgd_default(),
            AttackMethod::Cw => AttackConfig::cw_default(),
            AttackMethod::EotPgd => AttackConfig::eot_default(),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v.0;
        }
        if let Some(v) = self.eps_inf {
            cfg.eps_inf = v.0;
        }
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.eot_samples {
            cfg.eot_samples = v;
        }
        cfg.seed = self.seed;
        cfg
    }
}

/// One explicit purification condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub variant: Variant,
    pub alpha: Option<PixelValue>,
    pub beta: Option<PixelValue>,
    pub gamma: Option<PixelValue>,
    pub k_steps: Option<usize>,
    pub eps_total: Option<PixelValue>,
    pub distance: Option<DistanceKind>,
}

impl GridEntry {
    pub fn purify_config(&self, seed: u64) -> PurifyConfig {
        let mut cfg = PurifyConfig {
            variant: self.variant,
            seed,
            ..PurifyConfig::default()
        };
        if let Some(v) = self.alpha {
            cfg.alpha_inf = v.0;
        }
        if let Some(v) = self.beta {
            cfg.beta_inf = v.0;
        }
        if let Some(v) = self.gamma {
            cfg.gamma_inf = v.0;
        }
        if let Some(v) = self.k_steps {
            cfg.k_steps = v;
        }
        if let Some(v) = self.eps_total {
            cfg.eps_inf_total = v.0;
        }
        if let Some(v) = self.distance {
            cfg.distance = v;
        }
        cfg
    }
}

/// Cartesian sweep shorthand expanded into grid entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub variants: Vec<Variant>,
    pub alphas: Vec<PixelValue>,
    pub betas: Vec<PixelValue>,
    pub distance: Option<DistanceKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifySection {
    /// Purification seeds; every condition is evaluated under each seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: Vec<GridEntry>,
    pub sweep: Option<SweepSection>,
    /// Also purify clean images under each condition (clean-impact rows).
    #[serde(default)]
    pub clean_impact: bool,
    /// Include a random resize-and-pad defense row.
    #[serde(default)]
    pub rp_baseline: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// How many eval samples get attention heatmaps exported.
    #[serde(default)]
    pub heatmap_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    pub out_dir: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub purify: PurifySection,
    #[serde(default = "default_report_section")]
    pub report: ReportSection,
}

fn default_report_section() -> ReportSection {
    ReportSection { heatmap_samples: 0 }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: cfg.version,
                expected: CONFIG_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, applying `key=value` overrides (TOML dotted paths)
    /// before deserialization.
    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let text = apply_overrides(&text, overrides)?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.purify.seeds.is_empty() {
            return Err(Error::Config("purify.seeds must be nonempty".into()));
        }
        if self.purify.grid.is_empty() && self.purify.sweep.is_none() {
            return Err(Error::Config(
                "purify grid is empty: give purify.grid entries or a purify.sweep".into(),
            ));
        }
        if self.dataset.train_n == 0 || self.dataset.eval_n == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.attack.method == AttackMethod::EotPgd && self.attack.purifier.is_none() {
            return Err(Error::Config(
                "eot_pgd needs an [attack.purifier] defense entry".into(),
            ));
        }
        Ok(())
    }

    /// All purification conditions in deterministic order.
    pub fn conditions(&self) -> Vec<GridEntry> {
        let mut entries = Vec::new();
        if let Some(sweep) = &self.purify.sweep {
            for &variant in &sweep.variants {
                match variant {
                    Variant::V1 => {
                        for &alpha in &sweep.alphas {
                            entries.push(GridEntry {
                                variant,
                                alpha: Some(alpha),
                                beta: None,
                                gamma: None,
                                k_steps: None,
                                eps_total: None,
                                distance: sweep.distance,
                            });
                        }
                    }
                    _ => {
                        for &alpha in &sweep.alphas {
                            for &beta in &sweep.betas {
                                entries.push(GridEntry {
                                    variant,
                                    alpha: Some(alpha),
                                    beta: Some(beta),
                                    gamma: None,
                                    k_steps: None,
                                    eps_total: None,
                                    distance: sweep.distance,
                                });
                            }
                        }
                    }
                }
            }
        }
        entries.extend(self.purify.grid.iter().cloned());
        entries
    }

    /// Resolve the output directory, honoring the `F3LAB_OUT_ROOT`
    /// environment variable as a root override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("F3LAB_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.out_dir),
            None => PathBuf::from(&self.out_dir),
        }
    }
}

/// Apply `a.b.c=value` overrides to a TOML document.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut doc: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    for entry in overrides {
        let (path, value) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{entry}' is not key=value")))?;
        // interpret the value as a TOML literal, falling back to a string
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        let mut cursor = &mut doc;
        let parts: Vec<&str> = path.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{path}' does not address a table")))?
                    .insert(part.to_string(), parsed.clone());
            } else {
                cursor = cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{path}' does not address a table")))?
                    .entry(part.to_string())
                    .or_insert(toml::Value::Table(Default::default()));
            }
        }
    }
    toml::to_string(&doc).map_err(|e| Error::Config(format!("config re-serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const EXAMPLE: &str = r#"
version = 1
seed = 42
workers = 0
out_dir = "runs/demo"

[dataset]
train_n = 100
eval_n = 20
train_seed = 11
eval_seed = 12

[model]
checkpoint = "model.ckpt"
epochs = 2
learning_rate = 0.15
train_seed = 42

[attack]
method = "pgd"
seed = 1

[purify]
seeds = [101, 102]

[[purify.grid]]
variant = "v3"
alpha = "16/255"
beta = "32/255"
"#;

    #[test]
    fn parses_example_with_fraction_pixels() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let conds = cfg.conditions();
        assert_eq!(conds.len(), 1);
        let p = conds[0].purify_config(7);
        assert!((p.alpha_inf - 16.0 / 255.0).abs() < 1e-15);
        assert!((p.beta_inf - 32.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.seed, 7);
    }

    #[test]
    fn version_mismatch_is_error() {
        let text = EXAMPLE.replace("version = 1", "version = 9");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(Error::Version {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let text = apply_overrides(EXAMPLE, &["attack.steps=5".into(), "seed=7".into()]).unwrap();
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.attack.attack_config().steps, 5);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = EXAMPLE.replace("workers = 0", "workerz = 0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn sweep_expansion_counts() {
        let text = format!(
            "{EXAMPLE}\n[purify.sweep]\nvariants = [\"v1\", \"v2\", \"v3\"]\nalphas = [\"8/255\", \"16/255\"]\nbetas = [\"16/255\", \"32/255\"]\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        // v1: 2 alphas; v2, v3: 2x2 each; plus 1 explicit grid entry
        assert_eq!(cfg.conditions().len(), 2 + 4 + 4 + 1);
    }
}
