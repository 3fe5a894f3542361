//! Per-sample records, condition aggregates, and the persisted report.
//!
//! Per-sample records go to CSV; the report is a structured text document.
//! Every float is written with 17 significant digits so parsing a record
//! back reproduces the exact f64, and re-aggregating the CSV reproduces the
//! report byte for byte.

use crate::error::{Error, Result};

/// One evaluated (condition, purification seed, sample) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub condition: String,
    pub seed: u64,
    pub sample: usize,
    pub prediction: usize,
    pub correct: bool,
    /// Prediction on the clean image of the same sample (ASR reference).
    pub clean_prediction: usize,
    pub mse_clean: f64,
    pub kl_clean: f64,
    pub noise_l1: f64,
    pub noise_linf: f64,
}

/// Aggregate over all records of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub label: String,
    pub accuracy: f64,
    pub asr: f64,
    pub mean_mse: f64,
    pub mean_kl: f64,
    pub mean_l1: f64,
    pub mean_linf: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
}

/// Report provenance: enough to regenerate the report with one command.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportProvenance {
    pub config_hash: String,
    pub code_version: String,
    pub global_seed: u64,
    pub dataset_train_seed: u64,
    pub dataset_eval_seed: u64,
    pub model_hash: String,
    pub attack_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub provenance: ReportProvenance,
    pub rows: Vec<ConditionRow>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

const CSV_HEADER: &str =
    "condition,seed,sample,prediction,correct,clean_prediction,mse_clean,kl_clean,noise_l1,noise_linf";

pub fn records_to_csv(records: &[SampleRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.condition,
            r.seed,
            r.sample,
            r.prediction,
            u8::from(r.correct),
            r.clean_prediction,
            fmt_f64(r.mse_clean),
            fmt_f64(r.kl_clean),
            fmt_f64(r.noise_l1),
            fmt_f64(r.noise_linf),
        ));
    }
    out
}

pub fn records_from_csv(csv: &str) -> Result<Vec<SampleRecord>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Corrupt(format!(
                "unexpected csv header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Corrupt(format!(
                "csv line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Corrupt(format!("csv line {}: bad {what}", lineno + 2));
        records.push(SampleRecord {
            condition: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| parse_err("seed"))?,
            sample: fields[2].parse().map_err(|_| parse_err("sample"))?,
            prediction: fields[3].parse().map_err(|_| parse_err("prediction"))?,
            correct: fields[4] == "1",
            clean_prediction: fields[5]
                .parse()
                .map_err(|_| parse_err("clean_prediction"))?,
            mse_clean: fields[6].parse().map_err(|_| parse_err("mse_clean"))?,
            kl_clean: fields[7].parse().map_err(|_| parse_err("kl_clean"))?,
            noise_l1: fields[8].parse().map_err(|_| parse_err("noise_l1"))?,
            noise_linf: fields[9].parse().map_err(|_| parse_err("noise_linf"))?,
        });
    }
    Ok(records)
}

/// Group records by condition (first-appearance order) and aggregate.
/// Sums run in record order, so aggregation is deterministic.
pub fn aggregate(records: &[SampleRecord]) -> Result<Vec<ConditionRow>> {
    if records.is_empty() {
        return Err(Error::Config("no records to aggregate".into()));
    }
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.condition) {
            order.push(r.condition.clone());
        }
    }
    let mut rows = Vec::with_capacity(order.len());
    for label in order {
        let group: Vec<&SampleRecord> = records.iter().filter(|r| r.condition == label).collect();
        let n = group.len() as f64;
        let mut seeds: Vec<u64> = Vec::new();
        for r in &group {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let correct = group.iter().filter(|r| r.correct).count() as f64;
        let changed = group
            .iter()
            .filter(|r| r.prediction != r.clean_prediction)
            .count() as f64;
        rows.push(ConditionRow {
            label,
            accuracy: 100.0 * correct / n,
            asr: changed / n,
            mean_mse: group.iter().map(|r| r.mse_clean).sum::<f64>() / n,
            mean_kl: group.iter().map(|r| r.kl_clean).sum::<f64>() / n,
            mean_l1: group.iter().map(|r| r.noise_l1).sum::<f64>() / n,
            mean_linf: group.iter().map(|r| r.noise_linf).sum::<f64>() / n,
            samples: group.iter().map(|r| r.sample).collect::<std::collections::BTreeSet<_>>().len(),
            seeds,
        });
    }
    Ok(rows)
}

impl EvalReport {
    /// Structured-text rendering; byte-stable given identical inputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("f3lab-report v1\n\n");
        out.push_str("[provenance]\n");
        out.push_str(&format!("config_hash = {}\n", self.provenance.config_hash));
        out.push_str(&format!("code_version = {}\n", self.provenance.code_version));
        out.push_str(&format!("global_seed = {}\n", self.provenance.global_seed));
        out.push_str(&format!(
            "dataset_train_seed = {}\n",
            self.provenance.dataset_train_seed
        ));
        out.push_str(&format!(
            "dataset_eval_seed = {}\n",
            self.provenance.dataset_eval_seed
        ));
        out.push_str(&format!("model_hash = {}\n", self.provenance.model_hash));
        out.push_str(&format!("attack = {}\n", self.provenance.attack_label));
        out.push('\n');
        for row in &self.rows {
            out.push_str("[[row]]\n");
            out.push_str(&format!("condition = {}\n", row.label));
            out.push_str(&format!("accuracy = {}\n", fmt_f64(row.accuracy)));
            out.push_str(&format!("asr = {}\n", fmt_f64(row.asr)));
            out.push_str(&format!("mean_mse_clean = {}\n", fmt_f64(row.mean_mse)));
            out.push_str(&format!("mean_kl_clean = {}\n", fmt_f64(row.mean_kl)));
            out.push_str(&format!("mean_noise_l1 = {}\n", fmt_f64(row.mean_l1)));
            out.push_str(&format!("mean_noise_linf = {}\n", fmt_f64(row.mean_linf)));
            out.push_str(&format!("samples = {}\n", row.samples));
            let seeds: Vec<String> = row.seeds.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("seeds = [{}]\n", seeds.join(", ")));
            out.push('\n');
        }
        out
    }

    /// Console-friendly table.
    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<34} {:>8} {:>7} {:>11} {:>10} {:>9} {:>9}\n",
            "condition", "acc", "asr", "mse(A)", "kl(A)", "l1", "linf"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<34} {:>8.2} {:>7.3} {:>11.6} {:>10.5} {:>9.3} {:>9.5}\n",
                row.label,
                row.accuracy,
                row.asr,
                row.mean_mse,
                row.mean_kl,
                row.mean_l1,
                row.mean_linf
            ));
        }
        out
    }
}
