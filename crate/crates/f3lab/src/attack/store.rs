//! Perturbed-dataset container: attack or purification outputs persisted
//! alongside the provenance needed to regenerate them, referencing the
//! source dataset by seed, split, and content hash.

use super::AttackConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::purify::PurifyConfig;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"F3PD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Attack(AttackConfig),
    Purify {
        purify: PurifyConfig,
        /// The attack whose outputs were purified, when the inputs were an
        /// adversarial dataset.
        attack: Option<AttackConfig>,
    },
}

/// Per-sample images derived from a source dataset, with perturbation norms
/// relative to that source.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedDataset {
    pub source_seed: u64,
    pub source_split: Split,
    pub source_hash: String,
    pub provenance: Provenance,
    pub images: Vec<Tensor>,
    /// (l1, l-inf) of each image against its source image.
    pub norms: Vec<(f64, f64)>,
}

impl PerturbedDataset {
    pub fn from_attack(
        source: &Dataset,
        images: Vec<Tensor>,
        cfg: AttackConfig,
    ) -> Result<PerturbedDataset> {
        Self::build(source, images, Provenance::Attack(cfg))
    }

    pub fn from_purify(
        source: &Dataset,
        images: Vec<Tensor>,
        purify: PurifyConfig,
        attack: Option<AttackConfig>,
    ) -> Result<PerturbedDataset> {
        Self::build(source, images, Provenance::Purify { purify, attack })
    }

    fn build(
        source: &Dataset,
        images: Vec<Tensor>,
        provenance: Provenance,
    ) -> Result<PerturbedDataset> {
        if images.len() != source.samples.len() {
            return Err(Error::Config(format!(
                "{} images for {} source samples",
                images.len(),
                source.samples.len()
            )));
        }
        let mut norms = Vec::with_capacity(images.len());
        for (img, sample) in images.iter().zip(&source.samples) {
            norms.push((img.l1_dist(&sample.image)?, img.linf_dist(&sample.image)?));
        }
        Ok(PerturbedDataset {
            source_seed: source.seed,
            source_split: source.split,
            source_hash: source.content_hash()?,
            provenance,
            images,
            norms,
        })
    }

    /// Check that this perturbed set was derived from `source`.
    pub fn matches_source(&self, source: &Dataset) -> Result<bool> {
        Ok(self.source_hash == source.content_hash()?)
    }

    pub fn save_to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::new(Vec::new());
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.source_seed)?;
        w.u8(match self.source_split {
            Split::Train => 0,
            Split::Eval => 1,
        })?;
        w.str(&self.source_hash)?;
        match &self.provenance {
            Provenance::Attack(cfg) => {
                w.u8(0)?;
                w.str(&toml_string(cfg)?)?;
            }
            Provenance::Purify { purify, attack } => {
                w.u8(1)?;
                w.str(&toml_string(purify)?)?;
                match attack {
                    Some(a) => {
                        w.u8(1)?;
                        w.str(&toml_string(a)?)?;
                    }
                    None => w.u8(0)?,
                }
            }
        }
        w.u32(self.images.len() as u32)?;
        for (img, (l1, linf)) in self.images.iter().zip(&self.norms) {
            w.u32(img.shape().len() as u32)?;
            for &d in img.shape() {
                w.u32(d as u32)?;
            }
            w.f64_slice(img.data())?;
            w.f64(*l1)?;
            w.f64(*linf)?;
        }
        Ok(w.into_inner())
    }

    pub fn load_from_bytes(bytes: &[u8]) -> Result<PerturbedDataset> {
        let mut r = BinReader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let source_seed = r.u64()?;
        let source_split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Eval,
            other => return Err(Error::Corrupt(format!("unknown split {other}"))),
        };
        let source_hash = r.str()?;
        let provenance = match r.u8()? {
            0 => Provenance::Attack(from_toml(&r.str()?)?),
            1 => {
                let purify = from_toml(&r.str()?)?;
                let attack = match r.u8()? {
                    0 => None,
                    1 => Some(from_toml(&r.str()?)?),
                    other => return Err(Error::Corrupt(format!("unknown attack flag {other}"))),
                };
                Provenance::Purify { purify, attack }
            }
            other => return Err(Error::Corrupt(format!("unknown provenance {other}"))),
        };
        let n = r.u32()? as usize;
        let mut images = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Corrupt(format!("bad image rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 24 {
                return Err(Error::Corrupt(format!("implausible image size {numel}")));
            }
            let data = r.f64_vec(numel)?;
            images.push(
                Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("bad image: {e}")))?,
            );
            norms.push((r.f64()?, r.f64()?));
        }
        Ok(PerturbedDataset {
            source_seed,
            source_split,
            source_hash,
            provenance,
            images,
            norms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.save_to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PerturbedDataset> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        PerturbedDataset::load_from_bytes(&bytes)
    }
}

fn toml_string<T: serde::Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serialize: {e}")))
}

fn from_toml<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    toml::from_str(s).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))
}
