//! Versioned binary model checkpoint (config + weights, bit-exact round trip).

use super::{ModelConfig, ModelParams, ToyVlm};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"F3CK";
const VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut BinWriter<W>, t: &Tensor) -> Result<()> {
    w.u32(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.u32(d as u32)?;
    }
    w.f64_slice(t.data())
}

fn read_tensor<R: Read>(r: &mut BinReader<R>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Corrupt(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 28 {
        return Err(Error::Corrupt(format!("implausible tensor size {numel}")));
    }
    let data = r.f64_vec(numel)?;
    Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("bad tensor: {e}")))
}

impl ToyVlm {
    pub fn save_to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BinWriter::new(Vec::new());
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        let cfg = &self.cfg;
        for v in [
            cfg.image_h,
            cfg.image_w,
            cfg.channels,
            cfg.patch,
            cfg.vocab_size,
            cfg.answer_classes,
            cfg.layers,
            cfg.heads,
            cfg.dim,
            cfg.max_question_len,
        ] {
            w.u32(v as u32)?;
        }
        w.u64(cfg.seed)?;
        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32)?;
        for t in tensors {
            write_tensor(&mut w, t)?;
        }
        Ok(w.into_inner())
    }

    pub fn load_from_bytes(bytes: &[u8]) -> Result<ToyVlm> {
        let mut r = BinReader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let mut dims = [0usize; 10];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let seed = r.u64()?;
        let cfg = ModelConfig {
            image_h: dims[0],
            image_w: dims[1],
            channels: dims[2],
            patch: dims[3],
            vocab_size: dims[4],
            answer_classes: dims[5],
            layers: dims[6],
            heads: dims[7],
            dim: dims[8],
            max_question_len: dims[9],
            seed,
        };
        cfg.validate()
            .map_err(|e| Error::Corrupt(format!("bad checkpoint config: {e}")))?;

        // template params define tensor order and expected shapes
        let mut params = ModelParams::init(&cfg)?;
        let count = r.u32()? as usize;
        {
            let slots = params.tensors_mut();
            if count != slots.len() {
                return Err(Error::Corrupt(format!(
                    "checkpoint has {count} tensors, model needs {}",
                    slots.len()
                )));
            }
            for slot in slots {
                let t = read_tensor(&mut r)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Corrupt(format!(
                        "tensor shape {:?} does not match expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(ToyVlm { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.save_to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ToyVlm> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        ToyVlm::load_from_bytes(&bytes)
    }

    /// Hex sha-256 of the serialized model; used for provenance references.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.save_to_bytes()?);
        Ok(crate::data::hex_string(&hasher.finalize()))
    }
}
