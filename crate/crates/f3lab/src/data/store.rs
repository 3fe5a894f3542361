//! Versioned binary dataset format (little-endian, bit-exact round trip).

use super::*;
use crate::io::{BinReader, BinWriter};
use crate::model::TokenSeq;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"F3DS";
const VERSION: u32 = 1;

impl Dataset {
    pub fn save_to_bytes(&self) -> crate::error::Result<Vec<u8>> {
        let mut w = BinWriter::new(Vec::new());
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.seed)?;
        w.u8(match self.split {
            Split::Train => 0,
            Split::Eval => 1,
        })?;
        w.u32(self.samples.len() as u32)?;
        for s in &self.samples {
            w.u8(s.qtype.index() as u8)?;
            w.u8(s.answer_label as u8)?;
            w.u32(s.question.len() as u32)?;
            for &t in s.question.ids() {
                w.u16(t)?;
            }
            w.u8(s.scene.shapes.len() as u8)?;
            for shape in &s.scene.shapes {
                w.u8(match shape.kind {
                    ShapeKind::Square => 0,
                    ShapeKind::Circle => 1,
                    ShapeKind::Triangle => 2,
                })?;
                w.u8(match shape.color {
                    ShapeColor::Red => 0,
                    ShapeColor::Green => 1,
                    ShapeColor::Blue => 2,
                })?;
                w.u8(shape.row)?;
                w.u8(shape.col)?;
                w.f64(shape.jitter)?;
            }
            for &dim in s.image.shape() {
                w.u32(dim as u32)?;
            }
            w.f64_slice(s.image.data())?;
        }
        Ok(w.into_inner())
    }

    pub fn load_from_bytes(bytes: &[u8]) -> crate::error::Result<Dataset> {
        let mut r = BinReader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let seed = r.u64()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Eval,
            other => return Err(Error::Corrupt(format!("unknown split tag {other}"))),
        };
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let qtype = match r.u8()? {
                0 => QType::YesNo,
                1 => QType::Number,
                2 => QType::Other,
                other => return Err(Error::Corrupt(format!("unknown qtype {other}"))),
            };
            let answer_label = r.u8()? as usize;
            let qlen = r.u32()? as usize;
            if qlen > 64 {
                return Err(Error::Corrupt(format!("implausible question length {qlen}")));
            }
            let mut ids = Vec::with_capacity(qlen);
            for _ in 0..qlen {
                ids.push(r.u16()?);
            }
            let question = TokenSeq::new(ids, VOCAB_SIZE)
                .map_err(|e| Error::Corrupt(format!("bad question tokens: {e}")))?;
            let shape_count = r.u8()? as usize;
            let mut shapes = Vec::with_capacity(shape_count);
            for _ in 0..shape_count {
                let kind = match r.u8()? {
                    0 => ShapeKind::Square,
                    1 => ShapeKind::Circle,
                    2 => ShapeKind::Triangle,
                    other => return Err(Error::Corrupt(format!("unknown shape kind {other}"))),
                };
                let color = match r.u8()? {
                    0 => ShapeColor::Red,
                    1 => ShapeColor::Green,
                    2 => ShapeColor::Blue,
                    other => return Err(Error::Corrupt(format!("unknown color {other}"))),
                };
                let row = r.u8()?;
                let col = r.u8()?;
                let jitter = r.f64()?;
                shapes.push(ShapeSpec {
                    kind,
                    color,
                    row,
                    col,
                    jitter,
                });
            }
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                *d = r.u32()? as usize;
            }
            let numel = dims.iter().product();
            let pixels = r.f64_vec(numel)?;
            let image = Tensor::new(&dims, pixels)
                .map_err(|e| Error::Corrupt(format!("bad image tensor: {e}")))?;
            samples.push(Sample {
                image,
                question,
                answer_label,
                qtype,
                scene: Scene { shapes },
            });
        }
        Ok(Dataset {
            samples,
            seed,
            split,
        })
    }

    pub fn save(&self, path: &Path) -> crate::error::Result<()> {
        let bytes = self.save_to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        std::io::Write::write_all(&mut w, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::error::Result<Dataset> {
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut BufReader::new(File::open(path)?), &mut bytes)?;
        Dataset::load_from_bytes(&bytes)
    }

    /// Hex sha-256 of the serialized dataset; used for provenance references.
    pub fn content_hash(&self) -> crate::error::Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = self.save_to_bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::super::generate::{generate, DEFAULT_MIX};
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let d = generate(20, 4, DEFAULT_MIX, Split::Eval).unwrap();
        let bytes = d.save_to_bytes().unwrap();
        let loaded = Dataset::load_from_bytes(&bytes).unwrap();
        assert_eq!(d, loaded);
    }

    #[test]
    fn truncated_file_is_corrupt_error() {
        let d = generate(5, 4, DEFAULT_MIX, Split::Train).unwrap();
        let bytes = d.save_to_bytes().unwrap();
        let err = Dataset::load_from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let d = generate(2, 4, DEFAULT_MIX, Split::Train).unwrap();
        let mut bytes = d.save_to_bytes().unwrap();
        bytes[4] = 99; // version field follows the 4-byte magic
        let err = Dataset::load_from_bytes(&bytes).unwrap_err();
        match err {
            Error::Version { found, expected } => {
                assert_eq!(found, 99);
                assert_eq!(expected, 1);
            }
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn content_hash_is_stable_and_input_sensitive() {
        let a = generate(5, 4, DEFAULT_MIX, Split::Train).unwrap();
        let b = generate(5, 4, DEFAULT_MIX, Split::Train).unwrap();
        let c = generate(5, 5, DEFAULT_MIX, Split::Train).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }
}
