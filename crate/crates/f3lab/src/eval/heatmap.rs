//! Attention heatmap export: project (L, H, M) attention to an L x M matrix
//! by taking the max over heads, min-max scale to [0, 1], and write both a
//! plain-text grid and an 8-bit grayscale PGM image.

use crate::error::{Error, Result};
use crate::model::AttentionTensor;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const TEXT_HEADER: &str = "f3lab-heatmap v1";

/// Write `<base>.txt` (scaled values, 17 significant digits, with the scale
/// recorded) and `<base>.pgm` (8-bit grayscale, one pixel per (layer, token)).
/// A constant matrix is flagged degenerate and exported as a uniform image.
pub fn heatmap_export(attention: &AttentionTensor, base: &Path) -> Result<()> {
    let matrix = attention.max_over_heads();
    let (layers, tokens) = (matrix.shape()[0], matrix.shape()[1]);
    let lo = matrix.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = matrix
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi - lo < 1e-12;
    let scaled: Vec<f64> = if degenerate {
        vec![0.0; matrix.numel()]
    } else {
        matrix.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
    };

    let mut text = String::new();
    writeln!(text, "{TEXT_HEADER}").unwrap();
    writeln!(text, "layers {layers}").unwrap();
    writeln!(text, "tokens {tokens}").unwrap();
    writeln!(text, "scale_min {lo:.16e}").unwrap();
    writeln!(text, "scale_max {hi:.16e}").unwrap();
    writeln!(text, "degenerate {}", u8::from(degenerate)).unwrap();
    for row in scaled.chunks(tokens) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(text, "{}", cells.join(" ")).unwrap();
    }
    std::fs::write(base.with_extension("txt"), text)?;

    let mut pgm = String::new();
    writeln!(pgm, "P2").unwrap();
    writeln!(pgm, "{tokens} {layers}").unwrap();
    writeln!(pgm, "255").unwrap();
    for row in scaled.chunks(tokens) {
        let cells: Vec<String> = row
            .iter()
            .map(|&v| format!("{}", (v * 255.0).round() as u8))
            .collect();
        writeln!(pgm, "{}", cells.join(" ")).unwrap();
    }
    std::fs::write(base.with_extension("pgm"), pgm)?;
    Ok(())
}

/// Read back a PGM written by [`heatmap_export`], as scaled values in [0, 1].
pub fn heatmap_import(path: &Path) -> Result<Tensor> {
    let content = std::fs::read_to_string(path)?;
    let mut tokens = content.split_ascii_whitespace();
    let magic = tokens.next().ok_or_else(|| Error::Corrupt("empty pgm".into()))?;
    if magic != "P2" {
        return Err(Error::Corrupt(format!("expected P2 pgm, got {magic}")));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Corrupt(format!("missing {what}")))?
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad {what}")))
    };
    let width = next_usize("width")?;
    let height = next_usize("height")?;
    let maxval = next_usize("maxval")?;
    if maxval != 255 {
        return Err(Error::Corrupt(format!("expected maxval 255, got {maxval}")));
    }
    let mut data = Vec::with_capacity(width * height);
    for t in tokens {
        let v: u16 = t
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad pixel {t}")))?;
        data.push(v as f64 / 255.0);
    }
    if data.len() != width * height {
        return Err(Error::Corrupt(format!(
            "pgm has {} pixels, header says {}",
            data.len(),
            width * height
        )));
    }
    Ok(Tensor::new(&[height, width], data)?)
}
