//! Cross-modal attention tensor: how much the answer-slot token attends to
//! each visual token, per decoder layer and head.

use crate::tensor::{Result, Tensor, TensorError};

/// Smoothing added to normalized attention rows before KL terms, keeping
/// every logarithm finite.
pub const KL_SMOOTH_EPS: f64 = 1e-9;

/// Distance between two attention tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// Mean squared difference over all (layer, head, token) entries.
    Mse,
    /// Mean, over (layer, head) rows, of KL(normalize(reference) || normalize(other)).
    Kl,
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistanceKind::Mse => write!(f, "mse"),
            DistanceKind::Kl => write!(f, "kl"),
        }
    }
}

/// Attention of the answer-slot token over the visual tokens, shape
/// (layers, heads, tokens). Each value is one entry of a softmax row, so it
/// lies in [0, 1] and a full (layer, head) row sums to at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    tokens: usize,
    values: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if layers * heads * tokens != values.len() || layers == 0 || heads == 0 || tokens == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention_tensor",
                detail: format!(
                    "({layers}, {heads}, {tokens}) does not match {} values",
                    values.len()
                ),
            });
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(TensorError::NonFinite {
                    op: "attention_tensor",
                });
            }
        }
        Ok(AttentionTensor {
            layers,
            heads,
            tokens,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, layer: usize, head: usize, token: usize) -> f64 {
        self.values[(layer * self.heads + head) * self.tokens + token]
    }

    /// One (layer, head) row over the visual tokens.
    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.heads + head) * self.tokens;
        &self.values[start..start + self.tokens]
    }

    pub fn same_shape(&self, other: &AttentionTensor) -> bool {
        self.layers == other.layers && self.heads == other.heads && self.tokens == other.tokens
    }

    /// Rescale each (layer, head) row to sum to one over the visual tokens.
    pub fn normalize_over_tokens(&self) -> Result<AttentionTensor> {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.tokens) {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(TensorError::ZeroSum);
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(AttentionTensor {
            layers: self.layers,
            heads: self.heads,
            tokens: self.tokens,
            values,
        })
    }

    /// Project to a (layers, tokens) map by taking the max over heads.
    pub fn max_over_heads(&self) -> Tensor {
        let mut out = vec![f64::NEG_INFINITY; self.layers * self.tokens];
        for l in 0..self.layers {
            for h in 0..self.heads {
                for m in 0..self.tokens {
                    let v = self.get(l, h, m);
                    let slot = &mut out[l * self.tokens + m];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        Tensor::new(&[self.layers, self.tokens], out).expect("max_over_heads shape")
    }
}

/// Normalize a nonnegative row to a smoothed probability vector:
/// divide by the sum, add [`KL_SMOOTH_EPS`] to every entry, renormalize.
pub fn smoothed_distribution(row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    let n = row.len() as f64;
    let denom = 1.0 + n * KL_SMOOTH_EPS;
    row.iter()
        .map(|&v| (v / total + KL_SMOOTH_EPS) / denom)
        .collect()
}
