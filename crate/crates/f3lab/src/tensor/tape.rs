//! Wengert tape: records forward operations, replays them in reverse for
//! vector-Jacobian products.
//!
//! A tape is single-use: build a graph, call [`Tape::backward`] once, read
//! leaf gradients. Rebuilding the tape per gradient query keeps memory
//! bounded and avoids stale-graph bugs.

use super::{signum0, Result, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// out = a @ b^T, a: [m,k], b: [n,k]
    MatmulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// out[i,j] = a[i,j] + row[j]
    AddRow { a: Var, row: Var, rows: usize, cols: usize },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Tanh { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sign { a: Var },
    Abs { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    L2Norm { a: Var },
    KlTerms { p: Var, q: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    /// Sum-normalize the whole tensor: out = a / sum(a).
    Normalize { a: Var, total: f64 },
    Slice { a: Var, offset: usize, len: usize },
    Concat { parts: Vec<Var> },
    Reshape { a: Var },
    /// Scalar cross-entropy of a 1-D logits vector against a class index.
    CrossEntropy { logits: Var, target: usize },
    /// Per-row layer normalization with learned gain and bias.
    LayerNormRows { a: Var, gain: Var, bias: Var, rows: usize, cols: usize, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape for reverse-mode AD.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Register a leaf tensor. Only requires-grad leaves receive gradients.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.emit("matmul", &[m, n], out, Op::Matmul { a, b, m, k, n })
    }

    /// out = a @ b^T with a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
        self.emit("matmul_nt", &[m, n], out, Op::MatmulNT { a, b, m, k, n })
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("add", &shape, data, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("sub", &shape, data, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("mul", &shape, data, Op::Mul { a, b })
    }

    /// Broadcast-add a length-`cols` row vector to every row of a `[rows, cols]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("row has {} elements, need {cols}", self.value(row).numel()),
            });
        }
        let (ad, rd) = (self.value(a).data(), self.value(row).data());
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = ad[i * cols + j] + rd[j];
            }
        }
        self.emit("add_row", &[rows, cols], out, Op::AddRow { a, row, rows, cols })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("scale", &shape, data, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + offset).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("add_scalar", &shape, data, Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("tanh", &shape, data, Op::Tanh { a })
    }

    /// Backward passes gradient 1 strictly inside (lo, hi), 0 at or outside the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("clamp", &shape, data, Op::Clamp { a, lo, hi })
    }

    /// sign(0) = 0; backward is the zero subgradient everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| signum0(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("sign", &shape, data, Op::Sign { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("abs", &shape, data, Op::Abs { a })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.emit("sum", &[1], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.emit("mean", &[1], vec![s / n], Op::Mean { a })
    }

    /// Euclidean norm of the flattened tensor; zero subgradient at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x * x).sum();
        self.emit("l2_norm", &[1], vec![s.sqrt()], Op::L2Norm { a })
    }

    /// Elementwise p * ln(p / q) with the convention 0 * ln(0/q) = 0.
    pub fn kl_terms(&mut self, p: Var, q: Var) -> Result<Var> {
        self.binary_same_shape(p, q, "kl_terms")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = vec![0.0; pd.len()];
        for (i, (&pv, &qv)) in pd.iter().zip(qd).enumerate() {
            if pv > 0.0 {
                if qv <= 0.0 {
                    return Err(TensorError::KlDomain { index: i });
                }
                out[i] = pv * (pv / qv).ln();
            }
        }
        let shape = self.value(p).shape().to_vec();
        self.emit("kl_terms", &shape, out, Op::KlTerms { p, q })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(ad[idx(j)]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (ad[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        self.emit("softmax", &shape, out, Op::Softmax { a, outer, len, inner })
    }

    /// Sum-normalize the whole tensor so its entries add to one.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        if total == 0.0 || !total.is_finite() {
            return Err(TensorError::ZeroSum);
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x / total).collect();
        let shape = self.value(a).shape().to_vec();
        self.emit("normalize", &shape, data, Op::Normalize { a, total })
    }

    // ── Shape plumbing ──────────────────────────────────────────────

    /// Contiguous 1-D slice of the flattened tensor.
    pub fn slice(&mut self, a: Var, offset: usize, len: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if offset + len > n || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("range {offset}..{} of {n} elements", offset + len),
            });
        }
        let data = self.value(a).data()[offset..offset + len].to_vec();
        self.emit("slice", &[len], data, Op::Slice { a, offset, len })
    }

    /// Concatenate flattened tensors into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let len = data.len();
        self.emit("concat", &[len], data, Op::Concat { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.value(a).shape()),
            });
        }
        let data = self.value(a).data().to_vec();
        self.emit("reshape", shape, data, Op::Reshape { a })
    }

    /// Stable scalar cross-entropy of 1-D logits against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let k = self.value(logits).numel();
        if target >= k {
            return Err(TensorError::BadTarget { target, classes: k });
        }
        let ld = self.value(logits).data();
        let mx = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + ld.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - ld[target];
        self.emit("cross_entropy", &[1], vec![loss], Op::CrossEntropy { logits, target })
    }

    /// Row-wise layer norm of a `[rows, cols]` tensor:
    /// `out[i] = gain * (a[i] - mean_i) / sqrt(var_i + eps) + bias`.
    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "layer_norm_rows")?;
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!(
                    "gain/bias must have {cols} elements, got {} and {}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            });
        }
        let ad = self.value(a).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
            }
        }
        self.emit(
            "layer_norm_rows",
            &[rows, cols],
            out,
            Op::LayerNormRows { a, gain, bias, rows, cols, eps },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// requires-grad leaf (zeros where no gradient flows). The tape is
    /// consumed; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: self.value(loss).numel(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: read node, write parent grads.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for the final leaf sweep
                }
                Op::Matmul { a, b, m, k, n } => {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::MatmulNT { a, b, m, k, n } => {
                    // out = a @ b^T; da = g @ b, db = g^T @ a
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * ad[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul { a, b } => {
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let da: Vec<f64> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                    let db: Vec<f64> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::AddRow { a, row, rows, cols } => {
                    let mut drow = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            drow[j] += g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, row, drow);
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, a, g.iter().map(|&v| v * factor).collect());
                }
                Op::AddScalar { a } => {
                    accumulate(&mut grads, a, g);
                }
                Op::Tanh { a } => {
                    let y = self.nodes[idx].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, a, da);
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.nodes[a.0].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, da);
                }
                Op::Sign { a } => {
                    accumulate(&mut grads, a, vec![0.0; g.len()]);
                }
                Op::Abs { a } => {
                    let x = self.nodes[a.0].value.data();
                    let da: Vec<f64> = g.iter().zip(x).map(|(&gv, &xv)| gv * signum0(xv)).collect();
                    accumulate(&mut grads, a, da);
                }
                Op::Sum { a } => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a.0].value.numel();
                    accumulate(&mut grads, a, vec![g[0] / n as f64; n]);
                }
                Op::L2Norm { a } => {
                    let x = self.nodes[a.0].value.data();
                    let norm = self.nodes[idx].value.item();
                    let da: Vec<f64> = if norm > 0.0 {
                        x.iter().map(|&xv| g[0] * xv / norm).collect()
                    } else {
                        vec![0.0; x.len()]
                    };
                    accumulate(&mut grads, a, da);
                }
                Op::KlTerms { p, q } => {
                    let pd = self.nodes[p.0].value.data();
                    let qd = self.nodes[q.0].value.data();
                    let mut dp = vec![0.0; pd.len()];
                    let mut dq = vec![0.0; pd.len()];
                    for i in 0..pd.len() {
                        if pd[i] > 0.0 {
                            dp[i] = g[i] * ((pd[i] / qd[i]).ln() + 1.0);
                            dq[i] = -g[i] * pd[i] / qd[i];
                        }
                    }
                    accumulate(&mut grads, p, dp);
                    accumulate(&mut grads, q, dq);
                }
                Op::Softmax { a, outer, len, inner } => {
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx2 = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx2(j)] * y[idx2(j)]).sum();
                            for j in 0..len {
                                da[idx2(j)] = y[idx2(j)] * (g[idx2(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, a, da);
                }
                Op::Normalize { a, total } => {
                    let y = self.nodes[idx].value.data();
                    let dot: f64 = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                    let da: Vec<f64> = g.iter().map(|&gv| (gv - dot) / total).collect();
                    accumulate(&mut grads, a, da);
                }
                Op::Slice { a, offset, len } => {
                    let n = self.nodes[a.0].value.numel();
                    let mut da = vec![0.0; n];
                    da[offset..offset + len].copy_from_slice(&g);
                    accumulate(&mut grads, a, da);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.numel();
                        accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads, a, g);
                }
                Op::CrossEntropy { logits, target } => {
                    let ld = self.nodes[logits.0].value.data();
                    let mx = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = ld.iter().map(|&v| (v - mx).exp()).sum();
                    let mut dl: Vec<f64> = ld.iter().map(|&v| g[0] * (v - mx).exp() / total).collect();
                    dl[target] -= g[0];
                    accumulate(&mut grads, logits, dl);
                }
                Op::LayerNormRows { a, gain, bias, rows, cols, eps } => {
                    let ad = self.nodes[a.0].value.data();
                    let gd = self.nodes[gain.0].value.data();
                    let mut da = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let row = &ad[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // dxhat, plus accumulators for the mean/variance terms
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                        }
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gd[j];
                            da[r * cols + j] =
                                inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, gain, dgain);
                    accumulate(&mut grads, bias, dbias);
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    /// Gradient of a requires-grad leaf after `backward`, as a tensor shaped like the leaf.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad {
            return Err(TensorError::DetachedLeaf);
        }
        let g = node.value.grad.clone().ok_or(TensorError::DetachedLeaf)?;
        Tensor::new(node.value.shape(), g)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 2], &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_backward_of_sum_is_bt_broadcast() {
        // d/dA sum(A @ B) = broadcast of row sums of B (i.e. B^T summed per column).
        let mut tape = Tape::new();
        let a_val = t(&[2, 2], &[0.3, -1.2, 0.7, 2.1]);
        let b_val = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.leaf(a_val, true);
        let b = tape.constant(b_val.clone());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        // each dA[i,p] = sum_j B[p,j]
        assert_eq!(g.data(), &[3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 2.0f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_extreme_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1e300, -1e300, 0.0, 700.0, -700.0, 3.0]));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn sign_elementwise() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-2.0, 0.0, 5.0]));
        let y = tape.sign(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_norm_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_norm(x).unwrap();
        assert_eq!(tape.value(y).item(), 5.0);
    }

    #[test]
    fn kl_terms_identical_distributions_sum_to_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.5, 0.5]));
        let q = tape.constant(t(&[2], &[0.5, 0.5]));
        let terms = tape.kl_terms(p, q).unwrap();
        let s = tape.sum(terms).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn kl_terms_zero_p_is_zero_and_bad_q_is_error() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.0, 1.0]));
        let q = tape.constant(t(&[2], &[0.0, 1.0]));
        let terms = tape.kl_terms(p, q).unwrap();
        assert_eq!(tape.value(terms).data(), &[0.0, 0.0]);

        let p2 = tape.constant(t(&[1], &[0.5]));
        let q2 = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(
            tape.kl_terms(p2, q2),
            Err(TensorError::KlDomain { index: 0 })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let c = tape.constant(Tensor::scalar(7.0));
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn backward_non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn grad_of_detached_leaf_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), false);
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.grad(x), Err(TensorError::DetachedLeaf)));
    }

    #[test]
    fn clamp_passes_gradient_strictly_inside_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-0.5, 0.0, 0.5, 1.5]), true);
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.5, 1.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[4], &[0.1, -0.7, 1.3, 2.9]), true);
            let h = tape.tanh(x).unwrap();
            let s = tape.softmax(h, 0).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_result_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e308]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[8], &[0.0; 8]));
        let loss = tape.cross_entropy(logits, 3).unwrap();
        assert!((tape.value(loss).item() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let a = tape.slice(x, 0, 2).unwrap();
        let b = tape.slice(x, 2, 2).unwrap();
        let joined = tape.concat(&[b, a]).unwrap();
        assert_eq!(tape.value(joined).data(), &[3.0, 4.0, 1.0, 2.0]);
        let w = tape.constant(t(&[4], &[1.0, 10.0, 100.0, 1000.0]));
        let prod = tape.mul(joined, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[100.0, 1000.0, 1.0, 10.0]);
    }
}
