//! Finite-difference gradient checking.
//!
//! The numerical side evaluates the loss with forward passes only, so it is
//! independent of the backward rules it verifies.

use super::{Result, Tape, Tensor, Var};

/// A scalar-valued function of one tensor, expressed as a tape builder.
pub trait LossFn {
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

fn eval(f: &impl LossFn, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let loss = f.build(&mut tape, v)?;
    Ok(tape.value(loss).item())
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numerical_grad(f: &impl LossFn, x: &Tensor, h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let mut pd = plus.data().to_vec();
        let mut md = minus.data().to_vec();
        pd[i] += h;
        md[i] -= h;
        plus.replace_data(pd);
        minus.replace_data(md);
        g[i] = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * h);
    }
    Ok(g)
}

/// Max over coordinates of |AD - central difference| / max(1e-8, |central difference|).
pub fn grad_check(f: &impl LossFn, x: &Tensor, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let loss = f.build(&mut tape, v)?;
    tape.backward(loss)?;
    let ad = tape.grad(v)?;

    let fd = numerical_grad(f, x, h)?;
    let mut worst = 0.0f64;
    for (a, d) in ad.data().iter().zip(&fd) {
        let rel = (a - d).abs() / f64::max(1e-8, d.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, &[]);
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn linear_function_has_near_zero_error() {
        let f = |tape: &mut Tape, x: Var| tape.sum(x);
        let x = random_tensor(&[6], 1);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let f = |tape: &mut Tape, x: Var| {
            let s = tape.softmax(x, 0)?;
            let sq = tape.mul(s, s)?;
            tape.sum(sq)
        };
        let x = random_tensor(&[8], 2);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err <= 1e-5, "error {err}");
    }

    #[test]
    fn per_op_gradients_match_finite_differences_on_20_seeded_inputs() {
        type Builder = fn(&mut Tape, Var) -> Result<Var>;
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, x| {
                let m = t.reshape(x, &[3, 3])?;
                let w = t.constant(Tensor::from_fn(&[3, 3], |i| 0.3 * (i as f64) - 1.1));
                let p = t.matmul(m, w)?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            }),
            ("matmul_nt", |t, x| {
                let m = t.reshape(x, &[3, 3])?;
                let w = t.constant(Tensor::from_fn(&[3, 3], |i| 0.25 * (i as f64) - 0.9));
                let p = t.matmul_nt(m, w)?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            }),
            ("add", |t, x| {
                let y = t.constant(Tensor::from_fn(&[9], |i| i as f64 * 0.1));
                let s = t.add(x, y)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("sub", |t, x| {
                let y = t.constant(Tensor::from_fn(&[9], |i| i as f64 * 0.1));
                let s = t.sub(x, y)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("mul", |t, x| {
                let y = t.constant(Tensor::from_fn(&[9], |i| 0.5 - i as f64 * 0.07));
                let p = t.mul(x, y)?;
                let sq = t.mul(p, p)?;
                t.sum(sq)
            }),
            ("scale", |t, x| {
                let s = t.scale(x, -1.75)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("tanh", |t, x| {
                let y = t.tanh(x)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("mean", |t, x| {
                let sq = t.mul(x, x)?;
                t.mean(sq)
            }),
            ("softmax", |t, x| {
                let m = t.reshape(x, &[3, 3])?;
                let s = t.softmax(m, 1)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("normalize", |t, x| {
                // shift positive so the sum is well away from zero
                let p = t.add_scalar(x, 5.0)?;
                let n = t.normalize(p)?;
                let sq = t.mul(n, n)?;
                t.sum(sq)
            }),
            ("l2_norm", |t, x| t.l2_norm(x)),
            ("slice_concat", |t, x| {
                let a = t.slice(x, 0, 4)?;
                let b = t.slice(x, 4, 5)?;
                let j = t.concat(&[b, a])?;
                let sq = t.mul(j, j)?;
                t.sum(sq)
            }),
            ("add_row", |t, x| {
                let m = t.reshape(x, &[3, 3])?;
                let row = t.constant(Tensor::from_fn(&[3], |i| 0.2 * i as f64 - 0.3));
                let s = t.add_row(m, row)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("kl_terms", |t, x| {
                // q = normalized positive transform of x, p constant distribution
                let sq = t.mul(x, x)?;
                let pos = t.add_scalar(sq, 0.1)?;
                let q = t.normalize(pos)?;
                let p = t.constant(Tensor::from_fn(&[9], |_| 1.0 / 9.0));
                let terms = t.kl_terms(p, q)?;
                t.sum(terms)
            }),
            ("cross_entropy", |t, x| t.cross_entropy(x, 2)),
            ("layer_norm_rows", |t, x| {
                let m = t.reshape(x, &[3, 3])?;
                let gain = t.constant(Tensor::from_fn(&[3], |i| 1.0 + 0.1 * i as f64));
                let bias = t.constant(Tensor::from_fn(&[3], |i| 0.05 * i as f64));
                let y = t.layer_norm_rows(m, gain, bias, 1e-6)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
        ];
        for (name, f) in &cases {
            for trial in 0..20 {
                let x = random_tensor(&[9], 1000 + trial);
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        let f = |tape: &mut Tape, x: Var| {
            let m = tape.reshape(x, &[2, 4])?;
            let w = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
            let h = tape.matmul(m, w)?;
            let a = tape.tanh(h)?;
            let s = tape.softmax(a, 1)?;
            let sq = tape.mul(s, s)?;
            tape.mean(sq)
        };
        for trial in 0..20 {
            let x = random_tensor(&[8], 77 + trial);
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err <= 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
