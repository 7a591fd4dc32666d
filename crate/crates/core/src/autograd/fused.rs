//! Fused kernels for the transformer hot path: affine maps and multi-head
//! attention. Both are equivalent to compositions of the primitive ops and
//! are tested against them; fusing avoids materializing permuted copies.

use super::nn::softmax_row;
use super::{gemm, Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Linear {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        if let Some(gx) = grads[0].as_mut() {
            gemm(m, n, k, 1.0, g, (n, 1), w, (1, n), 1.0, gx, (k, 1));
        }
        if let Some(gw) = grads[1].as_mut() {
            gemm(k, m, n, 1.0, x, (1, k), g, (n, 1), 1.0, gw, (n, 1));
        }
        if let Some(gb) = grads[2].as_mut() {
            for row in g.chunks_exact(n) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
    }
}

struct Attention {
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    scale: f64,
    /// Attention weights, `[batch, heads, tokens, tokens]`.
    probs: Vec<f64>,
}

impl Backward for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let Some(gqkv) = grads[0].as_mut() else { return };
        let (t, dh, s) = (self.tokens, self.head_dim, self.scale);
        let z = self.heads * dh;
        let qkv = ctx.inputs[0].data();
        let g = ctx.grad;
        let mut dp = vec![0.0; t * t];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let p = &self.probs[(b * self.heads + h) * t * t..][..t * t];
                let base = b * t * 3 * z + h * dh;
                let (qo, ko, vo) = (base, base + z, base + 2 * z);
                let go = &g[b * t * z + h * dh..];
                // dV = Pᵀ·dO
                gemm(t, t, dh, 1.0, p, (1, t), go, (z, 1), 1.0, &mut gqkv[vo..], (3 * z, 1));
                // dP = dO·Vᵀ
                gemm(t, dh, t, 1.0, go, (z, 1), &qkv[vo..], (1, 3 * z), 0.0, &mut dp, (t, 1));
                for (dr, pr) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(d, &pv)| *d = pv * (*d - dot));
                }
                // dQ = s·dS·K, dK = s·dSᵀ·Q
                gemm(t, t, dh, s, &dp, (t, 1), &qkv[ko..], (3 * z, 1), 1.0, &mut gqkv[qo..], (3 * z, 1));
                gemm(t, t, dh, s, &dp, (1, t), &qkv[qo..], (3 * z, 1), 1.0, &mut gqkv[ko..], (3 * z, 1));
            }
        }
    }
}

impl Tape {
    /// `x·w + b` over the last axis of `x` (`[.., k]`), with `w` `[k, n]` and `b` `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != k || self.shape(b) != [ws[1]] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let n = ws[1];
        let m = self.value(x).numel() / k;
        let mut out = Vec::with_capacity(m * n);
        let bias = self.value(b).data();
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, 1.0, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), 1.0, &mut out, (n, 1));
        let mut shape = xs;
        *shape.last_mut().expect("rank checked") = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, &[x, w, b], Box::new(Linear { m, k, n })))
    }

    /// Scaled dot-product self-attention. `qkv` is `[b, T, 3z]` with the last
    /// axis ordered (query|key|value, head, channel); the result is `[b, T, z]`
    /// ordered (head, channel).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(3 * heads) {
            return Err(Error::dim("attention", &s, &[heads]));
        }
        let (batch, t, z) = (s[0], s[1], s[2] / 3);
        let dh = z / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; batch * t * z];
        let mut probs = vec![0.0; batch * heads * t * t];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                let base = b * t * 3 * z + h * dh;
                gemm(t, dh, t, scale, &src[base..], (3 * z, 1), &src[base + z..], (1, 3 * z), 0.0, p, (t, 1));
                p.chunks_exact_mut(t).for_each(softmax_row);
                gemm(t, t, dh, 1.0, p, (t, 1), &src[base + 2 * z..], (3 * z, 1), 0.0, &mut out[b * t * z + h * dh..], (z, 1));
            }
        }
        let value = Tensor::new([batch, t, z], out)?;
        let rule = Attention {
            batch,
            tokens: t,
            heads,
            head_dim: dh,
            scale,
            probs,
        };
        Ok(self.record(value, &[qkv], Box::new(rule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trunc_normal;

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(trunc_normal(&[2, 3, 4], 1.0, 1));
        let w = tape.constant(trunc_normal(&[4, 5], 1.0, 2));
        let b = tape.constant(trunc_normal(&[5], 1.0, 3));
        let fused = tape.linear(x, w, b).unwrap();
        let flat = tape.reshape(x, &[6, 4]).unwrap();
        let y = tape.matmul(flat, w).unwrap();
        let y = tape.add_trailing(y, b).unwrap();
        assert_eq!(tape.shape(fused), &[2, 3, 5]);
        for (a, b) in tape.value(fused).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_matches_composite() {
        let (batch, t, heads, dh) = (2, 5, 3, 2);
        let z = heads * dh;
        let mut tape = Tape::new();
        let qkv = tape.constant(trunc_normal(&[batch, t, 3 * z], 1.0, 4));
        let fused = tape.attention(qkv, heads).unwrap();

        let r = tape.reshape(qkv, &[batch, t, 3, heads, dh]).unwrap();
        let r = tape.permute(r, &[2, 0, 3, 1, 4]).unwrap();
        let mut parts = Vec::new();
        for k in 0..3 {
            let v = tape.narrow(r, 0, k, 1).unwrap();
            parts.push(tape.reshape(v, &[batch * heads, t, dh]).unwrap());
        }
        let q = tape.scale(parts[0], 1.0 / (dh as f64).sqrt());
        let scores = tape.bmm(q, parts[1], true).unwrap();
        let w = tape.softmax(scores, 2).unwrap();
        let ctx = tape.bmm(w, parts[2], false).unwrap();
        let ctx = tape.reshape(ctx, &[batch, heads, t, dh]).unwrap();
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]).unwrap();
        let ctx = tape.reshape(ctx, &[batch, t, z]).unwrap();
        for (a, b) in tape.value(fused).data().iter().zip(tape.value(ctx).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rejects_bad_width() {
        let mut tape = Tape::new();
        let qkv = tape.constant(Tensor::zeros([1, 2, 7]));
        assert!(tape.attention(qkv, 2).is_err());
    }
}
