//! Linear algebra, elementwise arithmetic and shape manipulation.

use super::{gemm, Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        if let Some(ga) = grads[0].as_mut() {
            // dA = G·Bᵀ
            gemm(m, n, k, 1.0, g, (n, 1), b, (1, n), 1.0, ga, (k, 1));
        }
        if let Some(gb) = grads[1].as_mut() {
            // dB = Aᵀ·G
            gemm(k, m, n, 1.0, a, (1, k), g, (n, 1), 1.0, gb, (n, 1));
        }
    }
}

struct BatchMatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
}

impl Backward for BatchMatMul {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        // b is stored k×n, or n×k when transposed.
        let bs = if self.transpose_b { (1, k) } else { (n, 1) };
        let bts = (bs.1, bs.0);
        let (sa, sb, sg) = (m * k, k * n, m * n);
        for t in 0..self.batch {
            let (at, bt, gt) = (&a[t * sa..], &b[t * sb..], &g[t * sg..(t + 1) * sg]);
            if let Some(ga) = grads[0].as_mut() {
                gemm(m, n, k, 1.0, gt, (n, 1), bt, bts, 1.0, &mut ga[t * sa..(t + 1) * sa], (k, 1));
            }
            if let Some(gb) = grads[1].as_mut() {
                let out = &mut gb[t * sb..(t + 1) * sb];
                // dB = Aᵀ·G, written through the same layout as b.
                gemm(k, m, n, 1.0, at, (1, k), gt, (n, 1), 1.0, out, bs);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary(BinaryKind);

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let g = ctx.grad;
        let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        match self.0 {
            BinaryKind::Add | BinaryKind::Sub => {
                if let Some(gx) = grads[0].as_mut() {
                    add_into(gx, g);
                }
                if let Some(gy) = grads[1].as_mut() {
                    if matches!(self.0, BinaryKind::Add) {
                        add_into(gy, g);
                    } else {
                        gy.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
                    }
                }
            }
            BinaryKind::Mul => {
                if let Some(gx) = grads[0].as_mut() {
                    for ((a, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *a += gi * yi;
                    }
                }
                if let Some(gy) = grads[1].as_mut() {
                    for ((a, gi), xi) in gy.iter_mut().zip(g).zip(x) {
                        *a += gi * xi;
                    }
                }
            }
        }
    }
}

struct AddTrailing {
    block: usize,
}

impl Backward for AddTrailing {
    fn name(&self) -> &'static str {
        "add_trailing"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            add_into(gx, ctx.grad);
        }
        if let Some(gy) = grads[1].as_mut() {
            for chunk in ctx.grad.chunks_exact(self.block) {
                add_into(gy, chunk);
            }
        }
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            for (a, g) in gx.iter_mut().zip(ctx.grad) {
                *a += self.0 * g;
            }
        }
    }
}

/// Elementwise map whose derivative is a function of input and output.
pub(super) struct Unary {
    pub name: &'static str,
    pub deriv: fn(f64, f64) -> f64,
}

impl Backward for Unary {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            let (x, y) = (ctx.inputs[0].data(), ctx.output.data());
            for i in 0..gx.len() {
                gx[i] += ctx.grad[i] * (self.deriv)(x[i], y[i]);
            }
        }
    }
}

struct SumAll {
    scale: f64,
}

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            let g = ctx.grad[0] * self.scale;
            gx.iter_mut().for_each(|a| *a += g);
        }
    }
}

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            add_into(gx, ctx.grad);
        }
    }
}

/// Gathers `src` laid out with `in_shape` into the order given by `axes`.
/// When `scatter` is set the mapping runs backwards and accumulates.
fn permute_copy(in_shape: &[usize], axes: &[usize], src: &[f64], dst: &mut [f64], scatter: bool) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let inner = out_shape.last().copied().unwrap_or(1);
    let inner_stride = strides.last().copied().unwrap_or(1);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            let s = base + j * inner_stride;
            if scatter {
                dst[s] += src[o + j];
            } else {
                dst[o + j] = src[s];
            }
        }
        o += inner;
        // Advance the multi-index over all but the innermost output axis.
        for d in (0..rank.saturating_sub(1)).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct Permute {
    in_shape: Vec<usize>,
    axes: Vec<usize>,
}

impl Backward for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            permute_copy(&self.in_shape, &self.axes, ctx.grad, gx, true);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

struct Narrow {
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            let chunk = self.len * self.inner;
            for o in 0..self.outer {
                let src = &ctx.grad[o * chunk..(o + 1) * chunk];
                let off = (o * self.extent + self.start) * self.inner;
                add_into(&mut gx[off..off + chunk], src);
            }
        }
    }
}

struct Concat {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        for (i, &e) in self.extents.iter().enumerate() {
            if let Some(gx) = grads[i].as_mut() {
                let chunk = e * self.inner;
                for o in 0..self.outer {
                    let src = (o * total + offset) * self.inner;
                    add_into(&mut gx[o * chunk..(o + 1) * chunk], &ctx.grad[src..src + chunk]);
                }
            }
            offset += e;
        }
    }
}

impl Tape {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out, (n, 1));
        let value = Tensor::new([m, n], out)?;
        Ok(self.record(value, &[a, b], Box::new(MatMul { m, k, n })))
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]`, or with `b[B×n×k]`
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let bs = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &ad[t * m * k..],
                    (k, 1),
                    &bd[t * k * n..],
                    bs,
                    0.0,
                    &mut out[t * m * n..(t + 1) * m * n],
                    (n, 1),
                );
            }
        }
        let value = Tensor::new([batch, m, n], out)?;
        let rule = BatchMatMul {
            batch,
            m,
            k,
            n,
            transpose_b,
        };
        Ok(self.record(value, &[a, b], Box::new(rule)))
    }

    fn binary(&mut self, x: Var, y: Var, kind: BinaryKind, op: &'static str) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::dim(op, self.shape(x), self.shape(y)));
        }
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let data: Vec<f64> = match kind {
            BinaryKind::Add => xd.iter().zip(yd).map(|(a, b)| a + b).collect(),
            BinaryKind::Sub => xd.iter().zip(yd).map(|(a, b)| a - b).collect(),
            BinaryKind::Mul => xd.iter().zip(yd).map(|(a, b)| a * b).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(value, &[x, y], Box::new(Binary(kind))))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, BinaryKind::Mul, "mul")
    }

    /// Adds `y` to every trailing block of `x`; `y.shape` must equal the
    /// trailing extents of `x` (a bias row, a positional table). This is the
    /// only broadcast the engine supports. The gradient of `y` sums over the
    /// leading axes.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::dim("add_trailing", sx, sy));
        }
        let block = self.value(y).numel();
        let yd = self.value(y).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(block) {
            add_into(chunk, yd);
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.record(value, &[x, y], Box::new(AddTrailing { block })))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        self.record(value, &[x], Box::new(Scale(c)))
    }

    pub(super) fn unary(&mut self, x: Var, f: fn(f64) -> f64, rule: Unary) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        self.record(value, &[x], Box::new(rule))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(
            x,
            super::nn::tanh,
            Unary {
                name: "tanh",
                deriv: |_, y| 1.0 - y * y,
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(
            x,
            f64::exp,
            Unary {
                name: "exp",
                deriv: |_, y| y,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], Box::new(SumAll { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel() as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        self.record(Tensor::scalar(s), &[x], Box::new(SumAll { scale: 1.0 / n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        Ok(self.record(value, &[x], Box::new(Reshape)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len()
            || axes.iter().any(|&a| a >= in_shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &in_shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut out = vec![0.0; numel(&in_shape)];
        permute_copy(&in_shape, axes, self.value(x).data(), &mut out, false);
        let value = Tensor::new(out_shape, out)?;
        let rule = Permute {
            in_shape,
            axes: axes.to_vec(),
        };
        Ok(self.record(value, &[x], Box::new(rule)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let chunk = len * inner;
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let off = (o * extent + start) * inner;
            out.extend_from_slice(&src[off..off + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rule = Narrow {
            outer,
            extent,
            inner,
            start,
            len,
        };
        Ok(self.record(value, &[x], Box::new(rule)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &e) in xs.iter().zip(&extents) {
                let chunk = e * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.record(
            value,
            xs,
            Box::new(Concat {
                outer,
                inner,
                extents,
            }),
        ))
    }
}
