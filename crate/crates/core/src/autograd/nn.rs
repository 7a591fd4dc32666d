//! Neural-network primitives: softmax, layer normalization, GELU, dropout.

use rand::Rng;

use super::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52

/// `e^x` within one ulp of libm, written so that loops over it vectorize.
/// Range reduction `x = k·ln2 + r` with `|r| ≤ ln2/2`, then a degree-13
/// Taylor polynomial in `r` scaled by `2^k` built from its bit pattern.
#[inline(always)]
pub(crate) fn fast_exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * std::f64::consts::LOG2_E + ROUND_SHIFT;
    let kf = t - ROUND_SHIFT;
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    const C: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let p = C[12] + r * C[13];
    let p = C[11] + r * p;
    let p = C[10] + r * p;
    let p = C[9] + r * p;
    let p = C[8] + r * p;
    let p = C[7] + r * p;
    let p = C[6] + r * p;
    let p = C[5] + r * p;
    let p = C[4] + r * p;
    let p = C[3] + r * p;
    let p = C[2] + r * p;
    let p = C[1] + r * p;
    let p = C[0] + r * p;
    let k = t.to_bits().wrapping_sub(ROUND_SHIFT.to_bits());
    let y = p * f64::from_bits(k.wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        y
    }
}

/// `tanh` through one `exp`, several times cheaper than libm's `tanh`.
/// Absolute error stays within a few ulps of 1; saturates to ±1 through the
/// clamping inside [`fast_exp`].
pub(super) fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * u) + 1.0)
}

/// GELU (tanh approximation) and its derivative, elementwise.
fn gelu_with_grad(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut th: Vec<f64> = x.iter().map(|&v| GELU_C * (v + GELU_A * v * v * v)).collect();
    th.iter_mut().for_each(|u| *u = tanh(*u));
    let dy = x
        .iter()
        .zip(&th)
        .map(|(&v, &t)| 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
        .collect();
    let y = x.iter().zip(&th).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
    (y, dy)
}

/// Elementwise op whose local derivative was computed alongside the forward value.
struct Pointwise {
    name: &'static str,
    deriv: Vec<f64>,
}

impl Backward for Pointwise {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            for ((a, g), d) in gx.iter_mut().zip(ctx.grad).zip(&self.deriv) {
                *a += g * d;
            }
        }
    }
}

/// In-place max-subtracted softmax of one contiguous row.
pub(super) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
    // exponentiate and sum in separate passes so the first one vectorizes
    row.iter_mut().for_each(|v| *v = fast_exp(*v - max));
    let inv = 1.0 / row.iter().sum::<f64>();
    row.iter_mut().for_each(|v| *v *= inv);
}

struct Softmax {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let (y, g) = (ctx.output.data(), ctx.grad);
        let (extent, inner) = (self.extent, self.inner);
        if inner == 1 {
            for ((gr, yr), out) in g.chunks_exact(extent).zip(y.chunks_exact(extent)).zip(gx.chunks_exact_mut(extent)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o += yv * (gv - dot);
                }
            }
            return;
        }
        for o in 0..self.outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut dot = 0.0;
                for e in 0..extent {
                    let k = base + e * inner;
                    dot += g[k] * y[k];
                }
                for e in 0..extent {
                    let k = base + e * inner;
                    gx[k] += y[k] * (g[k] - dot);
                }
            }
        }
    }
}

struct LayerNorm {
    width: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let w = self.width;
        let gain = ctx.inputs[1].data();
        let g = ctx.grad;
        if let Some(gg) = grads[1].as_mut() {
            for (gr, xr) in g.chunks_exact(w).zip(self.xhat.chunks_exact(w)) {
                for j in 0..w {
                    gg[j] += gr[j] * xr[j];
                }
            }
        }
        if let Some(gb) = grads[2].as_mut() {
            for gr in g.chunks_exact(w) {
                for j in 0..w {
                    gb[j] += gr[j];
                }
            }
        }
        if let Some(gx) = grads[0].as_mut() {
            let mut gxhat = vec![0.0; w];
            for (row, (gr, xr)) in g.chunks_exact(w).zip(self.xhat.chunks_exact(w)).enumerate() {
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for j in 0..w {
                    gxhat[j] = gr[j] * gain[j];
                    mean_g += gxhat[j];
                    mean_gx += gxhat[j] * xr[j];
                }
                mean_g /= w as f64;
                mean_gx /= w as f64;
                let rstd = self.rstd[row];
                let out = &mut gx[row * w..(row + 1) * w];
                for j in 0..w {
                    out[j] += rstd * (gxhat[j] - mean_g - xr[j] * mean_gx);
                }
            }
        }
    }
}

struct Dropout {
    mask: Vec<f64>,
}

impl Backward for Dropout {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[0].as_mut() {
            for ((a, g), m) in gx.iter_mut().zip(ctx.grad).zip(&self.mask) {
                *a += g * m;
            }
        }
    }
}

impl Tape {
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (value, deriv) = gelu_with_grad(t.data());
        let value = Tensor::new(t.shape().to_vec(), value).expect("same shape");
        self.record(value, &[x], Box::new(Pointwise { name: "gelu", deriv }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, extent, inner) = (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]));
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            out.copy_from_slice(src);
            out.chunks_exact_mut(extent).for_each(softmax_row);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for e in 0..extent {
                        max = max.max(src[base + e * inner]);
                    }
                    let mut total = 0.0;
                    for e in 0..extent {
                        let k = base + e * inner;
                        let v = fast_exp(src[k] - max);
                        out[k] = v;
                        total += v;
                    }
                    let inv = 1.0 / total;
                    for e in 0..extent {
                        out[base + e * inner] *= inv;
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, &[x], Box::new(Softmax { outer, extent, inner })))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::dim("layernorm", &shape, &[]))?;
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::dim("layernorm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let (xd, gd, bd) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / w;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..w {
                let h = (row[j] - mean) * s;
                xhat[r * w + j] = h;
                out[r * w + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rule = LayerNorm { width: w, xhat, rstd };
        Ok(self.record(value, &[x, gain, bias], Box::new(rule)))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.record(value, &[x], Box::new(Dropout { mask })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -700.0 + 1409.0 * i as f64 / 200_000.0;
            worst = worst.max(((fast_exp(x) - x.exp()) / x.exp()).abs());
        }
        assert!(worst <= 2.0 * f64::EPSILON, "{worst:e}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-1000.0), 0.0);
        assert!(fast_exp(f64::NEG_INFINITY) == 0.0);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new([2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let x = tape.constant(Tensor::new([2, 3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|e| v[o * 12 + e * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(v.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 4], 3.5));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..15).map(|i| ((i * 7) % 5) as f64 * 0.3 - (i as f64) * 0.1).collect();
        let x = tape.constant(Tensor::new([3, 5], data).unwrap());
        let g = tape.constant(Tensor::full([5], 1.0));
        let bias = [0.5, -1.0, 2.0, 0.0, 1.0];
        let b = tape.constant(Tensor::new([5], bias.to_vec()).unwrap());
        let y = tape.layernorm(x, g, b, 1e-14).unwrap();
        let bias_mean = bias.iter().sum::<f64>() / 5.0;
        for row in tape.value(y).data().chunks(5) {
            let centered: Vec<f64> = row.iter().zip(&bias).map(|(v, b)| v - b).collect();
            let mean = centered.iter().sum::<f64>() / 5.0;
            let var = centered.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
            assert!((row.iter().sum::<f64>() / 5.0 - bias_mean).abs() < 1e-10);
        }
    }

    #[test]
    fn dropout_zero_rate_is_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([4], 2.0));
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }
}
