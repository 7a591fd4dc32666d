//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of every backward rule it is used to verify.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{ForwardOptions, VideoViT};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Builds the scalar `build(tape, inputs)` once with gradients, then compares
/// the gradient of every input against central differences. Returns the
/// maximum relative error per input.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut others = inputs.to_vec();
        let mut err = None;
        let numeric = numeric_gradient(x, step, |probe| {
            others[k] = probe.clone();
            eval(&others).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        let max = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        worst.push(max);
    }
    Ok(worst)
}

/// Worst relative error of one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
}

/// Compares the analytic gradient of `loss(model(frames))` for every parameter
/// tensor against central differences. `faulty_blend_grad` swaps in the
/// deliberately wrong blend backward used as a negative control.
pub fn check_model<L>(model: &VideoViT, frames: &Tensor, step: f64, faulty_blend_grad: bool, loss: L) -> Result<Vec<GroupError>>
where
    L: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |m: &VideoViT| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, frames, ForwardOptions::eval())?;
        let l = loss(&mut tape, fwd.output)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let opts = ForwardOptions {
        faulty_blend_grad,
        ..ForwardOptions::default()
    };
    let fwd = model.forward(&mut tape, frames, opts)?;
    let l = loss(&mut tape, fwd.output)?;
    tape.backward(l)?;

    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, var) in &fwd.bindings {
        let k = probe
            .params()
            .iter()
            .position(|(n, _)| n == name)
            .expect("every binding names a parameter");
        let analytic = tape.grad(*var).map(<[f64]>::to_vec);
        let numel = tape.value(*var).numel();
        let mut worst: f64 = 0.0;
        for i in 0..numel {
            let orig = probe.params_mut()[k].1.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.params_mut()[k].1.data_mut()[i] = v;
                eval(&probe)
            };
            let numeric = (at(orig + step)? - at(orig - step)?) / (2.0 * step);
            probe.params_mut()[k].1.data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        out.push(GroupError {
            name: name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_numeric_gradient() {
        let x = Tensor::new([2], vec![1.5, -0.5]).unwrap();
        let g = numeric_gradient(&x, DEFAULT_STEP, |t| t.data().iter().map(|v| v * v).sum());
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!((g[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.1) > 0.09);
        assert!(relative_error(1e-12, 2e-12) < 1e-5);
    }
}
