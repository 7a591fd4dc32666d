//! SGD with momentum, Adam, and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::is_blend_param;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `base · (1 + cos(π·s/total)) / 2`, held at zero past `total`.
    Cosine { total_steps: usize },
}

impl Schedule {
    pub fn lr(&self, base: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { total_steps } => {
                let s = step.min(total_steps) as f64 / total_steps.max(1) as f64;
                base * (1.0 + (PI * s).cos()) / 2.0
            }
        }
    }
}

/// Per-parameter buffers keyed by parameter name. A buffer whose shape no
/// longer matches its parameter (a swapped head) starts over from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

fn buffer<'a>(map: &'a mut BTreeMap<String, Vec<f64>>, name: &str, len: usize) -> &'a mut Vec<f64> {
    let b = map.entry(name.to_string()).or_default();
    if b.len() != len {
        *b = vec![0.0; len];
    }
    b
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` to every parameter that
    /// holds a gradient. Blend ratios never receive weight decay.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad() else { continue };
            let g = g.to_vec();
            let len = g.len();
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    let wd = if is_blend_param(name) { 0.0 } else { weight_decay };
                    let v = buffer(&mut self.first, name, len);
                    for ((v, th), g) in v.iter_mut().zip(p.data_mut()).zip(&g) {
                        *v = momentum * *v + g + wd * *th;
                        *th -= lr * *v;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let wd = if is_blend_param(name) { 0.0 } else { weight_decay };
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let m = buffer(&mut self.first, name, len);
                    let v = buffer(&mut self.second, name, len);
                    for (((m, v), th), g) in m.iter_mut().zip(v.iter_mut()).zip(p.data_mut()).zip(&g) {
                        let g = g + wd * *th;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *th -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Buffers as named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let dump = |prefix: &str, map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .filter(|(_, b)| !b.is_empty())
                .map(|(n, b)| (format!("{prefix}{n}"), Tensor::new([b.len()], b.clone()).expect("non-empty")))
                .collect::<Vec<_>>()
        };
        let mut out = vec![("optim.steps".to_string(), Tensor::scalar(self.steps as f64))];
        out.extend(dump("optim.first.", &self.first));
        out.extend(dump("optim.second.", &self.second));
        out
    }

    /// Inverse of [`Optimizer::state_tensors`]; tensors without the
    /// optimizer prefix are ignored.
    pub fn from_state(kind: OptimizerKind, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut opt = Self::new(kind)?;
        for (name, t) in tensors {
            if name == "optim.steps" {
                opt.steps = t.item() as u64;
            } else if let Some(n) = name.strip_prefix("optim.first.") {
                opt.first.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("optim.second.") {
                opt.second.insert(n.to_string(), t.data().to_vec());
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimizes `Σ a_i (θ_i − c_i)² / 2` and returns the final θ and gradient.
    fn minimize(kind: OptimizerKind, a: &[f64], c: &[f64], steps: usize, schedule: Schedule) -> (Vec<f64>, Vec<f64>) {
        let mut opt = Optimizer::new(kind).unwrap();
        let mut theta = Tensor::zeros([a.len()]).with_requires_grad(true);
        let grad = |th: &[f64]| -> Vec<f64> { th.iter().zip(a).zip(c).map(|((t, a), c)| a * (t - c)).collect() };
        for s in 0..steps {
            let g = grad(theta.data());
            theta.set_grad(g).unwrap();
            let lr = schedule.lr(kind.base_lr(), s);
            opt.step(&mut [("w".into(), &mut theta)], lr).unwrap();
        }
        let g = grad(theta.data());
        (theta.data().to_vec(), g)
    }

    #[test]
    fn sgd_scalar_quadratic() {
        // θ ← θ − lr·a·(θ − c) contracts the error by |1 − lr·a| = 0.9 per step
        let (th, _) = minimize(OptimizerKind::sgd(0.1, 0.0, 0.0), &[1.0], &[3.0], 200, Schedule::Constant);
        let oracle = 3.0 * (1.0 - 0.9f64.powi(200));
        assert!((th[0] - oracle).abs() < 1e-12);
        assert!((th[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn both_optimizers_solve_a_ten_dimensional_quadratic() {
        let a: Vec<f64> = (1..=10).map(|i| 0.5 + 0.25 * i as f64).collect();
        let c: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect();
        let (_, g) = minimize(OptimizerKind::sgd(0.2, 0.9, 0.0), &a, &c, 2000, Schedule::Constant);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
        let (_, g) = minimize(OptimizerKind::adam(0.05), &a, &c, 3000, Schedule::Cosine { total_steps: 3000 });
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8, "{g:?}");
    }

    #[test]
    fn cosine_midpoint_and_end() {
        let s = Schedule::Cosine { total_steps: 100 };
        assert!((s.lr(0.01, 50) - 0.005).abs() < 1e-15);
        assert_eq!(s.lr(0.01, 0), 0.01);
        assert!(s.lr(0.01, 100).abs() < 1e-18);
        assert_eq!(Schedule::Constant.lr(0.3, 1000), 0.3);
    }

    #[test]
    fn zero_lr_is_a_null_step() {
        for kind in [OptimizerKind::sgd(0.0, 0.9, 1e-4), OptimizerKind::adam(0.0)] {
            let mut opt = Optimizer::new(kind).unwrap();
            let mut w = Tensor::full([3], 0.7).with_requires_grad(true);
            w.set_grad(vec![1.0, -2.0, 3.0]).unwrap();
            opt.step(&mut [("w".into(), &mut w)], 0.0).unwrap();
            assert_eq!(w.data(), &[0.7; 3]);
        }
    }

    #[test]
    fn blend_ratios_skip_weight_decay() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0, 0.5)).unwrap();
        let mut r = Tensor::full([2], 1.0).with_requires_grad(true);
        let mut w = Tensor::full([2], 1.0).with_requires_grad(true);
        r.set_grad(vec![0.0; 2]).unwrap();
        w.set_grad(vec![0.0; 2]).unwrap();
        opt.step(&mut [("blend.R.layer1".into(), &mut r), ("blocks.0.attn.qkv.w".into(), &mut w)], 0.1)
            .unwrap();
        assert_eq!(r.data(), &[1.0, 1.0]);
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn state_round_trip() {
        let mut opt = Optimizer::new(OptimizerKind::adam(0.01)).unwrap();
        let mut w = Tensor::full([3], 0.7).with_requires_grad(true);
        w.set_grad(vec![1.0, -2.0, 3.0]).unwrap();
        opt.step(&mut [("w".into(), &mut w)], 0.01).unwrap();
        let back = Optimizer::from_state(opt.kind(), &opt.state_tensors()).unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn bad_settings_are_rejected() {
        assert!(Optimizer::new(OptimizerKind::sgd(0.1, 1.5, 0.0)).is_err());
    }
}
