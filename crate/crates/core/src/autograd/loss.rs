use super::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Mse;

impl Backward for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let k = 2.0 * ctx.grad[0] / p.len() as f64;
        if let Some(gp) = grads[0].as_mut() {
            for i in 0..p.len() {
                gp[i] += k * (p[i] - t[i]);
            }
        }
        if let Some(gt) = grads[1].as_mut() {
            for i in 0..p.len() {
                gt[i] -= k * (p[i] - t[i]);
            }
        }
    }
}

struct CrossEntropy {
    classes: usize,
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl Backward for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let Some(gx) = grads[0].as_mut() else { return };
        let c = self.classes;
        let k = ctx.grad[0] / self.labels.len() as f64;
        for (row, &label) in self.labels.iter().enumerate() {
            for j in 0..c {
                let onehot = if j == label { 1.0 } else { 0.0 };
                gx[row * c + j] += k * (self.probs[row * c + j] - onehot);
            }
        }
    }
}

impl Tape {
    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", self.shape(pred), self.shape(target)));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.record(Tensor::scalar(loss), &[pred, target], Box::new(Mse)))
    }

    /// Mean negative log-softmax probability of each row's label. `logits` is `[b, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let r = &x[row * c..(row + 1) * c];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..c {
                probs[row * c + j] = (r[j] - log_z).exp();
            }
            total += log_z - r[label];
        }
        let loss = total / labels.len() as f64;
        let rule = CrossEntropy {
            classes: c,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(Tensor::scalar(loss), &[logits], Box::new(rule)))
    }
}
