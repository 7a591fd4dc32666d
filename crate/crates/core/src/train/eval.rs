//! Validation metrics under plain, multi-crop and shuffled presentation.

use crate::data::{Pipeline, TargetKind, View};
use crate::error::{Error, Result};
use crate::model::{VideoViT, TARGET_WIDTH};
use crate::tensor::Tensor;

use super::log::Metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Plain,
    /// Outputs averaged over the first `k` fixed crops.
    KCrop(usize),
    /// A fresh per-clip frame permutation derived from the seed.
    Shuffled(u64),
}

/// Evaluates `model` on validation clips `0..clips`.
pub fn evaluate(
    model: &VideoViT,
    data: &Pipeline,
    clips: usize,
    target: TargetKind,
    mode: EvalMode,
    batch: usize,
) -> Result<Metrics> {
    evaluate_with(|frames| model.predict(frames), data, clips, target, mode, batch)
}

/// Same as [`evaluate`] for any predictor mapping a frame batch to outputs.
pub fn evaluate_with<F>(
    mut predict: F,
    data: &Pipeline,
    clips: usize,
    target: TargetKind,
    mode: EvalMode,
    batch: usize,
) -> Result<Metrics>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if clips == 0 {
        return Err(Error::Contract("evaluation over an empty dataset".into()));
    }
    let views: Vec<View> = match mode {
        EvalMode::Plain => vec![View::Plain],
        EvalMode::KCrop(k) => {
            if !(1..=crate::data::MAX_CROPS).contains(&k) {
                return Err(Error::Spec(format!("k-crop needs 1 to {} crops, got {k}", crate::data::MAX_CROPS)));
            }
            (0..k).map(View::Crop).collect()
        }
        EvalMode::Shuffled(seed) => vec![View::Shuffled(seed)],
    };
    let batch = batch.max(1);
    let mut acc = Accumulator::default();
    let mut start = 0;
    while start < clips {
        let end = (start + batch).min(clips);
        let range = start as u64..end as u64;
        let mut mean: Option<Vec<f64>> = None;
        let mut reference = None;
        for &view in &views {
            let b = data.batch(range.clone(), target, view)?;
            let out = predict(&b.frames)?;
            match mean.as_mut() {
                None => mean = Some(out.into_data()),
                Some(m) => m.iter_mut().zip(out.data()).for_each(|(a, v)| *a += v),
            }
            reference.get_or_insert(b);
        }
        let mut mean = mean.expect("at least one view");
        let k = views.len() as f64;
        mean.iter_mut().for_each(|v| *v /= k);
        let b = reference.expect("at least one view");
        match &b.targets {
            None => acc.classify(&mean, &b.labels)?,
            Some(t) => acc.regress(&mean, t.data(), b.len())?,
        }
        start = end;
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct Accumulator {
    count: usize,
    loss: f64,
    correct: usize,
    pos: f64,
    vel: f64,
    rows: usize,
    regression: bool,
}

impl Accumulator {
    fn classify(&mut self, logits: &[f64], labels: &[usize]) -> Result<()> {
        if labels.is_empty() || !logits.len().is_multiple_of(labels.len()) {
            return Err(Error::dim("evaluate", &[logits.len()], &[labels.len()]));
        }
        let c = logits.len() / labels.len();
        for (row, &label) in logits.chunks_exact(c).zip(labels) {
            if label >= c {
                return Err(Error::Label { label, classes: c });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            self.loss += lse - row[label];
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            self.correct += (arg == label) as usize;
            self.count += 1;
        }
        Ok(())
    }

    fn regress(&mut self, pred: &[f64], target: &[f64], clips: usize) -> Result<()> {
        if pred.len() != target.len() || !pred.len().is_multiple_of(TARGET_WIDTH) {
            return Err(Error::dim("evaluate", &[pred.len()], &[target.len()]));
        }
        self.regression = true;
        for (p, t) in pred.chunks_exact(TARGET_WIDTH).zip(target.chunks_exact(TARGET_WIDTH)) {
            let sq: Vec<f64> = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).collect();
            self.pos += sq[..3].iter().sum::<f64>() / 3.0;
            self.vel += sq[3..].iter().sum::<f64>() / 3.0;
            self.loss += sq.iter().sum::<f64>() / TARGET_WIDTH as f64;
        }
        self.rows += pred.len() / TARGET_WIDTH;
        self.count += clips;
        Ok(())
    }

    fn finish(self) -> Metrics {
        if self.regression {
            let n = self.rows as f64;
            Metrics {
                loss: self.loss / n,
                accuracy: None,
                pos_mse: Some(self.pos / n),
                vel_mse: Some(self.vel / n),
                count: self.count,
            }
        } else {
            let n = self.count as f64;
            Metrics {
                loss: self.loss / n,
                accuracy: Some(self.correct as f64 / n),
                pos_mse: None,
                vel_mse: None,
                count: self.count,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{static_oracle, Split, TaskSpec, STATIC_CLASSES};

    fn oracle_logits(frames: &Tensor) -> Result<Tensor> {
        let s = frames.shape();
        let (b, n, size, c) = (s[0], s[1], s[2], s[4]);
        let per_frame = size * size * c;
        let mut out = vec![0.0; b * STATIC_CLASSES];
        for i in 0..b {
            let first = &frames.data()[i * n * per_frame..][..per_frame];
            out[i * STATIC_CLASSES + static_oracle(first, size, c).unwrap()] = 10.0;
        }
        Tensor::new([b, STATIC_CLASSES], out)
    }

    #[test]
    fn oracle_predictor_is_perfect_in_every_mode() {
        let val = Pipeline::new(TaskSpec::still(3), Split::Val).unwrap();
        for mode in [EvalMode::Plain, EvalMode::KCrop(5), EvalMode::Shuffled(1)] {
            let m = evaluate_with(oracle_logits, &val, 24, TargetKind::Label, mode, 10).unwrap();
            assert_eq!(m.accuracy, Some(1.0));
            assert_eq!(m.count, 24);
        }
    }

    #[test]
    fn exact_regression_has_zero_error() {
        let val = Pipeline::new(TaskSpec::falling(3), Split::Val).unwrap();
        let target = TargetKind::Future(2);
        let truth: Vec<Tensor> = (0..2).map(|k| val.batch(k * 5..k * 5 + 5, target, View::Plain).unwrap().targets.unwrap()).collect();
        let mut calls = 0;
        let m = evaluate_with(
            |_| {
                calls += 1;
                Ok(truth[calls - 1].clone())
            },
            &val,
            10,
            target,
            EvalMode::Plain,
            5,
        )
        .unwrap();
        assert_eq!((m.loss, m.pos_mse, m.vel_mse), (0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn identical_crops_average_to_plain() {
        // with crop == canvas every fixed crop is the whole frame
        let spec = TaskSpec {
            crop: None,
            canvas: 32,
            ..TaskSpec::still(2)
        };
        let val = Pipeline::new(spec, Split::Val).unwrap();
        let model_like = |f: &Tensor| -> Result<Tensor> {
            let b = f.shape()[0];
            let per = f.numel() / b;
            let out: Vec<f64> = (0..b * STATIC_CLASSES)
                .map(|k| f.data()[(k / STATIC_CLASSES) * per..][..per].iter().skip(k % STATIC_CLASSES).step_by(7).sum())
                .collect();
            Tensor::new([b, STATIC_CLASSES], out)
        };
        let plain = evaluate_with(model_like, &val, 12, TargetKind::Label, EvalMode::Plain, 4).unwrap();
        let kcrop = evaluate_with(model_like, &val, 12, TargetKind::Label, EvalMode::KCrop(5), 4).unwrap();
        assert_eq!(plain.accuracy, kcrop.accuracy);
        assert!((plain.loss - kcrop.loss).abs() < 1e-9);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let val = Pipeline::new(TaskSpec::still(3), Split::Val).unwrap();
        assert!(matches!(
            evaluate_with(oracle_logits, &val, 0, TargetKind::Label, EvalMode::Plain, 4),
            Err(Error::Contract(_))
        ));
    }
}
