//! Step and evaluation records, serialized as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed CSV header; one row per step or evaluation record.
pub const CSV_HEADER: &str = "kind,step,stage,loss,lr,val_loss,accuracy,pos_mse,vel_mse,identity_distances";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// 0 outside the curriculum's future stages, otherwise the distance `t`.
    pub stage: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub stage: usize,
    pub metrics: Metrics,
    /// `(layer, ‖R − I‖_F)` for every blend layer.
    pub identity_distances: Vec<(usize, f64)>,
}

/// Validation metrics. Classification fills `accuracy`; regression fills the
/// position and velocity errors, each averaged over its three components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub pos_mse: Option<f64>,
    pub vel_mse: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricLog {
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::State(format!("step {} logged after step {}", rec.step, last.step)));
            }
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn push_eval(&mut self, rec: EvalRecord) -> Result<()> {
        if self.steps.binary_search_by_key(&rec.step, |s| s.step).is_err() {
            return Err(Error::State(format!("evaluation at unlogged step {}", rec.step)));
        }
        self.evals.push(rec);
        Ok(())
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Distinct stages in the order first seen.
    pub fn stages(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for s in &self.steps {
            if out.last() != Some(&s.stage) {
                out.push(s.stage);
            }
        }
        out
    }

    /// Records sorted by step, each evaluation after the step it follows.
    /// Floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let _ = writeln!(out, "step,{},{},{:?},{:?},,,,,", s.step, s.stage, s.loss, s.lr);
            while let Some(e) = evals.next_if(|e| e.step == s.step) {
                let ids: Vec<String> = e.identity_distances.iter().map(|(l, d)| format!("{l}:{d:?}")).collect();
                let m = &e.metrics;
                let _ = writeln!(
                    out,
                    "eval,{},{},,,{:?},{},{},{},{}",
                    e.step,
                    e.stage,
                    m.loss,
                    opt(m.accuracy),
                    opt(m.pos_mse),
                    opt(m.vel_mse),
                    ids.join(";")
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_contracts() {
        let mut log = MetricLog::default();
        let rec = |step| StepRecord {
            step,
            stage: 0,
            loss: 1.0,
            lr: 0.1,
        };
        log.push_step(rec(0)).unwrap();
        assert!(log.push_step(rec(0)).is_err());
        let eval = |step| EvalRecord {
            step,
            stage: 0,
            metrics: Metrics::default(),
            identity_distances: vec![(1, 0.5)],
        };
        assert!(log.push_eval(eval(3)).is_err());
        log.push_eval(eval(0)).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with("1:0.5"));
    }
}
