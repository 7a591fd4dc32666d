//! Training plans and the resumable training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalMode};
use super::log::{EvalRecord, MetricLog, StepRecord};
use super::optim::{Optimizer, OptimizerKind, Schedule};
use crate::autograd::Tape;
use crate::data::{Pipeline, Split, TargetKind, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ForwardOptions, HeadKind, VideoViT};
use crate::rng::{named_seed, split_seed};

/// One curriculum stage: `steps` updates regressing the state `distance`
/// frames past the last shown frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub steps: usize,
    pub distance: usize,
}

fn default_eval_clips() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub optimizer: OptimizerKind,
    #[serde(default = "constant")]
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Updates before the curriculum (or in total without one).
    pub total_steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
    #[serde(default)]
    pub seed: u64,
    /// Future-regression stages run after the per-frame phase, with a fresh
    /// future head. Distances must count up by one.
    #[serde(default)]
    pub curriculum: Option<Vec<Stage>>,
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl TrainPlan {
    /// Adam at 1e-3 without weight decay, batch 32.
    pub fn toy(total_steps: usize) -> Self {
        Self {
            optimizer: OptimizerKind::adam(1e-3),
            schedule: Schedule::Constant,
            batch_size: 32,
            total_steps,
            eval_every: total_steps.max(1),
            eval_clips: default_eval_clips(),
            seed: 0,
            curriculum: None,
        }
    }

    /// Stages `t = 1..=max_distance` splitting `phase_steps` evenly.
    pub fn with_curriculum(mut self, phase_steps: usize, max_distance: usize) -> Self {
        let per = phase_steps / max_distance.max(1);
        self.curriculum = Some(
            (1..=max_distance)
                .map(|distance| Stage { steps: per, distance })
                .collect(),
        );
        self
    }

    /// Falling-object recipe at full scale: Adam 1e-3, batch 128, no weight decay.
    pub fn movi_recipe(total_steps: usize) -> Self {
        Self {
            batch_size: 128,
            ..Self::toy(total_steps)
        }
    }

    /// Static-scene recipe at full scale: SGD 0.01 with momentum 0.9, weight
    /// decay 1e-4, cosine annealing over 28k steps, batch 256.
    pub fn kinetics_recipe() -> Self {
        Self {
            optimizer: OptimizerKind::sgd(0.01, 0.9, 1e-4),
            schedule: Schedule::Cosine { total_steps: 28_000 },
            batch_size: 256,
            total_steps: 28_000,
            eval_every: 1_000,
            eval_clips: default_eval_clips(),
            seed: 0,
            curriculum: None,
        }
    }

    /// Direction recipe at full scale: SGD 0.02, cosine over 33k steps, batch 512.
    pub fn ssv2_recipe() -> Self {
        Self {
            optimizer: OptimizerKind::sgd(0.02, 0.9, 1e-4),
            schedule: Schedule::Cosine { total_steps: 33_000 },
            batch_size: 512,
            total_steps: 33_000,
            ..Self::kinetics_recipe()
        }
    }

    pub fn all_steps(&self) -> usize {
        self.total_steps + self.curriculum.iter().flatten().map(|s| s.steps).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 || self.eval_clips == 0 {
            return Err(Error::Config(
                "batch_size, total_steps, eval_every and eval_clips must be positive".into(),
            ));
        }
        if let Some(stages) = &self.curriculum {
            if stages.is_empty() {
                return Err(Error::Config("curriculum has no stages".into()));
            }
            for (k, s) in stages.iter().enumerate() {
                if s.steps == 0 {
                    return Err(Error::Config(format!("curriculum stage {k} has no steps")));
                }
                let ok = if k == 0 { s.distance >= 1 } else { s.distance == stages[k - 1].distance + 1 };
                if !ok {
                    return Err(Error::Config(format!(
                        "curriculum distances must start at 1 or more and grow by one, stage {k} has {}",
                        s.distance
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stage label and target of global step `step`.
    fn stage_at(&self, step: usize, head: HeadKind, future_distance: usize) -> (usize, TargetKind) {
        if let Some(stages) = &self.curriculum {
            let mut end = self.total_steps;
            if step >= end {
                for s in stages {
                    end += s.steps;
                    if step < end {
                        return (s.distance, TargetKind::Future(s.distance));
                    }
                }
            }
        }
        match head {
            HeadKind::Classifier { .. } => (0, TargetKind::Label),
            HeadKind::FrameRegressor => (0, TargetKind::Frames),
            HeadKind::FutureRegressor => (future_distance, TargetKind::Future(future_distance)),
        }
    }

    /// Whether `step` is the last step of the main phase or of a stage.
    fn ends_stage(&self, step: usize) -> bool {
        let mut end = self.total_steps;
        if step + 1 == end {
            return true;
        }
        for s in self.curriculum.iter().flatten() {
            end += s.steps;
            if step + 1 == end {
                return true;
            }
        }
        false
    }
}

/// Owns a model, its optimizer and data, and runs a plan step by step.
pub struct Trainer {
    model: VideoViT,
    plan: TrainPlan,
    task: TaskSpec,
    optimizer: Optimizer,
    train: Pipeline,
    val: Pipeline,
    log: MetricLog,
    next_step: usize,
    data_digest: u64,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    next_step: usize,
    data_digest: u64,
    plan: TrainPlan,
    task: TaskSpec,
    log: MetricLog,
}

impl Trainer {
    pub fn new(model: VideoViT, task: TaskSpec, plan: TrainPlan) -> Result<Self> {
        let optimizer = Optimizer::new(plan.optimizer)?;
        Self::assemble(model, task, plan, optimizer, MetricLog::default(), 0, FNV_OFFSET)
    }

    fn assemble(
        model: VideoViT,
        task: TaskSpec,
        plan: TrainPlan,
        optimizer: Optimizer,
        log: MetricLog,
        next_step: usize,
        data_digest: u64,
    ) -> Result<Self> {
        plan.validate()?;
        task.validate()?;
        check_compatible(model.config(), &task, &plan, next_step)?;
        Ok(Self {
            train: Pipeline::new(task.clone(), Split::Train)?,
            val: Pipeline::new(task.clone(), Split::Val)?,
            model,
            plan,
            task,
            optimizer,
            log,
            next_step,
            data_digest,
        })
    }

    pub fn model(&self) -> &VideoViT {
        &self.model
    }

    pub fn into_model(self) -> VideoViT {
        self.model
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    /// Running FNV-1a digest over every training batch consumed so far
    /// (frame bits, then labels or target bits).
    pub fn data_digest(&self) -> u64 {
        self.data_digest
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.plan.all_steps()
    }

    pub fn validation(&self) -> &Pipeline {
        &self.val
    }

    /// Target of the stage the next step belongs to (the last stage once finished).
    pub fn current_target(&self) -> TargetKind {
        let step = self.next_step.min(self.plan.all_steps() - 1);
        self.plan
            .stage_at(step, self.model.config().head, self.task.future_distance)
            .1
    }

    pub fn run(&mut self) -> Result<&MetricLog> {
        self.run_until(self.plan.all_steps())?;
        Ok(&self.log)
    }

    /// Runs steps until `stop` (exclusive) or the end of the plan.
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        while self.next_step < stop.min(self.plan.all_steps()) {
            self.step()?;
        }
        Ok(())
    }

    /// One forward/backward/update, plus an evaluation when due.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.next_step;
        if self.plan.curriculum.is_some() && step == self.plan.total_steps {
            self.model
                .replace_head(HeadKind::FutureRegressor, named_seed(self.plan.seed, "head.future"))?;
        }
        let (stage, target) = self.plan.stage_at(step, self.model.config().head, self.task.future_distance);
        let batch = self.train.train_batch(step as u64, self.plan.batch_size, target)?;
        let words = batch
            .frames
            .data()
            .iter()
            .map(|v| v.to_bits())
            .chain(batch.labels.iter().map(|&l| l as u64))
            .chain(batch.targets.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())));
        self.data_digest = words.fold(self.data_digest, fnv_word);
        let mut tape = Tape::new();
        let dropout_seed = split_seed(named_seed(self.plan.seed, "dropout"), step as u64);
        let fwd = self
            .model
            .forward(&mut tape, &batch.frames, ForwardOptions::train(dropout_seed))?;
        let loss = match &batch.targets {
            None => tape.cross_entropy(fwd.output, &batch.labels)?,
            Some(t) => {
                let t = tape.constant(t.clone());
                tape.mse(fwd.output, t)?
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step, loss: value });
        }
        tape.backward(loss)?;
        self.model.store_grads(&tape, &fwd)?;
        drop(tape);
        let lr = self.plan.schedule.lr(self.plan.optimizer.base_lr(), step);
        self.optimizer.step(&mut self.model.params_mut(), lr)?;
        self.log.push_step(StepRecord {
            step,
            stage,
            loss: value,
            lr,
        })?;
        self.next_step += 1;
        if (step + 1).is_multiple_of(self.plan.eval_every) || self.plan.ends_stage(step) {
            let metrics = evaluate(
                &self.model,
                &self.val,
                self.plan.eval_clips,
                target,
                EvalMode::Plain,
                self.plan.batch_size,
            )?;
            self.log.push_eval(EvalRecord {
                step,
                stage,
                metrics,
                identity_distances: self.model.identity_distances(),
            })?;
        }
        Ok(value)
    }

    /// Checkpoint holding the model, optimizer buffers, plan, task and log.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.tensors.extend(self.optimizer.state_tensors());
        let state = ResumeState {
            next_step: self.next_step,
            data_digest: self.data_digest,
            plan: self.plan.clone(),
            task: self.task.clone(),
            log: self.log.clone(),
        };
        ck.meta = serde_json::json!({ "trainer": serde_json::to_value(state)? });
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let state: ResumeState = serde_json::from_value(
            ck.meta
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?,
        )?;
        let model = ck.to_model(None)?;
        let optimizer = Optimizer::from_state(state.plan.optimizer, &ck.tensors)?;
        Self::assemble(
            model,
            state.task,
            state.plan,
            optimizer,
            state.log,
            state.next_step,
            state.data_digest,
        )
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv_word(h: u64, w: u64) -> u64 {
    w.to_le_bytes()
        .iter()
        .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn check_compatible(cfg: &crate::model::ModelConfig, task: &TaskSpec, plan: &TrainPlan, next_step: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.n_frames != task.n_frames || cfg.image_size != task.input_size() || cfg.channels != task.channels {
        return bad(format!(
            "model expects {} frames of {}px×{}ch, task yields {} of {}px×{}ch",
            cfg.n_frames,
            cfg.image_size,
            cfg.channels,
            task.n_frames,
            task.input_size(),
            task.channels
        ));
    }
    match (task.task.classes(), cfg.head) {
        (Some(c), HeadKind::Classifier { classes }) if c == classes => {}
        (Some(c), head) => return bad(format!("{:?} task needs a {c}-class classifier head, model has {head:?}", task.task)),
        (None, HeadKind::Classifier { .. }) => return bad("falling-object task needs a regression head".into()),
        (None, _) => {}
    }
    if let Some(stages) = &plan.curriculum {
        if task.task != TaskKind::FallingObject {
            return bad("a curriculum applies only to the falling-object task".into());
        }
        let expected = if next_step <= plan.total_steps {
            HeadKind::FrameRegressor
        } else {
            HeadKind::FutureRegressor
        };
        if cfg.head != expected {
            return bad(format!("at step {next_step} the curriculum expects a {expected:?} head, model has {:?}", cfg.head));
        }
        if let Some(s) = stages.iter().find(|s| s.distance > task.future_distance) {
            return bad(format!(
                "curriculum distance {} exceeds the task's future distance {}",
                s.distance, task.future_distance
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro_falling() -> (ModelConfig, TaskSpec) {
        let task = TaskSpec {
            n_frames: 2,
            canvas: 8,
            objects: 1,
            clip_frames: 9,
            ..TaskSpec::falling(1)
        };
        (ModelConfig::micro(HeadKind::FrameRegressor), task)
    }

    fn plan() -> TrainPlan {
        TrainPlan {
            batch_size: 4,
            eval_every: 3,
            eval_clips: 8,
            ..TrainPlan::toy(6)
        }
        .with_curriculum(8, 4)
    }

    #[test]
    fn curriculum_stages_and_head_swap() {
        let (cfg, task) = micro_falling();
        let mut t = Trainer::new(VideoViT::new(cfg).unwrap(), task, plan()).unwrap();
        t.run().unwrap();
        assert_eq!(t.log().stages(), vec![0, 1, 2, 3, 4]);
        let bounds: Vec<usize> = t.log().steps.windows(2).filter(|w| w[0].stage != w[1].stage).map(|w| w[1].step).collect();
        assert_eq!(bounds, vec![6, 8, 10, 12]);
        assert_eq!(t.model().config().head, HeadKind::FutureRegressor);
        // one eval per three steps plus one at each stage end
        let eval_steps: Vec<usize> = t.log().evals.iter().map(|e| e.step).collect();
        assert_eq!(eval_steps, vec![2, 5, 7, 8, 9, 11, 13]);
    }

    #[test]
    fn curriculum_rejected_on_classification() {
        let cfg = ModelConfig::toy(8, HeadKind::Classifier { classes: 4 });
        let r = Trainer::new(VideoViT::new(cfg).unwrap(), TaskSpec::direction(0), plan());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_head_rejected() {
        let cfg = ModelConfig::toy(8, HeadKind::Classifier { classes: 3 });
        let r = Trainer::new(VideoViT::new(cfg).unwrap(), TaskSpec::direction(0), TrainPlan::toy(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn distances_must_count_up() {
        let mut p = plan();
        p.curriculum.as_mut().unwrap()[2].distance = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn divergence_aborts() {
        let (cfg, task) = micro_falling();
        let mut p = plan();
        p.optimizer = OptimizerKind::sgd(1e300, 0.0, 0.0);
        let mut t = Trainer::new(VideoViT::new(cfg).unwrap(), task, p).unwrap();
        let err = t.run().unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
