//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use patchblender::blend::read_ratios_csv;
use patchblender::data::{Pipeline, Split, TargetKind, TaskSpec};
use patchblender::gradcheck::{check_model, DEFAULT_STEP};
use patchblender::model::{count_macs, Checkpoint, MAC_CONVENTION};
use patchblender::rng::{named_seed, trunc_normal};
use patchblender::train::{evaluate, EvalMode, Metrics, TrainPlan, Trainer};
use patchblender::{BlendVariant, HeadKind, ModelConfig, VideoViT};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::reference;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Gradient-check tolerance on the maximum relative error of any group.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Models larger than this are refused by the gradient check.
pub const GRADCHECK_MAX_PARAMS: usize = 20_000;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

/// Target matching a model head on a task, or a configuration error.
pub fn target_for(head: HeadKind, task: &TaskSpec) -> Result<TargetKind> {
    match (head, task.task.classes()) {
        (HeadKind::Classifier { classes }, Some(c)) if classes == c => Ok(TargetKind::Label),
        (HeadKind::FrameRegressor, None) => Ok(TargetKind::Frames),
        (HeadKind::FutureRegressor, None) => Ok(TargetKind::Future(task.future_distance)),
        (head, _) => Err(CliError::config(format!("{head:?} head does not fit the {:?} task", task.task))),
    }
}

fn load_model(path: &Path) -> Result<VideoViT> {
    Ok(Checkpoint::load(path)?.to_model(None)?)
}

fn check_input_geometry(model: &ModelConfig, task: &TaskSpec) -> Result<()> {
    if model.n_frames != task.n_frames || model.image_size != task.input_size() || model.channels != task.channels {
        return Err(CliError::config("checkpoint geometry does not match the task"));
    }
    Ok(())
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes one ratio CSV and one graymap per blend layer.
pub fn export_ratios(model: &VideoViT, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare_dir(dir)?;
    let mut files = Vec::new();
    for (layer, m) in model.blend_matrices() {
        let csv = dir.join(format!("ratios_layer{layer}.csv"));
        let pgm = dir.join(format!("ratios_layer{layer}.pgm"));
        m.write_csv(&csv)?;
        m.write_heatmap(&pgm)?;
        files.extend([csv, pgm]);
    }
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub name: String,
    pub steps: usize,
    pub final_stage: usize,
    pub final_metrics: Option<Metrics>,
    pub identity_distances: Vec<(usize, f64)>,
    /// Hex FNV-1a digest of every training batch consumed.
    pub data_digest: String,
    pub meta: serde_json::Value,
}

fn summary(name: &str, trainer: &Trainer) -> TrainSummary {
    let last = trainer.log().last_eval();
    TrainSummary {
        name: name.to_string(),
        steps: trainer.next_step(),
        final_stage: last.map_or(0, |e| e.stage),
        final_metrics: last.map(|e| e.metrics.clone()),
        identity_distances: trainer.model().identity_distances(),
        data_digest: format!("{:016x}", trainer.data_digest()),
        meta: json!({ "finished_unix": unix_time() }),
    }
}

/// Trains (or resumes from `io.checkpoint`) and writes `config.json`,
/// `checkpoint.ckpt`, `metrics.csv`, `ratios/` and `summary.json`.
pub fn train(cfg: &ExperimentConfig, config_text: &str, resume: bool) -> Result<String> {
    let out = cfg.out_dir()?.to_path_buf();
    let task = cfg.task()?.clone();
    let plan = cfg.train()?.clone();
    let mut trainer = if resume {
        let t = Trainer::resume(cfg.checkpoint()?)?;
        if t.plan() != &plan {
            return Err(CliError::config("checkpoint was trained under a different plan"));
        }
        t
    } else {
        Trainer::new(VideoViT::new(cfg.model.clone())?, task, plan)?
    };
    prepare_dir(&out)?;
    write(&out.join("config.json"), config_text)?;
    let run = trainer.run().map(|_| ()).map_err(CliError::from);
    write(&out.join("metrics.csv"), trainer.log().to_csv())?;
    run?;
    trainer.save(&out.join("checkpoint.ckpt"))?;
    export_ratios(trainer.model(), &out.join("ratios"))?;
    let s = summary(&cfg.name, &trainer);
    write(&out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    let mut report = format!("{}: {} steps\n", cfg.name, s.steps);
    if let Some(m) = &s.final_metrics {
        report += &format_metrics(m);
    }
    for (l, d) in &s.identity_distances {
        let _ = writeln!(report, "blend layer {l}: identity distance {d:.6}");
    }
    Ok(report)
}

fn format_metrics(m: &Metrics) -> String {
    let mut s = format!("val loss {:.6}", m.loss);
    if let Some(a) = m.accuracy {
        let _ = write!(s, ", accuracy {:.2}%", 100.0 * a);
    }
    if let (Some(p), Some(v)) = (m.pos_mse, m.vel_mse) {
        let _ = write!(s, ", position MSE {p:.6}, velocity MSE {v:.6}");
    }
    let _ = writeln!(s, " over {} clips", m.count);
    s
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub plain: Metrics,
    pub k_crop: Metrics,
    pub shuffled: Metrics,
}

/// Plain, 5-crop and shuffled evaluation of `io.checkpoint`.
pub fn eval(cfg: &ExperimentConfig, seed: u64) -> Result<(String, EvalReport)> {
    let task = cfg.task()?;
    let plan = cfg.train()?;
    let model = load_model(cfg.checkpoint()?)?;
    check_input_geometry(model.config(), task)?;
    let target = target_for(model.config().head, task)?;
    let val = Pipeline::new(task.clone(), Split::Val)?;
    let run = |mode| evaluate(&model, &val, plan.eval_clips, target, mode, plan.batch_size).map_err(CliError::from);
    let r = EvalReport {
        plain: run(EvalMode::Plain)?,
        k_crop: run(EvalMode::KCrop(5))?,
        shuffled: run(EvalMode::Shuffled(seed))?,
    };
    if let Some(out) = &cfg.io.out_dir {
        prepare_dir(out)?;
        write(&out.join("eval.json"), serde_json::to_string_pretty(&r)?)?;
    }
    let text = format!(
        "plain:    {}5-crop:   {}shuffled: {}",
        format_metrics(&r.plain),
        format_metrics(&r.k_crop),
        format_metrics(&r.shuffled)
    );
    Ok((text, r))
}

#[derive(Debug, Clone, Serialize)]
pub struct ShuffleRow {
    pub method: String,
    pub no_shuffle: f64,
    pub shuffle: f64,
    pub delta: f64,
}

/// Accuracy (in %) with and without evaluation-time shuffling.
pub fn shuffle_row(method: &str, model: &VideoViT, task: &TaskSpec, clips: usize, batch: usize, seed: u64) -> Result<ShuffleRow> {
    check_input_geometry(model.config(), task)?;
    let target = target_for(model.config().head, task)?;
    if target != TargetKind::Label {
        return Err(CliError::config("the shuffle ablation needs a classifier checkpoint"));
    }
    let val = Pipeline::new(task.clone(), Split::Val)?;
    let acc = |mode| -> Result<f64> {
        let m = evaluate(model, &val, clips, target, mode, batch)?;
        Ok(100.0 * m.accuracy.expect("classification"))
    };
    let (plain, shuffled) = (acc(EvalMode::Plain)?, acc(EvalMode::Shuffled(seed))?);
    Ok(ShuffleRow {
        method: method.to_string(),
        no_shuffle: plain,
        shuffle: shuffled,
        delta: shuffled - plain,
    })
}

pub fn format_shuffle_report(rows: &[ShuffleRow]) -> String {
    let mut s = String::from("method,no_shuffle,shuffle,delta\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.2},{:.2},{:+.2}", r.method, r.no_shuffle, r.shuffle, r.delta);
    }
    let _ = writeln!(s, "# {}", reference::LABEL);
    for r in reference::SHUFFLE {
        let _ = writeln!(
            s,
            "# {},{:.2},{:.2},{:+.2}",
            r.method,
            r.no_shuffle,
            r.shuffle,
            r.shuffle - r.no_shuffle
        );
    }
    s
}

/// Shuffle ablation of `io.checkpoint`, and of `baseline` when given.
pub fn ablate_shuffle(cfg: &ExperimentConfig, baseline: Option<&Path>, seed: u64) -> Result<String> {
    let task = cfg.task()?;
    let plan = cfg.train()?;
    let mut rows = vec![shuffle_row(
        "model",
        &load_model(cfg.checkpoint()?)?,
        task,
        plan.eval_clips,
        plan.batch_size,
        seed,
    )?];
    if let Some(b) = baseline {
        if !b.is_file() {
            return Err(CliError::config(format!("baseline {} does not exist", b.display())));
        }
        rows.push(shuffle_row("baseline", &load_model(b)?, task, plan.eval_clips, plan.batch_size, seed)?);
    }
    let text = format_shuffle_report(&rows);
    if let Some(out) = &cfg.io.out_dir {
        prepare_dir(out)?;
        write(&out.join("shuffle_ablation.csv"), &text)?;
    }
    Ok(text)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub metrics: Metrics,
    pub identity_distances: Vec<(usize, f64)>,
    pub data_digest: String,
}

/// The four blending configurations compared under one seed and budget.
pub fn variant_configs(model: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let none = ModelConfig {
        blend_layers: Default::default(),
        ..model.clone()
    };
    let mut out = vec![("none", none)];
    for v in [
        BlendVariant::RandomPerFrame,
        BlendVariant::SameRandomLocation,
        BlendVariant::SameLocation,
    ] {
        let mut layers = model.blend_layers.clone();
        if layers.is_empty() {
            layers.insert(1.min(model.depth - 1));
        }
        out.push((
            v.as_str(),
            ModelConfig {
                blend_layers: layers,
                blend_variant: v,
                ..model.clone()
            },
        ));
    }
    out
}

/// Trains one model per variant on identical data; returns each final
/// model with its report row.
pub fn run_variants(cfg: &ExperimentConfig) -> Result<Vec<(VariantRow, VideoViT)>> {
    let task = cfg.task()?;
    let plan = cfg.train()?;
    variant_configs(&cfg.model)
        .into_iter()
        .map(|(name, model_cfg)| train_variant(name, model_cfg, task.clone(), plan.clone()))
        .collect()
}

/// Trains one model per variant on identical data and reports final metrics.
pub fn ablate_variants(cfg: &ExperimentConfig) -> Result<(String, Vec<VariantRow>)> {
    if let Some(out) = &cfg.io.out_dir {
        prepare_dir(out)?;
    }
    let rows: Vec<VariantRow> = run_variants(cfg)?.into_iter().map(|r| r.0).collect();
    let digests: Vec<&str> = rows.iter().map(|r| r.data_digest.as_str()).collect();
    if digests.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::check(format!("variants saw different data: {digests:?}")));
    }
    let text = format_variant_report(&rows);
    if let Some(out) = &cfg.io.out_dir {
        write(&out.join("variant_ablation.csv"), &text)?;
        write(&out.join("variant_ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok((text, rows))
}

fn train_variant(name: &str, model: ModelConfig, task: TaskSpec, plan: TrainPlan) -> Result<(VariantRow, VideoViT)> {
    let mut t = Trainer::new(VideoViT::new(model)?, task, plan)?;
    t.run()?;
    let metrics = t
        .log()
        .last_eval()
        .map(|e| e.metrics.clone())
        .ok_or_else(|| CliError::config("run produced no evaluation"))?;
    let row = VariantRow {
        variant: name.to_string(),
        metrics,
        identity_distances: t.model().identity_distances(),
        data_digest: format!("{:016x}", t.data_digest()),
    };
    Ok((row, t.into_model()))
}

pub fn format_variant_report(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant,accuracy,pos_mse,vel_mse,val_loss,identity_distances,data_digest\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let ids: Vec<String> = r.identity_distances.iter().map(|(l, d)| format!("{l}:{d:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{}",
            r.variant,
            opt(r.metrics.accuracy),
            opt(r.metrics.pos_mse),
            opt(r.metrics.vel_mse),
            r.metrics.loss,
            ids.join(";"),
            r.data_digest
        );
    }
    let _ = writeln!(s, "# {}: top-1 %", reference::LABEL);
    for (v, acc) in reference::VARIANTS {
        let _ = writeln!(s, "# {v},{acc:.2}");
    }
    s
}

/// MAC breakdown and blend overhead of the configured model.
pub fn flops(model: &ModelConfig) -> Result<String> {
    model.validate()?;
    let r = count_macs(model);
    let mut s = String::new();
    let _ = writeln!(s, "convention: {MAC_CONVENTION}");
    for (name, v) in [
        ("patch embedding", r.patch_embed),
        ("attention", r.attention),
        ("mlp", r.mlp),
        ("blend", r.blend),
        ("head", r.head),
        ("total", r.total),
    ] {
        let _ = writeln!(s, "{name:>16}: {v}");
    }
    let _ = writeln!(s, "blend overhead: {:.6}% of total", 100.0 * r.blend_fraction());
    let _ = writeln!(
        s,
        "# {}: {}% of ViT-B compute (counting convention unstated)",
        reference::LABEL,
        reference::OVERHEAD_PERCENT
    );
    Ok(s)
}

/// Finite-difference check of every parameter group of a small model.
/// `corrupt_blend` swaps in a wrong blend backward (negative control).
pub fn gradcheck(model: &ModelConfig, corrupt_blend: bool) -> Result<String> {
    let mut m = VideoViT::new(model.clone())?;
    if m.param_count() > GRADCHECK_MAX_PARAMS {
        return Err(CliError::config(format!(
            "{} parameters exceed the gradient-check budget of {GRADCHECK_MAX_PARAMS}",
            m.param_count()
        )));
    }
    // move blend ratios and gains off their symmetric starting points
    let seed = named_seed(model.seed, "gradcheck");
    for (i, (_, t)) in m.params_mut().into_iter().enumerate() {
        let noise = trunc_normal(t.shape(), 0.3, patchblender::rng::split_seed(seed, i as u64));
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let c = m.config().clone();
    let mut frames = trunc_normal(&[2, c.n_frames, c.image_size, c.image_size, c.channels], 1.0, seed);
    frames.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let groups = check_model(&m, &frames, DEFAULT_STEP, corrupt_blend, |tape, y| {
        let w = trunc_normal(tape.shape(y), 1.0, named_seed(seed, "projection"));
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    })?;
    let mut s = String::new();
    let mut failed = Vec::new();
    for g in &groups {
        let ok = g.max_rel_err < GRADCHECK_TOL;
        let _ = writeln!(s, "{} {:<28} {:.3e}", if ok { "pass" } else { "FAIL" }, g.name, g.max_rel_err);
        if !ok {
            failed.push(g.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(s)
    } else {
        Err(CliError::check(format!("{s}gradient check failed for: {}", failed.join(", "))))
    }
}

/// One ratio CSV and graymap per blend layer of a checkpoint.
pub fn export_heatmap(checkpoint: &Path, out: &Path) -> Result<String> {
    if !checkpoint.is_file() {
        return Err(CliError::config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_model(checkpoint)?;
    if model.blend_matrices().next().is_none() {
        return Err(CliError::config("checkpoint has no blend layers"));
    }
    let files = export_ratios(&model, out)?;
    for (layer, m) in model.blend_matrices() {
        let back = read_ratios_csv(&out.join(format!("ratios_layer{layer}.csv")))?;
        if back.data().iter().zip(m.ratios().data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(CliError::check(format!("ratio CSV of layer {layer} does not round-trip")));
        }
    }
    Ok(files.iter().map(|p| format!("{}\n", p.display())).collect())
}
