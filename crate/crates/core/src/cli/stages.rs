//! Pipeline stages over a run directory. Stages talk only through files; a
//! stamp next to each stage records hashes of its config, inputs and outputs
//! so that an unchanged rerun is skipped.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, EvalSettings, MetricsReport};
use crate::io;
use crate::policy::{init_params, Checkpoint, PolicyParams, RolloutSampling};
use crate::rewards::{estimate_baseline_anchors, Anchors};
use crate::rng::{derive_seed, tag};
use crate::synthworld::{gen_world_from, make_paired_dataset, make_prompt_set, PairedExample, PromptSet, SynthOracle, World};
use crate::trainers::{
    build_preference_pairs, dpo_train, grpo_train, mix_datasets, sft_train, DpoConfig, GrpoConfig, LogRecord, MixedStream,
    SftConfig, TrainOutcome,
};

/// A resolved config bound to its run directory.
pub struct Workspace {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Self {
        let dir = cfg.run_dir.clone();
        Workspace { cfg, dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, &[tag(label)])
    }

    pub fn write_snapshot(&self) -> Result<()> {
        io::write_json(&self.path("config.json"), &self.cfg)
    }
}

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "run directory is locked by another process; remove the file if it is stale"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRun {
    pub skipped: bool,
    /// Wall time of the run that produced the outputs.
    pub seconds: f64,
}

fn hashes(ws: &Workspace, paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(&ws.dir).unwrap_or(p).display().to_string();
            Ok((key, io::file_sha256(p)?))
        })
        .collect()
}

/// Run `body` unless a stamp shows the same config, inputs and outputs.
pub fn run_stage(
    ws: &Workspace,
    name: &str,
    config: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
    body: impl FnOnce() -> Result<()>,
) -> Result<StageRun> {
    for input in inputs {
        if !input.exists() {
            return Err(Error::MissingArtifact {
                path: input.to_path_buf(),
                reason: format!("required by stage {name}; run the stage that produces it first"),
            });
        }
    }
    let config = io::sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes());
    let inputs = hashes(ws, inputs)?;
    let stamp_path = ws.path(&format!("stamps/{name}.json"));
    if let Ok(old) = io::read_json::<Stamp>(&stamp_path) {
        let outputs_intact = outputs.iter().all(|p| p.exists()) && hashes(ws, outputs).ok().as_ref() == Some(&old.outputs);
        if old.config == config && old.inputs == inputs && outputs_intact {
            info!("{name}: up to date");
            return Ok(StageRun {
                skipped: true,
                seconds: old.seconds,
            });
        }
    }
    info!("{name}: running");
    let t = Instant::now();
    body()?;
    let seconds = t.elapsed().as_secs_f64();
    let stamp = Stamp {
        stage: name.to_string(),
        config,
        inputs,
        outputs: hashes(ws, outputs)?,
        seconds,
    };
    io::write_json(&stamp_path, &stamp)?;
    info!("{name}: done in {seconds:.1}s");
    Ok(StageRun { skipped: false, seconds })
}

/// A prompt set described by how to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub languages: Vec<u32>,
    pub n_per_language: usize,
    pub seed: u64,
}

impl PromptSpec {
    pub fn build(&self, world: &World) -> Result<PromptSet> {
        make_prompt_set(world, &self.languages, self.n_per_language, self.seed)
    }
}

fn save_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec).expect("log record serializes"));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}

fn save_outcome(ws: &Workspace, path: &Path, log_path: &Path, stage: &str, out: &TrainOutcome, parent: Option<&Path>) -> Result<()> {
    let mut ck = Checkpoint::new(stage, out.best.clone());
    // Relative to the run directory, so identical runs in different places
    // write identical files.
    let parent = parent.map(|p| p.strip_prefix(&ws.dir).unwrap_or(p).display().to_string());
    ck.meta = serde_json::json!({
        "best_step": out.best_step,
        "best_score": out.best_score,
        "parent": parent,
    });
    ck.save(path)?;
    save_log(log_path, &out.log)
}

fn load_params(path: &Path) -> Result<PolicyParams> {
    Ok(Checkpoint::load(path)?.params)
}

pub fn world_gen(ws: &Workspace) -> Result<StageRun> {
    let out = ws.path("world.json");
    run_stage(ws, "world", &ws.cfg.world, &[], &[&out], || gen_world_from(&ws.cfg.world)?.save(&out))
}

fn per_language(world: &World, languages: &[u32], n: usize, seed: u64) -> Result<Vec<PairedExample>> {
    let mut out = Vec::new();
    for &l in languages {
        out.extend(make_paired_dataset(world, l, n, derive_seed(seed, &[l as u64]))?);
    }
    Ok(out)
}

fn pretrain_pool(ws: &Workspace, world: &World) -> Result<Vec<PairedExample>> {
    let d = &ws.cfg.data;
    per_language(world, &d.seen_languages, d.pretrain_examples_per_language, ws.seed("pretrain-data"))
}

/// Supervised training from scratch on the seen languages.
pub fn pretrain(ws: &Workspace, name: &str, out: &Path, log: &Path, steps: usize) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let sft = SftConfig {
        max_steps: steps,
        ..ws.cfg.pretrain
    };
    let stage_cfg = serde_json::json!({
        "model": ws.cfg.model,
        "pretrain": sft,
        "seen": ws.cfg.data.seen_languages,
        "examples": ws.cfg.data.pretrain_examples_per_language,
        "validation": ws.cfg.data.validation_examples_per_language,
        "seed": ws.cfg.seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path], &[out, log], || {
        let world = World::load(&world_path)?;
        if ws.cfg.model.vocab_size != world.vocab.size {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match the world's {}",
                ws.cfg.model.vocab_size, world.vocab.size
            )));
        }
        let d = &ws.cfg.data;
        let pool = pretrain_pool(ws, &world)?;
        let val = per_language(&world, &d.seen_languages, d.validation_examples_per_language, ws.seed("pretrain-validation"))?;
        let start = init_params(&ws.cfg.model, ws.seed("init"))?;
        let mut stream = MixedStream::uniform(&pool, ws.seed("pretrain-stream"))?;
        let outcome = sft_train(&start, &mut stream, &val, &sft, ws.seed("pretrain"), &mut |_| Ok(()))?;
        save_outcome(ws, out, log, "pretrain", &outcome, None)
    })
}

/// Fine-tune on `n_examples` paired examples per held-out language, mixed
/// with the pretraining pool.
pub fn finetune(ws: &Workspace, name: &str, base: &Path, out: &Path, log: &Path, n_examples: usize) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let stage_cfg = serde_json::json!({
        "sft": ws.cfg.sft,
        "data": ws.cfg.data,
        "n_examples": n_examples,
        "seed": ws.cfg.seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path, base], &[out, log], || {
        let world = World::load(&world_path)?;
        let d = &ws.cfg.data;
        let pool = pretrain_pool(ws, &world)?;
        let low = per_language(&world, &d.held_out_languages, n_examples, ws.seed("finetune-data"))?;
        let val = per_language(&world, &d.held_out_languages, d.validation_examples_per_language, ws.seed("finetune-validation"))?;
        let mut stream = mix_datasets(&pool, &low, ws.cfg.sft.upsample_factor, derive_seed(ws.seed("finetune-stream"), &[n_examples as u64]))?;
        info!("{name}: low-resource share {:.3}", stream.lowres_share());
        let outcome = sft_train(&load_params(base)?, &mut stream, &val, &ws.cfg.sft, ws.seed("finetune"), &mut |_| Ok(()))?;
        save_outcome(ws, out, log, "finetune", &outcome, Some(base))
    })
}

/// Anchors from the start checkpoint's own generations on the prompt set.
pub fn anchors(ws: &Workspace, name: &str, start: &Path, out: &Path, prompts: &PromptSpec, sampling: &RolloutSampling, seed: u64) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let n_samples = ws.cfg.anchors.n_samples;
    let stage_cfg = serde_json::json!({
        "prompts": prompts,
        "sampling": sampling,
        "n_samples": n_samples,
        "seed": seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path, start], &[out], || {
        let world = World::load(&world_path)?;
        let set = prompts.build(&world)?;
        let a = estimate_baseline_anchors(&load_params(start)?, &set, &SynthOracle::new(&world), n_samples, sampling, seed)?;
        info!("{name}: CER anchor {:.4}, SSIM anchor {:.4}", a.cer.baseline_mean, a.ssim.baseline_mean);
        a.save(out, set.len(), n_samples)
    })
}

pub struct AlignPaths<'a> {
    pub start: &'a Path,
    pub anchors: &'a Path,
    pub out: &'a Path,
    pub log: &'a Path,
}

pub fn grpo(ws: &Workspace, name: &str, paths: &AlignPaths<'_>, cfg: &GrpoConfig, prompts: &PromptSpec, validation: &PromptSpec, seed: u64) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let stage_cfg = serde_json::json!({
        "grpo": cfg,
        "prompts": prompts,
        "validation": validation,
        "seed": seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path, paths.start, paths.anchors], &[paths.out, paths.log], || {
        let world = World::load(&world_path)?;
        let anchors = Anchors::load(paths.anchors)?;
        let oracle = SynthOracle::new(&world);
        let outcome = grpo_train(
            &load_params(paths.start)?,
            cfg,
            &prompts.build(&world)?,
            &validation.build(&world)?,
            &oracle,
            &anchors,
            seed,
            &mut |_| Ok(()),
        )?;
        info!("{name}: best validation at iteration {}", outcome.best_step);
        save_outcome(ws, paths.out, paths.log, "grpo", &outcome, Some(paths.start))
    })
}

/// Offline pairs from the start checkpoint, then DPO against it. Validation
/// schedule, reward weights and selection come from `selection`.
pub fn dpo(
    ws: &Workspace,
    name: &str,
    paths: &AlignPaths<'_>,
    cfg: &DpoConfig,
    selection: &GrpoConfig,
    prompts: &PromptSpec,
    validation: &PromptSpec,
    seed: u64,
) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let stage_cfg = serde_json::json!({
        "dpo": cfg,
        "selection": selection,
        "prompts": prompts,
        "validation": validation,
        "seed": seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path, paths.start, paths.anchors], &[paths.out, paths.log], || {
        let world = World::load(&world_path)?;
        let anchors = Anchors::load(paths.anchors)?;
        let oracle = SynthOracle::new(&world);
        let start = load_params(paths.start)?;
        let pairs = build_preference_pairs(&start, &prompts.build(&world)?, cfg, &oracle, &anchors, &selection.weights, seed)?;
        info!("{name}: {} preference pairs", pairs.len());
        let outcome = dpo_train(&start, &pairs, cfg, &validation.build(&world)?, selection, &oracle, &anchors, seed, &mut |_| Ok(()))?;
        save_outcome(ws, paths.out, paths.log, "dpo", &outcome, Some(paths.start))
    })
}

pub fn eval(ws: &Workspace, name: &str, checkpoint: &Path, out: &Path, settings: &EvalSettings, prompts: &PromptSpec, seed: u64) -> Result<StageRun> {
    let world_path = ws.path("world.json");
    let stage_cfg = serde_json::json!({
        "eval": settings,
        "prompts": prompts,
        "seed": seed,
    });
    run_stage(ws, name, &stage_cfg, &[&world_path, checkpoint], &[out], || {
        let world = World::load(&world_path)?;
        let oracle = SynthOracle::with_embedding(&world, settings.embedding);
        let id = io::file_sha256(checkpoint)?;
        let report = evaluate(&load_params(checkpoint)?, &id, &prompts.build(&world)?, &oracle, settings, seed)?;
        io::write_json(out, &report)
    })
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    MetricsReport::load(path)
}
