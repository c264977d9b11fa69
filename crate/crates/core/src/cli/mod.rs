//! Command-line entry point. Every subcommand resolves a config, takes the
//! run directory lock, writes the config snapshot and runs one or more
//! stages.

pub mod config;
pub mod repro;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalharness::{emit_report, read_log, MetricsReport};
use config::{resolve, Overrides, Profile};
use stages::{AlignPaths, PromptSpec, RunLock, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "grpo-tts", about = "Pretrain, fine-tune and align a token TTS policy on a synthetic world")]
pub struct Cli {
    /// JSON file overlaid on the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// World file operations.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Train the baseline on the seen languages.
    Pretrain,
    /// Fine-tune the baseline on the held-out languages.
    Finetune,
    /// Estimate reward anchors from a start checkpoint.
    Anchors {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// GRPO from a start checkpoint; needs anchors from the same checkpoint.
    Grpo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Offline DPO from a start checkpoint; needs anchors.
    Dpo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on fresh prompts for every language.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report name; defaults to the checkpoint file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Write report.json, report.csv and curves.svg for an evaluation.
    Report {
        #[arg(long)]
        name: String,
        /// Training log to plot; defaults to logs/NAME.jsonl when present.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// End-to-end experiments.
    Repro {
        #[command(subcommand)]
        which: Repro,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorldAction {
    Gen,
}

#[derive(Debug, Subcommand)]
pub enum Repro {
    /// Baseline, fine-tuning sizes and GRPO on the held-out languages.
    Fig3,
    /// Base vs base+DPO vs base+GRPO, with and without guidance.
    Table1,
}

/// Parse `argv`, run, and map the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    let origin = cli
        .config
        .as_ref()
        .map_or_else(|| "profile defaults".to_string(), |p| p.display().to_string());
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e} (config: {origin})");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve(&Overrides {
        config: cli.config.clone(),
        profile: cli.profile,
        seed: cli.seed,
        run_dir: cli.run_dir.clone(),
    })?;
    let ws = Workspace::new(cfg);
    let _lock = RunLock::acquire(&ws.dir)?;
    ws.write_snapshot()?;
    let c = &ws.cfg;

    let alignment_prompts = PromptSpec {
        languages: c.all_languages(),
        n_per_language: c.data.prompts_per_language,
        seed: ws.seed("prompts"),
    };
    let validation = PromptSpec {
        languages: c.data.held_out_languages.clone(),
        n_per_language: c.data.validation_prompts_per_language,
        seed: ws.seed("validation-prompts"),
    };
    let sft = ws.path("checkpoints/sft.json");
    let anchors_path = ws.path("anchors.json");

    match &cli.command {
        Command::World { action: WorldAction::Gen } => {
            stages::world_gen(&ws)?;
        }
        Command::Pretrain => {
            stages::pretrain(&ws, "pretrain", &ws.path("checkpoints/baseline.json"), &ws.path("logs/pretrain.jsonl"), c.pretrain.max_steps)?;
        }
        Command::Finetune => {
            stages::finetune(
                &ws,
                "finetune",
                &ws.path("checkpoints/baseline.json"),
                &sft,
                &ws.path("logs/finetune.jsonl"),
                c.data.finetune_examples_per_language,
            )?;
        }
        Command::Anchors { checkpoint } => {
            let start = checkpoint.clone().unwrap_or_else(|| sft.clone());
            stages::anchors(&ws, "anchors", &start, &anchors_path, &alignment_prompts, &c.grpo.sampling, ws.seed("anchors"))?;
        }
        Command::Grpo { checkpoint } => {
            let start = checkpoint.clone().unwrap_or_else(|| sft.clone());
            let paths = AlignPaths {
                start: &start,
                anchors: &anchors_path,
                out: &ws.path("checkpoints/grpo.json"),
                log: &ws.path("logs/grpo.jsonl"),
            };
            stages::grpo(&ws, "grpo", &paths, &c.grpo, &alignment_prompts, &validation, ws.seed("grpo"))?;
        }
        Command::Dpo { checkpoint } => {
            let start = checkpoint.clone().unwrap_or_else(|| sft.clone());
            let paths = AlignPaths {
                start: &start,
                anchors: &anchors_path,
                out: &ws.path("checkpoints/dpo.json"),
                log: &ws.path("logs/dpo.jsonl"),
            };
            stages::dpo(&ws, "dpo", &paths, &c.dpo, &c.grpo, &alignment_prompts, &validation, ws.seed("dpo"))?;
        }
        Command::Eval { checkpoint, name } => {
            let name = match name {
                Some(n) => n.clone(),
                None => checkpoint
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| Error::Config(format!("cannot name a report after {}", checkpoint.display())))?,
            };
            let prompts = PromptSpec {
                languages: c.all_languages(),
                n_per_language: c.data.eval_prompts_per_language,
                seed: ws.seed("eval-prompts"),
            };
            let out = ws.path(&format!("eval/{name}.json"));
            stages::eval(&ws, &format!("eval-{name}"), checkpoint, &out, &c.eval, &prompts, ws.seed("eval"))?;
            print!("{}", summary_lines(&MetricsReport::load(&out)?));
        }
        Command::Report { name, log } => {
            let report = MetricsReport::load(&ws.path(&format!("eval/{name}.json")))?;
            let default_log = ws.path(&format!("logs/{name}.jsonl"));
            let log_path = log.clone().or_else(|| default_log.exists().then_some(default_log));
            let records = match log_path {
                Some(p) => read_log(&p)?,
                None => Vec::new(),
            };
            for p in emit_report(&report, &records, &ws.path(&format!("reports/{name}")))? {
                println!("{}", p.display());
            }
        }
        Command::Repro { which: Repro::Fig3 } => {
            let (_, text) = repro::fig3(&ws)?;
            print!("{text}");
        }
        Command::Repro { which: Repro::Table1 } => {
            let (_, text) = repro::table1(&ws)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn summary_lines(report: &MetricsReport) -> String {
    let mut s = String::new();
    for r in &report.rows {
        s.push_str(&format!(
            "language {:<4} cfg {:<3} CER {:.4} SSIM {:.4} quality {:.3}\n",
            r.language_label(),
            if r.cfg { "on" } else { "off" },
            r.cer.mean,
            r.ssim.mean,
            r.quality.mean
        ));
    }
    s
}
