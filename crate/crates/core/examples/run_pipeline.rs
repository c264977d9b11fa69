//! The staged pipeline behind the command line, on a shrunken config:
//! world, pretraining, two fine-tuning sizes, anchors, GRPO and evaluation,
//! with every stage stamped so a second call does no work.
//!
//! Usage: run_pipeline [RUN_DIR]

use std::path::PathBuf;

use grpo_tts::cli::config::{RunConfig, Profile};
use grpo_tts::cli::repro::fig3;
use grpo_tts::cli::stages::Workspace;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("grpo-tts-pipeline"));

    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.run_dir = dir;
    cfg.pretrain.max_steps = 600;
    cfg.pretrain.validate_every = 200;
    cfg.data.pretrain_examples_per_language = 300;
    cfg.data.prompts_per_language = 100;
    cfg.sft.max_steps = 150;
    cfg.grpo.max_iterations = 150;
    cfg.fig3.sft_sizes = vec![32, 128];
    cfg.fig3.eval_prompts_per_language = 100;
    cfg.validate().unwrap();

    let ws = Workspace::new(cfg);
    ws.write_snapshot().unwrap();
    let (_, table) = fig3(&ws).unwrap();
    print!("{table}");
    println!("artifacts under {}", ws.dir.display());
}
