#![allow(dead_code)]

use grpo_tts::fixtures::{prompt_with_lengths, tiny_world};
use grpo_tts::policy::{sample_response, PolicyParams, SampleOptions};
use grpo_tts::rewards::{AnchorSpec, Anchors};
use grpo_tts::rng::{self, Rng};
use grpo_tts::synthworld::oracles::{Oracle, OracleError, RawScores};
use grpo_tts::synthworld::{synthesize_reference, PairedExample, Prompt, PromptSet, World};
use grpo_tts::tokens::AudioFrameSeq;
use grpo_tts::trainers::RolloutGroup;
use rand::Rng as _;

/// Paired examples short enough for the tiny model.
pub fn tiny_examples(world: &World, n: usize, seed: u64) -> Vec<PairedExample> {
    let mut r = rng::rng_for(seed, &[]);
    (0..n)
        .map(|_| {
            let t = r.gen_range(1..=4);
            let c = r.gen_range(1..=4);
            let p = prompt_with_lengths(world, &mut r, t, c);
            let target = synthesize_reference(
                world.vocab,
                world.language(p.language_id).unwrap(),
                world.speaker(p.speaker_id).unwrap(),
                &p.text,
            )
            .unwrap();
            PairedExample {
                language_id: p.language_id,
                speaker_id: p.speaker_id,
                text: p.text,
                context_audio: p.context,
                target_audio: target,
            }
        })
        .collect()
}

pub fn tiny_prompts(world: &World, n: usize, seed: u64) -> PromptSet {
    PromptSet {
        prompts: tiny_examples(world, n, seed).iter().map(|e| e.prompt()).collect(),
    }
}

/// Groups of sampled responses with the given rewards.
pub fn groups_with_rewards(params: &PolicyParams, world: &World, rewards: &[Vec<f64>], seed: u64) -> Vec<RolloutGroup> {
    let prompts = tiny_prompts(world, rewards.len(), seed);
    let mut r: Rng = rng::rng_for(seed, &[1]);
    rewards
        .iter()
        .zip(&prompts.prompts)
        .enumerate()
        .map(|(i, (rs, prompt))| {
            let responses = rs
                .iter()
                .map(|_| sample_response(params, prompt, &SampleOptions::sampled(1.0), &mut r).unwrap())
                .collect();
            RolloutGroup::from_rewards(i, prompt.clone(), responses, vec![None; rs.len()], vec![None; rs.len()], rs.clone())
        })
        .collect()
}

pub fn mid_anchors() -> Anchors {
    Anchors {
        cer: AnchorSpec::cer(0.5).unwrap(),
        ssim: AnchorSpec::ssim(0.5).unwrap(),
    }
}

/// Returns the same scores for every response.
pub struct ConstantOracle(pub RawScores);

impl Oracle for ConstantOracle {
    fn score(&self, _: &Prompt, _: &AudioFrameSeq) -> Result<RawScores, OracleError> {
        Ok(self.0)
    }
}

pub fn world() -> World {
    tiny_world()
}

/// Run config small enough for end-to-end CLI runs in a test.
pub fn tiny_run_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 3,
        "world": {"seed": 5, "n_languages": 3, "n_speakers": 2, "alphabet_size": 4,
                  "symbol_pool": 8, "held_out": 1, "vocab_size": 32},
        "model": {"width": 8, "heads": 2, "encoder_blocks": 1, "decoder_blocks": 1, "ffn_width": 16,
                  "vocab_size": 32, "max_text_len": 16, "max_context_len": 8, "max_gen_len": 40,
                  "p_drop": 0.1, "param_budget": 20000},
        "data": {"seen_languages": [0, 1], "held_out_languages": [2],
                 "pretrain_examples_per_language": 12, "validation_examples_per_language": 3,
                 "finetune_examples_per_language": 4, "prompts_per_language": 4,
                 "validation_prompts_per_language": 2, "eval_prompts_per_language": 3},
        "pretrain": {"max_steps": 6, "validate_every": 3, "batch_size": 4},
        "sft": {"max_steps": 4, "validate_every": 2, "batch_size": 4},
        "grpo": {"group_size": 2, "prompts_per_batch": 2, "max_iterations": 2, "validation_interval": 1},
        "dpo": {"max_iterations": 2, "group_size": 2, "pairs_per_batch": 2},
        "eval": {"n_runs": 2},
        "fig3": {"sft_sizes": [2, 4], "eval_prompts_per_language": 3, "eval": {"n_runs": 1}},
        "table1": {"repetitions": 2, "pretrain_steps": 4, "prompts_per_language": 3,
                   "validation_prompts_per_language": 2, "eval_prompts_per_language": 3,
                   "grpo": {"group_size": 2, "prompts_per_batch": 2, "max_iterations": 2, "validation_interval": 1},
                   "dpo": {"max_iterations": 2, "group_size": 2, "pairs_per_batch": 2},
                   "eval": {"n_runs": 1}}
    })
}

/// Write [`tiny_run_config`] (with `run_dir` set) into `dir`.
pub fn write_tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let mut v = tiny_run_config();
    v["run_dir"] = serde_json::Value::String(dir.join("run").display().to_string());
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}
