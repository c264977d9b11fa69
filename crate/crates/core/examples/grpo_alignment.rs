//! Align a baseline to a language it never saw in supervised training,
//! using only judge feedback on its own samples.
//!
//! Pass a checkpoint path to start from it instead of a freshly trained
//! small baseline.

use std::path::Path;

use grpo_tts::evalharness::{evaluate, EvalSettings};
use grpo_tts::policy::{Checkpoint, RolloutSampling};
use grpo_tts::rewards::estimate_baseline_anchors;
use grpo_tts::synthworld::{make_prompt_set, SynthOracle};
use grpo_tts::trainers::{grpo_train, GrpoConfig, LogRecord};

mod common;

fn main() {
    let world = common::small_world();
    let start = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(Path::new(&p)).unwrap().params,
        None => common::quick_base(&world, 400),
    };
    let oracle = SynthOracle::new(&world);
    let all = [0, 1, common::HELD_OUT];
    let prompts = make_prompt_set(&world, &all, 200, 11).unwrap();
    let validation = make_prompt_set(&world, &[common::HELD_OUT], 40, 12).unwrap();

    let cfg = GrpoConfig {
        learning_rate: 0.05,
        max_iterations: 200,
        sampling: RolloutSampling {
            cfg_probability: 0.0,
            ..RolloutSampling::default()
        },
        ..GrpoConfig::desk()
    };
    // Anchors come from the starting policy and stay frozen.
    let anchors = estimate_baseline_anchors(&start, &prompts, &oracle, 1, &cfg.sampling, 13).unwrap();
    let out = grpo_train(&start, &cfg, &prompts, &validation, &oracle, &anchors, 14, &mut |r| {
        if let LogRecord::Validation { iteration, summary } = r {
            println!("iteration {iteration:>3}: R_cer {:.3}, CER {:.3}", summary.r_cer, summary.raw_cer);
        }
        Ok(())
    })
    .unwrap();
    println!("kept iteration {}", out.best_step);

    let test = make_prompt_set(&world, &[common::HELD_OUT], 200, 15).unwrap();
    let settings = EvalSettings {
        n_runs: 2,
        ..EvalSettings::default()
    };
    for (label, p) in [("start", &start), ("GRPO", &out.best)] {
        let r = evaluate(p, label, &test, &oracle, &settings, 16).unwrap();
        for cfg in [false, true] {
            let row = r.row(None, cfg).unwrap();
            println!(
                "{label:<5} cfg {:<3} CER {:.4} SSIM {:.4}",
                if cfg { "on" } else { "off" },
                row.cer.mean,
                row.ssim.mean
            );
        }
    }
}
