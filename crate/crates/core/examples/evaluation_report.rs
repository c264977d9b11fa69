//! Evaluate a policy over several seeded runs and write report.json,
//! report.csv and curves.svg.
//!
//! Usage: evaluation_report [OUT_DIR]

use std::path::PathBuf;

use grpo_tts::evalharness::{emit_report, evaluate, EvalSettings};
use grpo_tts::policy::RolloutSampling;
use grpo_tts::rewards::estimate_baseline_anchors;
use grpo_tts::synthworld::{make_prompt_set, SynthOracle};
use grpo_tts::trainers::{grpo_train, GrpoConfig};

mod common;

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("grpo-tts-report"));
    let world = common::small_world();
    let base = common::quick_base(&world, 300);
    let oracle = SynthOracle::new(&world);
    let prompts = make_prompt_set(&world, &[0, 1, 2], 100, 31).unwrap();
    let validation = make_prompt_set(&world, &[2], 30, 32).unwrap();
    let cfg = GrpoConfig {
        learning_rate: 0.05,
        max_iterations: 100,
        validation_interval: 20,
        sampling: RolloutSampling {
            cfg_probability: 0.0,
            ..RolloutSampling::default()
        },
        ..GrpoConfig::desk()
    };
    let anchors = estimate_baseline_anchors(&base, &prompts, &oracle, 1, &cfg.sampling, 33).unwrap();
    let out = grpo_train(&base, &cfg, &prompts, &validation, &oracle, &anchors, 34, &mut |_| Ok(())).unwrap();

    let test = make_prompt_set(&world, &[0, 1, 2], 60, 35).unwrap();
    let report = evaluate(&out.best, "grpo-example", &test, &oracle, &EvalSettings::default(), 36).unwrap();
    for row in &report.rows {
        let ci = row.cer.ci.map_or("n/a".to_string(), |c| format!("{c:.4}"));
        println!(
            "language {:<3} cfg {:<3} CER {:.4} ± {ci}",
            row.language_label(),
            if row.cfg { "on" } else { "off" },
            row.cer.mean
        );
    }
    for p in emit_report(&report, &out.log, &out_dir).unwrap() {
        println!("wrote {}", p.display());
    }
}
