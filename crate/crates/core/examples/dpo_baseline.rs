//! Offline DPO from best/worst pairs of the starting policy's samples,
//! next to GRPO with the same number of updates.

use grpo_tts::evalharness::{evaluate, EvalSettings};
use grpo_tts::policy::RolloutSampling;
use grpo_tts::rewards::{estimate_baseline_anchors, RewardWeights};
use grpo_tts::synthworld::{make_prompt_set, SynthOracle};
use grpo_tts::trainers::{build_preference_pairs, dpo_train, grpo_train, DpoConfig, GrpoConfig};

mod common;

fn main() {
    let world = common::small_world();
    let base = common::quick_base(&world, 300);
    let oracle = SynthOracle::new(&world);
    let prompts = make_prompt_set(&world, &common::SEEN, 200, 21).unwrap();
    let validation = make_prompt_set(&world, &common::SEEN, 30, 22).unwrap();

    let grpo = GrpoConfig {
        learning_rate: 0.1,
        max_iterations: 150,
        weights: RewardWeights {
            w_cer: 0.5,
            w_ssim: 0.5,
            w_pesq: 0.0,
        },
        ..GrpoConfig::desk()
    };
    let dpo = DpoConfig {
        learning_rate: 3e-3,
        max_iterations: 150,
        sampling: RolloutSampling {
            cfg_probability: 0.0,
            ..RolloutSampling::default()
        },
        ..DpoConfig::default()
    };
    let anchors = estimate_baseline_anchors(&base, &prompts, &oracle, 1, &grpo.sampling, 23).unwrap();

    let pairs = build_preference_pairs(&base, &prompts, &dpo, &oracle, &anchors, &grpo.weights, 24).unwrap();
    println!("{} preference pairs from {} prompts", pairs.len(), prompts.len());
    // Validation schedule and checkpoint selection are shared with GRPO.
    let dpo_out = dpo_train(&base, &pairs, &dpo, &validation, &grpo, &oracle, &anchors, 25, &mut |_| Ok(())).unwrap();
    let grpo_out = grpo_train(&base, &grpo, &prompts, &validation, &oracle, &anchors, 26, &mut |_| Ok(())).unwrap();

    let test = make_prompt_set(&world, &common::SEEN, 150, 27).unwrap();
    let settings = EvalSettings {
        n_runs: 2,
        ..EvalSettings::default()
    };
    for (label, p) in [("base", &base), ("DPO", &dpo_out.best), ("GRPO", &grpo_out.best)] {
        let r = evaluate(p, label, &test, &oracle, &settings, 28).unwrap();
        let (off, on) = (r.row(None, false).unwrap(), r.row(None, true).unwrap());
        println!(
            "{label:<4} CER {:.4} / {:.4} with CFG, SSIM {:.4} / {:.4} with CFG",
            off.cer.mean, on.cer.mean, off.ssim.mean, on.ssim.mean
        );
    }
}
