//! Estimate anchors from a policy's own generations and map raw judge
//! scores to normalized rewards.

use grpo_tts::policy::RolloutSampling;
use grpo_tts::rewards::{estimate_baseline_anchors, normalize_pesq, RewardWeights};
use grpo_tts::synthworld::{make_prompt_set, RawScores, SynthOracle};

mod common;

fn main() {
    let world = common::small_world();
    let base = common::quick_base(&world, 300);
    let oracle = SynthOracle::new(&world);
    let prompts = make_prompt_set(&world, &[0, 1, 2], 50, 3).unwrap();
    let anchors = estimate_baseline_anchors(&base, &prompts, &oracle, 2, &RolloutSampling::default(), 4).unwrap();
    println!(
        "baseline means: CER {:.4}, SSIM {:.4}",
        anchors.cer.baseline_mean, anchors.ssim.baseline_mean
    );

    let weights = RewardWeights::default();
    for (cer, ssim, pesq) in [
        (0.0, 1.0, 4.5),
        (anchors.cer.baseline_mean, anchors.ssim.baseline_mean, 3.0),
        (0.5, 0.5, 2.0),
        (1.4, -0.2, -0.5),
    ] {
        let r = anchors.rewards(&RawScores::clipped(cer, ssim, pesq), &weights).unwrap();
        println!(
            "CER {cer:.3} SSIM {ssim:.3} quality {pesq:.1} -> R_cer {:.3} R_ssim {:.3} R_pesq {:.3} total {:.3}",
            r.r_cer, r.r_ssim, r.r_pesq, r.r_total
        );
    }
    println!("quality 4.5 normalizes to {}", normalize_pesq(4.5));
}
