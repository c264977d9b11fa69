//! Sample from a briefly trained policy with and without classifier-free
//! guidance, score the samples, and check the recorded log-likelihood
//! against teacher forcing.

use grpo_tts::policy::{log_prob, sample_response, SampleOptions};
use grpo_tts::rng::rng_for;
use grpo_tts::synthworld::{make_prompt_set, Oracle, SynthOracle};

mod common;

fn main() {
    let world = common::small_world();
    let params = common::quick_base(&world, 300);
    println!("{} parameters", params.values.len());
    let oracle = SynthOracle::new(&world);
    let prompt = &make_prompt_set(&world, &[0], 1, 3).unwrap().prompts[0];

    let mut rng = rng_for(9, &[]);
    for (label, opts) in [
        ("greedy", SampleOptions::greedy()),
        ("T=0.7", SampleOptions::sampled(0.7)),
        ("T=0.7, CFG 2.5", SampleOptions::sampled(0.7).with_cfg(Some(2.5))),
    ] {
        for _ in 0..3 {
            let s = sample_response(&params, prompt, &opts, &mut rng).unwrap();
            let check = log_prob(&params, prompt, &s.response).unwrap();
            let scores = oracle.score(prompt, &s.response).unwrap();
            println!(
                "{label:<15} {:>2} frames, CER {:.3}, log p {:>9.3} (teacher-forced {:>9.3})",
                s.response.len(),
                scores.cer,
                s.logprob_conditional,
                check
            );
        }
    }
}
