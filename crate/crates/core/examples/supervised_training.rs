//! Pretrain on two languages, then fine-tune on a third with the
//! low-resource data upsampled into the pretraining mix.

use grpo_tts::evalharness::{evaluate, EvalSettings};
use grpo_tts::synthworld::{make_prompt_set, SynthOracle};
use grpo_tts::trainers::{mix_datasets, sft_train, validation_loss, AdamConfig, SftConfig};

mod common;

fn main() {
    let world = common::small_world();
    let base = common::quick_base(&world, 400);

    let pool = common::examples(&world, &common::SEEN, 400, 1);
    let low = common::examples(&world, &[common::HELD_OUT], 64, 7);
    let val = common::examples(&world, &[common::HELD_OUT], 20, 8);
    println!("held-out validation loss before fine-tuning {:.3}", validation_loss(&base, &val).unwrap());

    let mut stream = mix_datasets(&pool, &low, 5.0, 4).unwrap();
    println!("low-resource share of each batch {:.2}", stream.lowres_share());
    let cfg = SftConfig {
        optimizer: AdamConfig::with_lr(1e-3),
        max_steps: 200,
        validate_every: 50,
        ..SftConfig::default()
    };
    let out = sft_train(&base, &mut stream, &val, &cfg, 5, &mut |_| Ok(())).unwrap();
    println!("best validation loss {:.3} at step {}", out.best_score, out.best_step);

    let oracle = SynthOracle::new(&world);
    let prompts = make_prompt_set(&world, &[common::HELD_OUT], 100, 9).unwrap();
    let settings = EvalSettings {
        n_runs: 1,
        with_cfg: false,
        ..EvalSettings::default()
    };
    for (label, p) in [("baseline", &base), ("fine-tuned", &out.best)] {
        let r = evaluate(p, label, &prompts, &oracle, &settings, 1).unwrap();
        println!("{label:<10} held-out CER {:.3}", r.row(None, false).unwrap().cer.mean);
    }
}
