#![allow(dead_code)]

use grpo_tts::policy::{init_params, ModelConfig, PolicyParams};
use grpo_tts::synthworld::{gen_world_from, make_paired_dataset, PairedExample, World, WorldSpec};
use grpo_tts::trainers::{sft_train, AdamConfig, MixedStream, SftConfig};

/// Three languages; the last shares its symbols with the first two but
/// renders them with its own codes.
pub fn small_world() -> World {
    let mut spec = WorldSpec::new(7, 3, 4, 8);
    spec.symbol_pool = Some(16);
    spec.held_out = 1;
    gen_world_from(&spec).expect("small world fits")
}

pub const SEEN: [u32; 2] = [0, 1];
pub const HELD_OUT: u32 = 2;

pub fn examples(world: &World, languages: &[u32], n: usize, seed: u64) -> Vec<PairedExample> {
    languages
        .iter()
        .flat_map(|&l| make_paired_dataset(world, l, n, seed + l as u64).unwrap())
        .collect()
}

/// A baseline trained for `steps` Adam steps on the seen languages.
pub fn quick_base(world: &World, steps: usize) -> PolicyParams {
    let pool = examples(world, &SEEN, 400, 1);
    let val = examples(world, &SEEN, 20, 100);
    let cfg = SftConfig {
        optimizer: AdamConfig::with_lr(3e-3),
        max_steps: steps,
        validate_every: 100,
        ..SftConfig::default()
    };
    let start = init_params(&ModelConfig::default(), 1).unwrap();
    let mut stream = MixedStream::uniform(&pool, 2).unwrap();
    sft_train(&start, &mut stream, &val, &cfg, 3, &mut |_| Ok(())).unwrap().best
}
