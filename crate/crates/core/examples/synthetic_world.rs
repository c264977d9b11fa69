//! Generate a world, render reference audio for a few prompts and score
//! good and corrupted responses with the judges.

use grpo_tts::synthworld::{asr_decode, make_prompt_set, synthesize_reference, Oracle, SynthOracle};
use grpo_tts::tokens::{decode_text, AudioFrameSeq};

mod common;

fn main() {
    let world = common::small_world();
    println!(
        "{} languages, {} speakers, frame vocabulary {}",
        world.languages.len(),
        world.speakers.len(),
        world.vocab.size
    );
    for lang in &world.languages {
        let alphabet: Vec<u8> = lang.alphabet.iter().map(|t| t.0).collect();
        println!("  language {}: alphabet {}", lang.language_id, String::from_utf8_lossy(&alphabet));
    }

    let oracle = SynthOracle::new(&world);
    let prompts = make_prompt_set(&world, &[0, 2], 2, 5).unwrap();
    for p in &prompts.prompts {
        let lang = world.language(p.language_id).unwrap();
        let spk = world.speaker(p.speaker_id).unwrap();
        let reference = synthesize_reference(world.vocab, lang, spk, &p.text).unwrap();
        let heard = asr_decode(&reference, &world);
        let perfect = oracle.score(p, &reference).unwrap();

        // Drop the second frame and borrow another speaker's voice.
        let other = world.speaker((p.speaker_id + 1) % world.speakers.len() as u32).unwrap();
        let mut frames = synthesize_reference(world.vocab, lang, other, &p.text).unwrap().frames().to_vec();
        frames.remove(1.min(frames.len() - 2));
        let worse = oracle.score(p, &AudioFrameSeq::new(frames)).unwrap();

        println!(
            "text {:?} -> heard {:?}",
            String::from_utf8_lossy(&decode_text(&p.text)),
            String::from_utf8_lossy(&decode_text(&heard))
        );
        println!("  reference: CER {:.3} SSIM {:.3} quality {:.2}", perfect.cer, perfect.ssim + 0.0, perfect.pesq);
        println!("  corrupted: CER {:.3} SSIM {:.3} quality {:.2}", worse.cer, worse.ssim + 0.0, worse.pesq);
    }
}
