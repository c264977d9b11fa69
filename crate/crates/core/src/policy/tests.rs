use super::*;
use crate::fixtures::{self, finite_difference_check, perturbed_tiny_params, tiny_prompt, tiny_world};
use crate::rng;
use crate::tokens::{AudioFrameSeq, FrameVocab};

fn some_response(p: &PolicyParams, prompt: &Prompt, seed: u64) -> AudioFrameSeq {
    let mut r = rng::rng_for(seed, &[]);
    sample_response(p, prompt, &SampleOptions::sampled(1.0), &mut r)
        .unwrap()
        .response
}

#[test]
fn untrained_log_prob_is_uniform() {
    let w = tiny_world();
    let p = init_params(&ModelConfig::tiny(), 1).unwrap();
    let mut r = rng::rng_for(2, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    let v = p.config.vocab_size as f64;
    let response = AudioFrameSeq::new(vec![w.vocab.eos_frame()]);
    let lp = log_prob(&p, &prompt, &response).unwrap();
    // Hand-rolled softmax over the raw logits of the single step.
    let logits = next_frame_logits(&p, &prompt, DropFlags::NONE, &[]).unwrap();
    let oracle: f64 = (0..2)
        .map(|ch| {
            let row = &logits[ch];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            (row[response.frames()[0][ch] as usize].exp() / z).ln()
        })
        .sum();
    assert!((lp - oracle).abs() < 1e-12);
    assert!((lp - 2.0 * (1.0 / v).ln()).abs() < 1e-12);
}

#[test]
fn sampling_records_the_teacher_forced_log_prob() {
    let w = tiny_world();
    let p = perturbed_tiny_params(3);
    let mut r = rng::rng_for(4, &[]);
    for _ in 0..10 {
        let prompt = tiny_prompt(&w, &mut r);
        let s = sample_response(&p, &prompt, &SampleOptions::sampled(1.0), &mut r).unwrap();
        let lp = log_prob(&p, &prompt, &s.response).unwrap();
        assert!((lp - s.logprob_conditional).abs() < 1e-10, "{lp} vs {}", s.logprob_conditional);
        assert!(s.logprob_conditional <= 0.0);

        // Guided sampling still records the conditional likelihood.
        let g = sample_response(&p, &prompt, &SampleOptions::sampled(0.7).with_cfg(Some(2.5)), &mut r).unwrap();
        assert!(g.sampled_with_cfg);
        let lp = log_prob(&p, &prompt, &g.response).unwrap();
        assert!((lp - g.logprob_conditional).abs() < 1e-10);
    }
}

#[test]
fn appending_a_frame_lowers_log_prob() {
    let w = tiny_world();
    let p = perturbed_tiny_params(5);
    let mut r = rng::rng_for(6, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    let mut frames = vec![[1, 2]];
    for next in [[3, 4], [5, 6], w.vocab.eos_frame()] {
        let before = log_prob(&p, &prompt, &AudioFrameSeq::new(frames.clone())).unwrap();
        frames.push(next);
        let after = log_prob(&p, &prompt, &AudioFrameSeq::new(frames.clone())).unwrap();
        assert!(after < before);
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let w = tiny_world();
    let p = perturbed_tiny_params(7);
    let mut r = rng::rng_for(8, &[]);
    for drop in [DropFlags::NONE, DropFlags::ALL, DropFlags { text: true, context: false }] {
        let prompt = tiny_prompt(&w, &mut r);
        let cond = conditioning(&p, &prompt, drop);
        let mut state = decode::DecoderState::new(&p, &cond).unwrap();
        let prefix = [[1, 2], [3, 4], [5, 6]];
        let mut input = p.config.vocab().bos_frame();
        for t in 0..=prefix.len() {
            let inc = state.step(&input).unwrap();
            let full = next_frame_logits(&p, &prompt, drop, &prefix[..t]).unwrap();
            for ch in 0..2 {
                for (a, b) in inc[ch].iter().zip(&full[ch]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            if t < prefix.len() {
                input = prefix[t];
            }
        }
    }
}

#[test]
fn logits_are_finite_pure_and_normalize() {
    let w = tiny_world();
    let p = perturbed_tiny_params(9);
    let mut r = rng::rng_for(10, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    let a = next_frame_logits(&p, &prompt, DropFlags::NONE, &[[1, 2]]).unwrap();
    let b = next_frame_logits(&p, &prompt, DropFlags::NONE, &[[1, 2]]).unwrap();
    assert_eq!(a, b);
    for row in &a {
        assert_eq!(row.len(), 16);
        assert!(row.iter().all(|x| x.is_finite()));
        let s: f64 = nn::log_softmax(row).iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let dropped = next_frame_logits(&p, &prompt, DropFlags { text: true, context: false }, &[[1, 2]]).unwrap();
    assert_ne!(a, dropped);
}

#[test]
fn overlong_inputs_are_rejected() {
    let w = tiny_world();
    let p = perturbed_tiny_params(11);
    let mut r = rng::rng_for(12, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    let prefix = vec![[1, 2]; p.config.max_gen_len];
    assert!(matches!(
        next_frame_logits(&p, &prompt, DropFlags::NONE, &prefix),
        Err(Error::LengthExceeded { .. })
    ));
    let long = fixtures::prompt_with_lengths(&w, &mut r, 7, 2);
    assert!(matches!(
        next_frame_logits(&p, &long, DropFlags::NONE, &[]),
        Err(Error::LengthExceeded { .. })
    ));
}

#[test]
fn cfg_at_scale_one_is_conditional() {
    let w = tiny_world();
    let p = perturbed_tiny_params(13);
    let mut r = rng::rng_for(14, &[]);
    for _ in 0..20 {
        let prompt = tiny_prompt(&w, &mut r);
        let cond = next_frame_logits(&p, &prompt, DropFlags::NONE, &[[2, 3]]).unwrap();
        let uncond = next_frame_logits(&p, &prompt, DropFlags::ALL, &[[2, 3]]).unwrap();
        for ch in 0..2 {
            let g = cfg_combine(&cond[ch], &uncond[ch], 1.0);
            let diff = g.iter().zip(&cond[ch]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9);
        }
    }
}

#[test]
fn greedy_and_seeded_sampling_are_deterministic() {
    let w = tiny_world();
    let p = perturbed_tiny_params(15);
    let mut r = rng::rng_for(16, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    let a = sample_response(&p, &prompt, &SampleOptions::greedy(), &mut rng::rng_for(1, &[])).unwrap();
    let b = sample_response(&p, &prompt, &SampleOptions::greedy(), &mut rng::rng_for(2, &[])).unwrap();
    assert_eq!(a, b);
    let opts = SampleOptions::sampled(0.7).with_cfg(Some(2.5));
    let a = sample_response(&p, &prompt, &opts, &mut rng::rng_for(3, &[])).unwrap();
    let b = sample_response(&p, &prompt, &opts, &mut rng::rng_for(3, &[])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn responses_respect_the_length_cap() {
    let w = tiny_world();
    let p = perturbed_tiny_params(17);
    let mut r = rng::rng_for(18, &[]);
    let vocab: FrameVocab = p.config.vocab();
    for _ in 0..30 {
        let prompt = tiny_prompt(&w, &mut r);
        let s = sample_response(&p, &prompt, &SampleOptions::sampled(1.5), &mut r).unwrap();
        let n = s.response.len();
        assert!(n <= p.config.gen_limit(prompt.text.len()));
        let ended = s.response.is_well_formed(vocab);
        assert!(ended || n == p.config.gen_limit(prompt.text.len()));
    }
}

#[test]
fn non_positive_temperature_is_rejected() {
    let w = tiny_world();
    let p = perturbed_tiny_params(19);
    let mut r = rng::rng_for(20, &[]);
    let prompt = tiny_prompt(&w, &mut r);
    for t in [0.0, -1.0, f64::NAN] {
        assert!(matches!(
            sample_response(&p, &prompt, &SampleOptions::sampled(t), &mut r),
            Err(Error::InvalidInput(_))
        ));
    }
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let w = tiny_world();
    let mut r = rng::rng_for(21, &[]);
    for seed in 0..3 {
        let p = perturbed_tiny_params(100 + seed);
        let prompt = tiny_prompt(&w, &mut r);
        let response = some_response(&p, &prompt, seed);
        let g = grad_log_prob(&p, &prompt, &response).unwrap();
        let rep = finite_difference_check(&p, &g, 1e-4, 1e-6, |q| log_prob(q, &prompt, &response).unwrap());
        assert!(rep.max_rel_err < 1e-3, "{rep:?}");
    }
}

#[test]
fn dropped_conditioning_gradient_matches_finite_differences() {
    let w = tiny_world();
    let mut r = rng::rng_for(22, &[]);
    let p = perturbed_tiny_params(200);
    let prompt = tiny_prompt(&w, &mut r);
    let response = some_response(&p, &prompt, 1);
    let mut g = Gradient::zeros_like(&p);
    accumulate_log_prob_grad(&p, &prompt, DropFlags::ALL, &response, 1.0, &mut g).unwrap();
    let rep = finite_difference_check(&p, &g, 1e-4, 1e-6, |q| {
        log_prob_with(q, &prompt, DropFlags::ALL, &response).unwrap()
    });
    assert!(rep.max_rel_err < 1e-3, "{rep:?}");
}

#[test]
fn zeroed_heads_cut_every_upstream_gradient() {
    let w = tiny_world();
    let mut r = rng::rng_for(23, &[]);
    let mut p = perturbed_tiny_params(300);
    let layout = p.layout.clone();
    for ch in 0..2 {
        p.values[layout.range(layout.head_w[ch])].fill(0.0);
    }
    let prompt = tiny_prompt(&w, &mut r);
    let response = some_response(&p, &prompt, 2);
    let g = grad_log_prob(&p, &prompt, &response).unwrap();
    let head_ranges: Vec<_> = (0..2)
        .flat_map(|ch| [layout.range(layout.head_w[ch]), layout.range(layout.head_b[ch])])
        .collect();
    for (i, v) in g.0.iter().enumerate() {
        if !head_ranges.iter().any(|r| r.contains(&i)) {
            assert_eq!(*v, 0.0, "coordinate {i} leaked gradient");
        }
    }
    // Unused text embeddings never receive gradient.
    let p = perturbed_tiny_params(301);
    let g = grad_log_prob(&p, &prompt, &response).unwrap();
    let d = p.config.width;
    let text_emb = &g.0[layout.range(layout.text_emb)];
    for tok in 0..256 {
        if !prompt.text.ids().any(|id| id == tok) {
            assert!(text_emb[tok * d..(tok + 1) * d].iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn gradient_is_linear_in_responses() {
    let w = tiny_world();
    let mut r = rng::rng_for(24, &[]);
    let p = perturbed_tiny_params(400);
    let prompt = tiny_prompt(&w, &mut r);
    let y1 = some_response(&p, &prompt, 5);
    let y2 = some_response(&p, &prompt, 6);
    let mut both = Gradient::zeros_like(&p);
    accumulate_log_prob_grad(&p, &prompt, DropFlags::NONE, &y1, 1.0, &mut both).unwrap();
    accumulate_log_prob_grad(&p, &prompt, DropFlags::NONE, &y2, 1.0, &mut both).unwrap();
    let mut sum = grad_log_prob(&p, &prompt, &y1).unwrap();
    sum.add_scaled(&grad_log_prob(&p, &prompt, &y2).unwrap(), 1.0);
    for (a, b) in both.0.iter().zip(&sum.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    use rand::RngCore;
    let p = perturbed_tiny_params(500);
    let mut rng = rng::rng_for(9, &[]);
    rng.next_u64();
    let mut ck = Checkpoint::new("sft", p.clone());
    ck.rng = Some(RngState::capture(&rng));
    ck.meta = serde_json::json!({"step": 3});
    let text = ck.to_json();
    let back = Checkpoint::from_json(&text, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert!(back.params.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    let mut restored = back.rng.unwrap().restore().unwrap();
    assert_eq!(restored.next_u64(), rng.next_u64());
}
