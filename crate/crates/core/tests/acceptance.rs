//! One PASS/FAIL line per acceptance criterion.
//!
//! The two end-to-end experiments run the desk profile under
//! `$CARGO_TARGET_TMPDIR/acceptance-desk` (or `GRPO_TTS_ACCEPTANCE_DIR`).
//! Every stage is stamped, so only the first invocation pays for training.
//! Set `GRPO_TTS_ACCEPTANCE_SKIP_REPRO=1` to skip them.
//!
//! The process fails when an exact check (1 to 7, 10) fails. The
//! experiment trends are reported but do not fail the build.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use grpo_tts::cli::config::{resolve, Overrides, Profile};
use grpo_tts::cli::repro::{fig3, table1, Fig3Summary};
use grpo_tts::cli::stages::Workspace;
use grpo_tts::fixtures::{finite_difference_check, perturbed, tiny_prompt};
use grpo_tts::policy::{
    cfg_combine, grad_log_prob, log_prob, next_frame_logits, sample_response, DropFlags, ModelConfig, PolicyParams,
    SampleOptions,
};
use grpo_tts::rewards::{normalize_pesq, normalize_piecewise, AnchorSpec};
use grpo_tts::rng::{rng_for, Rng};
use grpo_tts::synthworld::oracles::{asr_decode, character_error_rate};
use grpo_tts::synthworld::{gen_world_from, synthesize_reference, WorldSpec};
use grpo_tts::tokens::{TextSeq, TextToken};
use grpo_tts::trainers::{dpo_loss, group_advantages, grpo_loss, sft_step, PreferencePair, RolloutGroup};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tiny(seed: u64) -> PolicyParams {
    perturbed(&ModelConfig::tiny(), seed, 0.3)
}

/// `k` sampled responses to one tiny prompt, grouped with `rewards`.
fn group(p: &PolicyParams, r: &mut Rng, rewards: Vec<f64>) -> RolloutGroup {
    let world = common::world();
    let prompt = tiny_prompt(&world, r);
    let responses = rewards
        .iter()
        .map(|_| sample_response(p, &prompt, &SampleOptions::sampled(1.0), r).unwrap())
        .collect();
    let n = rewards.len();
    RolloutGroup::from_rewards(0, prompt, responses, vec![None; n], vec![None; n], rewards)
}

fn advantages_exact() -> Outcome {
    let t = Instant::now();
    let mut r = rng_for(1, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let k = r.gen_range(2..=12);
        let rs: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
        let mean = rs.iter().sum::<f64>() / k as f64;
        let (_, adv) = group_advantages(&rs);
        for (a, x) in adv.iter().zip(&rs) {
            worst = worst.max((a - (x - mean)).abs());
        }
        worst = worst.max(adv.iter().sum::<f64>().abs());
    }
    let s = t.elapsed().as_secs_f64();
    outcome(worst <= 1e-12 && s < 5.0, format!("10000 groups, max error {worst:.1e}, {s:.2}s"))
}

fn zero_signal_fixpoint() -> Outcome {
    let t = Instant::now();
    let mut r = rng_for(2, &[]);
    let mut worst_loss = 0.0f64;
    let mut worst_norm = 0.0f64;
    for case in 0..100 {
        let p = tiny(1000 + case);
        let groups: Vec<RolloutGroup> = (0..3)
            .map(|_| {
                let k = r.gen_range(2..=6);
                let c = r.gen::<f64>();
                group(&p, &mut r, vec![c; k])
            })
            .collect();
        let (loss, g) = grpo_loss(&p, &groups).unwrap();
        worst_loss = worst_loss.max(loss.abs());
        worst_norm = worst_norm.max(g.norm());
    }
    let s = t.elapsed().as_secs_f64();
    outcome(
        worst_loss == 0.0 && worst_norm < 1e-8 && s < 30.0,
        format!("100 parameter draws, max |loss| {worst_loss:.1e}, max grad norm {worst_norm:.1e}, {s:.2}s"),
    )
}

fn shift_invariance() -> Outcome {
    let mut r = rng_for(3, &[]);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let p = tiny(2000 + case % 20);
        let k = r.gen_range(2..=6);
        let rs: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
        let base = group(&p, &mut r, rs.clone());
        let shift = r.gen_range(-5.0..5.0);
        let shifted = RolloutGroup::from_rewards(
            0,
            base.prompt.clone(),
            base.responses.clone(),
            vec![None; k],
            vec![None; k],
            rs.iter().map(|x| x + shift).collect(),
        );
        let (la, ga) = grpo_loss(&p, std::slice::from_ref(&base)).unwrap();
        let (lb, gb) = grpo_loss(&p, &[shifted]).unwrap();
        worst = worst.max((la - lb).abs());
        for (x, y) in ga.0.iter().zip(&gb.0) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst < 1e-10, format!("1000 cases, max change {worst:.1e}"))
}

fn gradients() -> Outcome {
    const EPS: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let t = Instant::now();
    let world = common::world();
    let mut r = rng_for(4, &[]);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut n_params = 0;

    let p = tiny(41);
    n_params = n_params.max(p.values.len());
    let prompt = tiny_prompt(&world, &mut r);
    let y = sample_response(&p, &prompt, &SampleOptions::sampled(1.0), &mut r).unwrap().response;
    let g = grad_log_prob(&p, &prompt, &y).unwrap();
    let e = finite_difference_check(&p, &g, EPS, FLOOR, |q| log_prob(q, &prompt, &y).unwrap()).max_rel_err;
    parts.push(format!("log_prob {e:.1e}"));
    worst = worst.max(e);

    let p = tiny(42);
    let examples = common::tiny_examples(&world, 4, 43);
    let batch: Vec<_> = examples.iter().collect();
    // Half the examples drop their conditioning at this seed and p_drop.
    let step = |q: &PolicyParams| sft_step(q, &batch, 0.5, &mut rng_for(44, &[])).unwrap();
    let (_, g) = step(&p);
    let e = finite_difference_check(&p, &g, EPS, FLOOR, |q| step(q).0).max_rel_err;
    parts.push(format!("sft_step {e:.1e}"));
    worst = worst.max(e);

    let p = tiny(45);
    let groups = vec![group(&p, &mut r, vec![0.1, 0.7, 0.4]), group(&p, &mut r, vec![0.9, 0.2])];
    let (_, g) = grpo_loss(&p, &groups).unwrap();
    let e = finite_difference_check(&p, &g, EPS, FLOOR, |q| grpo_loss(q, &groups).unwrap().0).max_rel_err;
    parts.push(format!("grpo_loss {e:.1e}"));
    worst = worst.max(e);

    let p = tiny(46);
    let reference = tiny(47);
    let pairs: Vec<PreferencePair> = (0..2)
        .map(|_| {
            let g = group(&reference, &mut r, vec![1.0, 0.0]);
            let lw = log_prob(&reference, &g.prompt, &g.responses[0].response).unwrap();
            let ll = log_prob(&reference, &g.prompt, &g.responses[1].response).unwrap();
            PreferencePair {
                prompt: g.prompt.clone(),
                winner: g.responses[0].response.clone(),
                loser: g.responses[1].response.clone(),
                winner_reward: 1.0,
                loser_reward: 0.0,
                ref_logp_winner: lw,
                ref_logp_loser: ll,
            }
        })
        .collect();
    let (_, g) = dpo_loss(&p, &reference, &pairs, 1.0).unwrap();
    let e = finite_difference_check(&p, &g, EPS, FLOOR, |q| dpo_loss(q, &reference, &pairs, 1.0).unwrap().0).max_rel_err;
    parts.push(format!("dpo_loss {e:.1e}"));
    worst = worst.max(e);

    let s = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && n_params <= 5000 && s < 300.0,
        format!("{n_params} parameters, max relative error: {}, {s:.1}s", parts.join(", ")),
    )
}

fn normalization() -> Outcome {
    let mut ok = true;
    for m in [0.05, 0.3, 0.5, 0.77, 0.95] {
        for spec in [AnchorSpec::cer(m).unwrap(), AnchorSpec::ssim(m).unwrap()] {
            let f = |x: f64| normalize_piecewise(x, &spec).unwrap();
            ok &= f(spec.worst) == 0.0 && f(spec.best) == 1.0 && f(m) == 0.5;
        }
        let cer = AnchorSpec::cer(m).unwrap();
        ok &= normalize_piecewise(1.7, &cer).unwrap() == 0.0 && normalize_piecewise(-0.2, &cer).unwrap() == 1.0;
        let ssim = AnchorSpec::ssim(m).unwrap();
        ok &= normalize_piecewise(-0.4, &ssim).unwrap() == 0.0 && normalize_piecewise(1.3, &ssim).unwrap() == 1.0;
    }
    ok &= normalize_pesq(4.5) == 1.0 && normalize_pesq(0.0) == 0.0;
    ok &= normalize_pesq(5.2) == 1.0 && normalize_pesq(-0.5) == 0.0;
    outcome(ok, "end anchors, baseline midpoint and clipping for CER, SSIM and quality")
}

fn cfg_identity() -> Outcome {
    let world = common::world();
    let mut r = rng_for(6, &[]);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let p = tiny(3000 + case % 25);
        let prompt = tiny_prompt(&world, &mut r);
        let n = r.gen_range(0..p.config.max_gen_len);
        let prefix: Vec<_> = (0..n).map(|_| std::array::from_fn(|_| r.gen_range(0..p.config.vocab_size))).collect();
        let cond = next_frame_logits(&p, &prompt, DropFlags::NONE, &prefix).unwrap();
        let uncond = next_frame_logits(&p, &prompt, DropFlags::ALL, &prefix).unwrap();
        for ch in 0..cond.len() {
            for (g, c) in cfg_combine(&cond[ch], &uncond[ch], 1.0).iter().zip(&cond[ch]) {
                worst = worst.max((g - c).abs());
            }
        }
    }
    outcome(worst < 1e-9, format!("1000 (prompt, prefix) cases, max difference {worst:.1e}"))
}

fn recursive_edit_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = recursive_edit_distance(ra, rb) + usize::from(x != y);
            let del = recursive_edit_distance(ra, b) + 1;
            let ins = recursive_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn strings_up_to(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        all.extend(frontier.iter().cloned());
    }
    all
}

fn to_text(s: &[u8]) -> TextSeq {
    TextSeq(s.iter().copied().map(TextToken).collect())
}

fn oracle_soundness() -> Outcome {
    let t = Instant::now();
    let mut round_trips = 0usize;
    let mut ok = true;
    let world = gen_world_from(&WorldSpec::new(11, 2, 2, 2)).unwrap();
    for lang in &world.languages {
        let texts = strings_up_to(&lang.alphabet.iter().map(|t| t.0).collect::<Vec<_>>(), 16);
        for spk in &world.speakers {
            for s in texts.iter().filter(|s| !s.is_empty()) {
                let text = to_text(s);
                let audio = synthesize_reference(world.vocab, lang, spk, &text).unwrap();
                ok &= character_error_rate(&text, &asr_decode(&audio, &world)).unwrap() == 0.0;
                round_trips += 1;
            }
        }
    }
    let strings = strings_up_to(b"abc", 6);
    let mut pairs = 0usize;
    for a in &strings {
        for b in &strings {
            if a.is_empty() {
                ok &= character_error_rate(&to_text(a), &to_text(b)).is_err();
                continue;
            }
            let want = (recursive_edit_distance(a, b) as f64 / a.len() as f64).min(1.0);
            ok &= character_error_rate(&to_text(a), &to_text(b)).unwrap() == want;
            pairs += 1;
        }
    }
    outcome(
        ok,
        format!(
            "{round_trips} reference round trips, {pairs} CER pairs of {} strings, {:.1}s",
            strings.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn desk_workspace() -> Workspace {
    let dir = std::env::var_os("GRPO_TTS_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"));
    let cfg = resolve(&Overrides {
        profile: Some(Profile::Desk),
        run_dir: Some(dir),
        ..Overrides::default()
    })
    .unwrap();
    let ws = Workspace::new(cfg);
    ws.write_snapshot().unwrap();
    ws
}

fn fig3_trend(summary: &Fig3Summary) -> Outcome {
    let cer = |sft, grpo, l| summary.get(sft, grpo, l).unwrap().cer.mean;
    let ssim = |sft, grpo, l| summary.get(sft, grpo, l).unwrap().ssim.mean;
    let mut ok = summary.runtime_seconds <= 1200.0;
    let mut parts = vec![format!("stage time {:.0}s", summary.runtime_seconds)];
    for &l in &summary.held_out_languages {
        let (b, bg) = (cer(None, false, l), cer(None, true, l));
        let (s, sg) = (cer(Some(256), false, l), cer(Some(256), true, l));
        let checks = [
            ("a", b > 0.30),
            ("b", s < 0.15),
            ("c", sg <= 0.5 * s),
            ("d", bg <= 0.7 * b),
            ("e", ssim(None, true, l) >= ssim(None, false, l) && ssim(Some(256), true, l) >= ssim(Some(256), false, l)),
        ];
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        ok &= failed.is_empty();
        parts.push(format!(
            "language {l}: baseline {:.1}% -> {:.1}%, SFT-256 {:.1}% -> {:.1}%{}",
            100.0 * b,
            100.0 * bg,
            100.0 * s,
            100.0 * sg,
            if failed.is_empty() { String::new() } else { format!(" (failed {})", failed.join(",")) }
        ));
    }
    outcome(ok, parts.join("; "))
}

fn determinism() -> Outcome {
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let d = tempfile::tempdir().unwrap();
            let c = common::write_tiny_config(d.path());
            let ws = Workspace::new(
                resolve(&Overrides {
                    config: Some(c),
                    ..Overrides::default()
                })
                .unwrap(),
            );
            fig3(&ws).unwrap();
            let mut files = Vec::new();
            for sub in ["checkpoints", "eval/fig3", "anchors", "logs"] {
                let mut entries: Vec<_> = std::fs::read_dir(ws.path(sub)).unwrap().map(|e| e.unwrap().path()).collect();
                entries.sort();
                for p in entries {
                    files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
                }
            }
            files
        })
        .collect();
    let names = |i: usize| runs[i].iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let same = names(0) == names(1) && differing.is_empty();
    let mut detail = format!("{} artifacts compared byte for byte across two fresh runs", runs[0].len());
    if !differing.is_empty() {
        detail.push_str(&format!("; differing: {}", differing.join(", ")));
    }
    outcome(same, detail)
}

fn main() {
    let mut exact_ok = true;
    let mut report = |id: &str, exact: bool, o: Outcome| {
        println!("criterion {id:>2} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if exact && !o.pass {
            exact_ok = false;
        }
    };
    report("1", true, advantages_exact());
    report("2", true, zero_signal_fixpoint());
    report("3", true, shift_invariance());
    report("4", true, gradients());
    report("5", true, normalization());
    report("6", true, cfg_identity());
    report("7", true, oracle_soundness());
    if std::env::var_os("GRPO_TTS_ACCEPTANCE_SKIP_REPRO").is_some() {
        println!("criterion  8 SKIP experiments disabled");
        println!("criterion  9 SKIP experiments disabled");
    } else {
        let ws = desk_workspace();
        let (f3, _) = fig3(&ws).unwrap();
        report("8", false, fig3_trend(&f3));
        let (t1, _) = table1(&ws).unwrap();
        let n = t1.repetitions.len();
        report(
            "9",
            false,
            outcome(t1.grpo_wins >= 4, format!("GRPO matches or beats DPO on CER and SSIM in {}/{n} repetitions", t1.grpo_wins)),
        );
    }
    report("10", true, determinism());
    if !exact_ok {
        std::process::exit(1);
    }
}
