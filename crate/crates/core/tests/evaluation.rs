mod common;

use grpo_tts::evalharness::{emit_report, evaluate, EvalSettings, MetricsReport, Stat};
use grpo_tts::fixtures::perturbed_tiny_params;
use grpo_tts::synthworld::oracles::{Oracle, SynthOracle};
use grpo_tts::synthworld::PromptSet;
use grpo_tts::trainers::{LogRecord, ValidationSummary};

fn settings(n_runs: usize) -> EvalSettings {
    EvalSettings {
        n_runs,
        ..EvalSettings::default()
    }
}

#[test]
fn single_run_has_no_interval() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let prompts = common::tiny_prompts(&world, 6, 1);
    let r = evaluate(&perturbed_tiny_params(1), "x", &prompts, &oracle, &settings(1), 3).unwrap();
    assert!(r.rows.iter().all(|row| row.cer.ci.is_none() && row.ssim.ci.is_none() && row.quality.ci.is_none()));
    let r = evaluate(&perturbed_tiny_params(1), "x", &prompts, &oracle, &settings(3), 3).unwrap();
    assert!(r.rows.iter().all(|row| row.cer.ci.is_some()));
    assert_eq!(Stat::from_runs(&[0.5]).ci, None);
}

#[test]
fn reference_audio_scores_perfectly() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    for ex in common::tiny_examples(&world, 10, 2) {
        let s = oracle.score(&ex.prompt(), &ex.target_audio).unwrap();
        assert_eq!(s.cer, 0.0);
        assert_eq!(s.pesq, 4.5);
    }
}

#[test]
fn report_has_pooled_and_per_language_rows_for_both_modes() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let prompts = common::tiny_prompts(&world, 12, 3);
    let r = evaluate(&perturbed_tiny_params(2), "x", &prompts, &oracle, &settings(2), 3).unwrap();
    let mut langs: Vec<u32> = prompts.prompts.iter().map(|p| p.language_id).collect();
    langs.sort_unstable();
    langs.dedup();
    assert_eq!(r.rows.len(), 2 * (1 + langs.len()));
    for cfg in [false, true] {
        assert_eq!(r.row(None, cfg).unwrap().n_prompts, 12);
        let total: usize = langs.iter().map(|&l| r.row(Some(l), cfg).unwrap().n_prompts).sum();
        assert_eq!(total, 12);
    }
    for row in &r.rows {
        assert!((0.0..=1.0).contains(&row.cer.mean));
        assert!((1.0..=4.5).contains(&row.quality.mean));
    }
}

#[test]
fn evaluation_is_deterministic_and_order_free() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let p = perturbed_tiny_params(3);
    let prompts = common::tiny_prompts(&world, 9, 4);
    let a = evaluate(&p, "x", &prompts, &oracle, &settings(2), 8).unwrap();
    let b = evaluate(&p, "x", &prompts, &oracle, &settings(2), 8).unwrap();
    assert_eq!(a, b);
    let mut reversed = prompts.clone();
    reversed.prompts.reverse();
    let c = evaluate(&p, "x", &reversed, &oracle, &settings(2), 8).unwrap();
    assert_eq!(a, c);
    let d = evaluate(&p, "x", &prompts, &oracle, &settings(2), 9).unwrap();
    assert_ne!(a.rows, d.rows);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let p = perturbed_tiny_params(4);
    let before = p.clone();
    evaluate(&p, "x", &common::tiny_prompts(&world, 4, 5), &oracle, &settings(1), 1).unwrap();
    assert_eq!(p, before);
    assert!(evaluate(&p, "x", &PromptSet::default(), &oracle, &settings(1), 1).is_err());
    assert!(evaluate(&p, "x", &common::tiny_prompts(&world, 2, 5), &oracle, &settings(0), 1).is_err());
}

fn sample_log() -> Vec<LogRecord> {
    let v = |iteration, r_cer| LogRecord::Validation {
        iteration,
        summary: ValidationSummary {
            r_cer,
            raw_cer: 0.2,
            raw_ssim: 0.5,
            reward: 0.4,
        },
    };
    let t = |iteration, mean_reward| LogRecord::Train {
        iteration,
        loss: 0.1,
        mean_reward,
        mean_r_cer: 0.5,
        mean_r_ssim: 0.5,
        mean_r_pesq: 0.5,
        mean_raw_cer: 0.2,
    };
    vec![v(0, 0.5), t(1, 0.4), t(2, 0.45), v(2, 0.6)]
}

#[test]
fn emitted_files_are_byte_identical_and_agree() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let r = evaluate(&perturbed_tiny_params(5), "abc", &common::tiny_prompts(&world, 6, 6), &oracle, &settings(2), 2)
        .unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let f1 = emit_report(&r, &sample_log(), d1.path()).unwrap();
    let f2 = emit_report(&r, &sample_log(), d2.path()).unwrap();
    assert_eq!(f1.len(), 3);
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{}", a.display());
    }

    let back = MetricsReport::load(&d1.path().join("report.json")).unwrap();
    assert_eq!(back, r);
    let mut csv = csv::Reader::from_path(d1.path().join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = csv.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), r.rows.len());
    for (rec, row) in rows.iter().zip(&r.rows) {
        assert_eq!(&rec[0], row.language_label());
        let close = |s: &str, v: f64| (s.parse::<f64>().unwrap() - v).abs() < 1e-6;
        assert!(close(&rec[2], row.cer.mean));
        assert!(close(&rec[3], row.cer.ci.unwrap()));
        assert!(close(&rec[4], row.ssim.mean));
        assert!(close(&rec[6], row.quality.mean));
    }
}

#[test]
fn empty_log_writes_no_curves() {
    let world = common::world();
    let oracle = SynthOracle::new(&world);
    let r = evaluate(&perturbed_tiny_params(6), "x", &common::tiny_prompts(&world, 3, 7), &oracle, &settings(1), 2)
        .unwrap();
    let d = tempfile::tempdir().unwrap();
    let files = emit_report(&r, &[], d.path()).unwrap();
    assert_eq!(files.len(), 2);
    assert!(!d.path().join("curves.svg").exists());
    let csv = std::fs::read_to_string(d.path().join("report.csv")).unwrap();
    // Missing intervals are empty fields.
    assert!(csv.lines().nth(1).unwrap().contains(",,"));
}
