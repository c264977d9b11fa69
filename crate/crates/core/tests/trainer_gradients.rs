mod common;

use grpo_tts::fixtures::{finite_difference_check, perturbed_tiny_params};
use grpo_tts::policy::{log_prob, DropFlags};
use grpo_tts::trainers::{dpo_loss, grpo_loss, sft_loss, PreferencePair};

const EPS: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-3;

#[test]
fn sft_loss_gradient_matches_central_differences() {
    let world = common::world();
    let p = perturbed_tiny_params(3);
    let examples = common::tiny_examples(&world, 3, 5);
    let batch: Vec<_> = examples.iter().collect();
    let drops = [DropFlags::NONE, DropFlags::ALL, DropFlags::NONE];
    let (_, g) = sft_loss(&p, &batch, &drops).unwrap();
    let r = finite_difference_check(&p, &g, EPS, FLOOR, |q| sft_loss(q, &batch, &drops).unwrap().0);
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn grpo_loss_gradient_matches_central_differences() {
    let world = common::world();
    let p = perturbed_tiny_params(4);
    let groups = common::groups_with_rewards(&p, &world, &[vec![0.1, 0.7, 0.4], vec![0.9, 0.2, 0.2]], 8);
    let (_, g) = grpo_loss(&p, &groups).unwrap();
    assert!(g.norm() > 1e-3);
    let r = finite_difference_check(&p, &g, EPS, FLOOR, |q| grpo_loss(q, &groups).unwrap().0);
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn grpo_loss_is_advantage_weighted_log_likelihood() {
    let world = common::world();
    let p = perturbed_tiny_params(5);
    let groups = common::groups_with_rewards(&p, &world, &[vec![0.2, 0.5, 0.8], vec![0.0, 1.0]], 9);
    let (loss, _) = grpo_loss(&p, &groups).unwrap();
    let mut j = 0.0;
    let mut n = 0.0;
    for g in &groups {
        for (s, a) in g.responses.iter().zip(&g.advantages) {
            j += a * log_prob(&p, &g.prompt, &s.response).unwrap();
            n += 1.0;
        }
    }
    assert!((loss + j / n).abs() < 1e-12, "{loss} vs {}", -j / n);
}

#[test]
fn dpo_loss_gradient_matches_central_differences() {
    let world = common::world();
    let p = perturbed_tiny_params(6);
    let reference = perturbed_tiny_params(7);
    let groups = common::groups_with_rewards(&reference, &world, &[vec![1.0, 0.0], vec![1.0, 0.0]], 10);
    let pairs: Vec<PreferencePair> = groups
        .iter()
        .map(|g| PreferencePair {
            prompt: g.prompt.clone(),
            winner: g.responses[0].response.clone(),
            loser: g.responses[1].response.clone(),
            winner_reward: 1.0,
            loser_reward: 0.0,
            ref_logp_winner: 0.0,
            ref_logp_loser: 0.0,
        })
        .collect();
    // A large beta keeps the sigmoid weights away from their flat tails.
    let beta = 2.0;
    let (_, g) = dpo_loss(&p, &reference, &pairs, beta).unwrap();
    let r = finite_difference_check(&p, &g, EPS, FLOOR, |q| dpo_loss(q, &reference, &pairs, beta).unwrap().0);
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn dpo_loss_at_reference_is_ln_two() {
    let world = common::world();
    let p = perturbed_tiny_params(8);
    let groups = common::groups_with_rewards(&p, &world, &vec![vec![1.0, 0.0]; 3], 11);
    let pairs: Vec<PreferencePair> = groups
        .iter()
        .map(|g| PreferencePair {
            prompt: g.prompt.clone(),
            winner: g.responses[0].response.clone(),
            loser: g.responses[1].response.clone(),
            winner_reward: 1.0,
            loser_reward: 0.0,
            ref_logp_winner: f64::NAN,
            ref_logp_loser: f64::NAN,
        })
        .collect();
    let (loss, _) = dpo_loss(&p, &p, &pairs, 0.1).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(dpo_loss(&p, &p, &[], 0.1).is_err());
}
