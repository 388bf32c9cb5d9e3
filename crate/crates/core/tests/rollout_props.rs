use std::collections::BTreeSet;

use kgenv_core::eval::{evaluate, union_of_runs, EvalConfig, LocalGraphs};
use kgenv_core::protocol::{extract_answer_set, EpisodeStatus, GraphExecutor};
use kgenv_core::reward::{hit_at_1, score_trajectory, HitMode, RewardConfig};
use kgenv_core::rollout::{collect_rollouts, run_episode, OracleFactory, OraclePolicy, RandomFactory, RandomPolicy, RolloutOptions};
use kgenv_core::synth::{synthetic_dataset, GraphShape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> GraphShape {
    GraphShape { nodes: 15, edges: 40, relations: 4, dotted_relations: false }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_terminate_within_budget(seed: u64, max_turns in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = synthetic_dataset(&mut rng, 1, small(), 3).remove(0);
        let opts = RolloutOptions { n: 5, max_turns, seed, concurrency: 2, ..RolloutOptions::default() };
        let group = collect_rollouts(&sample, &RandomPolicy::new(&sample.graph), &opts).unwrap();
        for r in &group.rollouts {
            prop_assert!(r.trajectory.is_terminated());
            prop_assert!(r.trajectory.retrieval_count() <= max_turns);
            prop_assert!(r.trajectory.turns.len() <= max_turns);
        }
    }

    #[test]
    fn oracle_rollouts_are_sound(seed: u64, max_turns in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for sample in synthetic_dataset(&mut rng, 3, small(), max_turns - 1) {
            let policy = OraclePolicy::for_sample(&sample, max_turns).unwrap();
            let opts = RolloutOptions { n: 2, max_turns, ..RolloutOptions::default() };
            let mut group = collect_rollouts(&sample, &policy, &opts).unwrap();
            group.score(&sample.gold_set(), &RewardConfig::default()).unwrap();
            for r in &group.rollouts {
                let b = r.rewards.as_ref().unwrap();
                prop_assert_eq!(r.trajectory.status, EpisodeStatus::Answered);
                prop_assert!(b.f1 > 0.0);
                prop_assert_eq!(b.v_ret, 1);
            }
        }
    }

    #[test]
    fn rollout_order_does_not_change_scores(seed: u64, n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = synthetic_dataset(&mut rng, 1, small(), 3).remove(0);
        let policy = RandomPolicy::new(&sample.graph);
        let opts = RolloutOptions { n, max_turns: 5, seed, concurrency: 3, ..RolloutOptions::default() };
        let group = collect_rollouts(&sample, &policy, &opts).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let executor = GraphExecutor::new(&sample.graph, opts.exec);
        let mut solo: Vec<_> = order.iter().map(|&i| run_episode(&sample, &policy, &executor, i, &opts).unwrap()).collect();
        solo.sort_by_key(|r| r.index);
        let gold = sample.gold_set();
        for (a, b) in group.rollouts.iter().zip(&solo) {
            prop_assert_eq!(serde_json::to_string(&a.trajectory).unwrap(), serde_json::to_string(&b.trajectory).unwrap());
            let cfg = RewardConfig::default();
            prop_assert_eq!(score_trajectory(&a.trajectory, &gold, &cfg).unwrap(), score_trajectory(&b.trajectory, &gold, &cfg).unwrap());
        }
    }

    #[test]
    fn union_hit_never_drops_as_runs_are_added(
        runs in proptest::collection::vec(proptest::collection::vec(0u8..10, 0..4), 1..8),
        gold in proptest::collection::btree_set(0u8..10, 1..3),
    ) {
        let sets: Vec<_> = runs
            .iter()
            .map(|r| extract_answer_set(&r.iter().map(|i| format!("v{i}")).collect::<Vec<_>>().join(", "), None))
            .collect();
        let gold: BTreeSet<String> = gold.iter().map(|i| format!("v{i}")).collect();
        let mut last = 0;
        for k in 1..=sets.len() {
            let hit = hit_at_1(&union_of_runs(&sets[..k]).unwrap(), &gold, HitMode::Intersection).unwrap();
            prop_assert!(hit >= last);
            last = hit;
        }
    }
}

#[test]
fn reports_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = synthetic_dataset(&mut rng, 12, small(), 3);
    let cfg = EvalConfig { n: 3, seed: 99, ..EvalConfig::default() };
    let a = evaluate(&samples, &RandomFactory, &LocalGraphs(cfg.exec_options()), &cfg).unwrap();
    let b = evaluate(&samples, &RandomFactory, &LocalGraphs(cfg.exec_options()), &EvalConfig { concurrency: 1, ..cfg }).unwrap();
    let again = evaluate(&samples, &RandomFactory, &LocalGraphs(cfg.exec_options()), &cfg).unwrap();
    assert_eq!(a.to_json(), again.to_json());
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(serde_json::to_string(&a.datasets).unwrap(), serde_json::to_string(&b.datasets).unwrap());
    assert_eq!(a.fingerprint, b.fingerprint);
    let other_seed = evaluate(&samples, &RandomFactory, &LocalGraphs(cfg.exec_options()), &EvalConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(a.fingerprint, other_seed.fingerprint);
}

#[test]
fn oracle_evaluation_is_perfect_on_reachable_answers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = synthetic_dataset(&mut rng, 20, small(), 4);
    let cfg = EvalConfig::default();
    let report = evaluate(&samples, &OracleFactory { max_turns: cfg.max_turns }, &LocalGraphs(cfg.exec_options()), &cfg).unwrap();
    assert_eq!(report.scored, 20);
    assert_eq!(report.overall.f1, 1.0);
    assert_eq!(report.overall.hit_at_1, 1.0);
    assert_eq!(report.overall.retrieval_rate, 1.0);
}
