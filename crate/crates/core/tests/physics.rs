mod common;

use bdl_core::sim::{init_scene, max_penetration, rollout, rollout_from, step_with_stats, BallState, ContextKind, SceneConfig, SceneState};
use common::{max_position_error, SubstepOracle};
use proptest::prelude::*;

fn scene(context: ContextKind, seed: u64) -> SceneState {
    init_scene(&SceneConfig::new(context), seed).unwrap()
}

#[test]
fn event_driven_matches_substep_oracle() {
    let oracle = SubstepOracle { dt: 1e-4 };
    for context in [ContextKind::Border, ContextKind::Split] {
        for seed in 0..8 {
            let s = scene(context, seed);
            let traj = rollout_from(s.clone(), seed, 100).unwrap();
            let reference = oracle.run(&s.context, &s.balls, 100);
            let err = max_position_error(&reference, &traj.frames);
            assert!(err < 1e-5, "{context:?} seed {seed}: error {err:e}");
        }
    }
}

#[test]
fn time_reversal_returns_to_start() {
    for context in [ContextKind::Border, ContextKind::Split] {
        for seed in 0..10 {
            let start = scene(context, seed);
            let forward = rollout_from(start.clone(), seed, 30).unwrap();
            let mut end = SceneState { context: start.context, balls: forward.frames.last().unwrap().clone() };
            for b in &mut end.balls {
                b.velocity = (-b.velocity.0, -b.velocity.1);
            }
            let back = rollout_from(end, seed, 30).unwrap();
            for (a, b) in back.frames.last().unwrap().iter().zip(&start.balls) {
                assert!((a.center.0 - b.center.0).abs() < 1e-7 && (a.center.1 - b.center.1).abs() < 1e-7, "{context:?} seed {seed}");
            }
        }
    }
}

#[test]
fn rollouts_are_deterministic() {
    let cfg = SceneConfig::new(ContextKind::Split);
    assert_eq!(rollout(&cfg, 42, 100).unwrap(), rollout(&cfg, 42, 100).unwrap());
}

#[test]
fn balls_stay_on_their_side_of_the_split() {
    for seed in 0..30 {
        let t = rollout(&SceneConfig::new(ContextKind::Split), seed, 100).unwrap();
        let c = t.context.split.unwrap().center_x as f64;
        let sides: Vec<bool> = t.frames[0].iter().map(|b| b.center.0 < c).collect();
        for f in &t.frames {
            assert_eq!(f.iter().map(|b| b.center.0 < c).collect::<Vec<_>>(), sides, "seed {seed}");
        }
    }
}

fn momentum(balls: &[BallState]) -> (f64, f64) {
    balls.iter().fold((0.0, 0.0), |m, b| (m.0 + b.velocity.0, m.1 + b.velocity.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_is_conserved_and_nothing_penetrates(seed in any::<u64>(), split in any::<bool>()) {
        let context = if split { ContextKind::Split } else { ContextKind::Border };
        let t = rollout(&SceneConfig::new(context), seed, 100).unwrap();
        let e0: f64 = t.frames[0].iter().map(BallState::kinetic_energy).sum();
        for f in &t.frames {
            let e: f64 = f.iter().map(BallState::kinetic_energy).sum();
            prop_assert!((e - e0).abs() <= 1e-9 * e0);
            prop_assert!(max_penetration(&t.context, f) <= 1e-9);
        }
    }

    #[test]
    fn ball_collisions_conserve_momentum(seed in any::<u64>()) {
        // Momentum changes only at walls: across frames without wall events it is constant.
        let mut s = scene(ContextKind::Border, seed);
        for f in 1..100 {
            let (next, stats) = step_with_stats(&s, f).unwrap();
            if stats.wall_events == 0 {
                let (a, b) = (momentum(&s.balls), momentum(&next.balls));
                prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            }
            s = next;
        }
    }
}
