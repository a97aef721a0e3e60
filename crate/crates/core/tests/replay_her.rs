//! Replay buffer and hindsight relabeling against independent oracles.
//!
//! The oracle recomputes relabeled rewards and discounted returns from the
//! raw episode with its own arithmetic; relabeled samples must match exactly.

use graspq_core::replay::{observed_returns, HerConfig, ReplayError};
use graspq_core::world::GoalImage;
use graspq_core::{EpisodeRecord, GraspAction, ReplayBuffer};
use graspq_core::rngutil::rng_from;
use rand::Rng;

const PX: u32 = 8;
const GAMMA: f32 = 0.9;
const PENALTY: f32 = 0.05;

fn goal(id: u32, fill: f32) -> GoalImage {
    GoalImage {
        pixels: vec![fill; 3 * (PX * PX) as usize],
        render_px: PX,
        target_object_id: id,
    }
}

/// Episode with the standard reward shape: -p on every step, and a +1 bonus
/// on the last step when the desired object was grasped.
fn episode(seed: u64, len: usize, grasped: Option<u32>, desired: u32) -> EpisodeRecord {
    let mut rng = rng_from(seed);
    let frame_len = 3 * (PX * PX) as usize;
    let frames: Vec<Vec<u8>> = (0..=len)
        .map(|_| (0..frame_len).map(|_| rng.gen()).collect())
        .collect();
    let scalars: Vec<[f32; 3]> = (0..=len)
        .map(|t| [-1.0, rng.gen_range(0.0..1.0), 1.0 - 2.0 * t as f32 / len as f32])
        .collect();
    let actions: Vec<GraspAction> = (0..len)
        .map(|_| GraspAction::PoseDelta {
            dx: rng.gen_range(-0.1..0.1),
            dy: rng.gen_range(-0.1..0.1),
            dz: rng.gen_range(-0.1..0.1),
            dtheta: rng.gen_range(-0.3..0.3),
        })
        .collect();
    let mut rewards = vec![-PENALTY; len];
    if grasped == Some(desired) {
        rewards[len - 1] = 1.0 - PENALTY;
    }
    EpisodeRecord {
        episode_seed: seed,
        actor_id: 0,
        behavior_policy_version: 1,
        render_px: PX,
        frames,
        scalars,
        actions,
        rewards,
        desired_goal: goal(desired, 0.25),
        achieved_goal: grasped.map(|id| goal(id, 0.75)),
    }
}

/// Forward-sum oracle: return[t] = sum_k gamma^k r[t+k], no recurrences.
fn returns_oracle(rewards: &[f32], gamma: f32) -> Vec<f32> {
    (0..rewards.len())
        .map(|t| {
            let mut acc = 0.0f64;
            for (k, &r) in rewards[t..].iter().enumerate() {
                acc += (gamma as f64).powi(k as i32) * r as f64;
            }
            acc as f32
        })
        .collect()
}

#[test]
fn observed_returns_match_forward_sum_oracle() {
    let mut rng = rng_from(77);
    for _ in 0..100 {
        let len = rng.gen_range(1..=20);
        let rewards: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = observed_returns(&rewards, GAMMA);
        let want = returns_oracle(&rewards, GAMMA);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w}");
        }
        // recurrence identity holds exactly in f32
        for t in 0..len - 1 {
            assert_eq!(got[t], rewards[t] + GAMMA * got[t + 1]);
        }
    }
}

#[test]
fn forced_relabel_matches_oracle_exactly() {
    // grasped object 2, desired was 5: relabeling turns the episode into a
    // success for goal 2
    let ep = episode(1, 12, Some(2), 5);
    let mut oracle_rewards = ep.rewards.clone();
    *oracle_rewards.last_mut().unwrap() += 1.0;
    let oracle_ret = observed_returns(&oracle_rewards, GAMMA);

    let mut buf = ReplayBuffer::new(1000, GAMMA);
    buf.append_episode(ep.clone()).unwrap();
    let her = HerConfig { enabled: true, relabel_prob: 1.0 };
    let mut rng = rng_from(2);
    let batch = buf.sample_batch(256, 4, 1, &her, &mut rng).unwrap();
    assert!(batch.iter().all(|t| t.relabeled));
    for t in &batch {
        assert_eq!(t.desired_goal, *ep.achieved_goal.as_ref().unwrap());
        assert!(t.grasped_object_matches_desired);
        // find which step this is via the stored scalars
        let step = ep
            .scalars
            .iter()
            .position(|s| *s == t.obs.scalars())
            .unwrap();
        assert_eq!(t.reward, oracle_rewards[step], "step {step} reward");
        assert_eq!(t.observed_return, oracle_ret[step], "step {step} return");
        assert_eq!(t.done, step == ep.len() - 1);
        if t.done {
            assert_eq!(t.reward, 1.0 - PENALTY);
        } else {
            assert_eq!(t.reward, -PENALTY);
        }
    }
}

#[test]
fn relabeling_an_already_successful_episode_changes_nothing() {
    let ep = episode(3, 10, Some(4), 4);
    let mut buf = ReplayBuffer::new(1000, GAMMA);
    buf.append_episode(ep.clone()).unwrap();
    let her = HerConfig { enabled: true, relabel_prob: 1.0 };
    let mut rng = rng_from(4);
    let batch = buf.sample_batch(128, 4, 1, &her, &mut rng).unwrap();
    let plain_ret = observed_returns(&ep.rewards, GAMMA);
    for t in &batch {
        let step = ep.scalars.iter().position(|s| *s == t.obs.scalars()).unwrap();
        assert_eq!(t.reward, ep.rewards[step]);
        assert_eq!(t.observed_return, plain_ret[step]);
        assert!(t.grasped_object_matches_desired);
    }
}

#[test]
fn episodes_without_a_grasp_are_never_relabeled() {
    let ep = episode(5, 8, None, 3);
    let mut buf = ReplayBuffer::new(1000, GAMMA);
    buf.append_episode(ep.clone()).unwrap();
    let her = HerConfig { enabled: true, relabel_prob: 1.0 };
    let mut rng = rng_from(6);
    let batch = buf.sample_batch(128, 4, 1, &her, &mut rng).unwrap();
    for t in &batch {
        assert!(!t.relabeled);
        assert_eq!(t.desired_goal, ep.desired_goal);
        assert!(!t.grasped_object_matches_desired);
    }
}

#[test]
fn disabled_her_never_relabels() {
    let ep = episode(7, 8, Some(1), 2);
    let mut buf = ReplayBuffer::new(1000, GAMMA);
    buf.append_episode(ep).unwrap();
    let mut rng = rng_from(8);
    for her in [
        HerConfig { enabled: false, relabel_prob: 1.0 },
        HerConfig { enabled: true, relabel_prob: 0.0 },
    ] {
        let batch = buf.sample_batch(128, 4, 1, &her, &mut rng).unwrap();
        assert!(batch.iter().all(|t| !t.relabeled));
    }
}

#[test]
fn relabel_rate_tracks_the_coin() {
    let mut buf = ReplayBuffer::new(10_000, GAMMA);
    for s in 0..20 {
        buf.append_episode(episode(100 + s, 15, Some(0), 1)).unwrap();
    }
    let her = HerConfig::default();
    assert_eq!(her.relabel_prob, 0.5);
    let mut rng = rng_from(9);
    let n = 4000;
    let batch = buf.sample_batch(n, 4, 1, &her, &mut rng).unwrap();
    let relabeled = batch.iter().filter(|t| t.relabeled).count();
    // binomial(4000, 0.5): 5 sigma is about 158
    let dev = (relabeled as f64 - 0.5 * n as f64).abs();
    assert!(dev < 160.0, "relabeled {relabeled}/{n}");
}

#[test]
fn frame_stack_repeats_the_first_frame() {
    let ep = episode(11, 6, None, 0);
    let plane = 3 * (PX * PX) as usize;
    let n_stack = 4;
    let obs0 = ep.observation(0, n_stack);
    for back in 0..n_stack {
        let chunk = &obs0.frames[back * plane..(back + 1) * plane];
        let want: Vec<f32> = ep.frames[0].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(chunk, &want[..], "history slot {back}");
    }
    // newest first: slot 0 of obs(t) is frame t, slot 1 is frame t-1
    let obs3 = ep.observation(3, n_stack);
    for back in 0..n_stack {
        let chunk = &obs3.frames[back * plane..(back + 1) * plane];
        let want: Vec<f32> = ep.frames[3 - back].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(chunk, &want[..], "history slot {back}");
    }
}

#[test]
fn fifo_eviction_is_whole_episode_and_oldest_first() {
    let mut buf = ReplayBuffer::new(25, GAMMA);
    for s in 0..5 {
        buf.append_episode(episode(200 + s, 10, None, 0)).unwrap();
    }
    // 50 transitions arrived; capacity 25 keeps the newest episodes only
    assert!(buf.len() <= 25);
    assert_eq!(buf.len(), 20);
    assert_eq!(buf.num_episodes(), 2);
    let t = buf.transition(0, 0, 4);
    let expected = episode(203, 10, None, 0);
    assert_eq!(t.obs.scalars(), [expected.scalars[0][0], expected.scalars[0][1], expected.scalars[0][2]]);
}

#[test]
fn oversized_single_episode_is_kept() {
    let mut buf = ReplayBuffer::new(5, GAMMA);
    buf.append_episode(episode(300, 12, None, 0)).unwrap();
    assert_eq!(buf.len(), 12);
    assert_eq!(buf.num_episodes(), 1);
}

#[test]
fn sampling_before_warmup_errors() {
    let mut buf = ReplayBuffer::new(100, GAMMA);
    buf.append_episode(episode(400, 5, None, 0)).unwrap();
    let her = HerConfig::default();
    let mut rng = rng_from(10);
    match buf.sample_batch(4, 4, 50, &her, &mut rng) {
        Err(ReplayError::NotWarm { size, required }) => {
            assert_eq!(size, 5);
            assert_eq!(required, 50);
        }
        other => panic!("expected NotWarm, got {:?}", other.map(|b| b.len())),
    }
}

#[test]
fn sampling_is_uniform_over_transitions() {
    let mut buf = ReplayBuffer::new(1000, GAMMA);
    // uneven episode lengths so flat indexing gets exercised
    for (i, len) in [3usize, 7, 12, 5].iter().enumerate() {
        buf.append_episode(episode(500 + i as u64, *len, None, 0)).unwrap();
    }
    let total = buf.len();
    assert_eq!(total, 27);
    let her = HerConfig { enabled: false, relabel_prob: 0.0 };
    let mut rng = rng_from(11);
    let draws = 27_000usize;
    let mut counts = std::collections::HashMap::<[u32; 2], usize>::new();
    let batch = buf.sample_batch(draws, 1, 1, &her, &mut rng).unwrap();
    for t in &batch {
        // identify the transition by its unique frame content
        let key = [
            (t.obs.frames[0] * 255.0).round() as u32 * 1000 + (t.obs.frames[1] * 255.0).round() as u32,
            (t.next_obs.frames[0] * 255.0).round() as u32,
        ];
        *counts.entry(key).or_default() += 1;
    }
    assert_eq!(counts.len(), total, "every transition must be reachable");
    let mean = draws as f64 / total as f64;
    let sigma = (draws as f64 * (1.0 / total as f64) * (1.0 - 1.0 / total as f64)).sqrt();
    for (k, &c) in &counts {
        let dev = (c as f64 - mean).abs();
        assert!(dev < 5.0 * sigma, "transition {k:?}: count {c}, mean {mean:.1}");
    }
}

#[test]
fn malformed_episodes_are_rejected() {
    let mut ok = episode(600, 5, None, 0);
    ok.frames.pop();
    assert!(ok.validate().is_err());
    let mut buf = ReplayBuffer::new(100, GAMMA);
    assert!(buf.append_episode(ok).is_err());
    let mut bad_rewards = episode(601, 5, None, 0);
    bad_rewards.rewards.pop();
    assert!(bad_rewards.validate().is_err());
    let mut bad_frame = episode(602, 5, None, 0);
    bad_frame.frames[2].pop();
    assert!(bad_frame.validate().is_err());
}
