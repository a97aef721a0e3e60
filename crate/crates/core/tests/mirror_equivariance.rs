//! Bit-exact reflection symmetry of the environment.
//!
//! Stepping the mirrored world with the mirrored action must equal mirroring
//! the stepped world, with byte-identical renders and bitwise-equal floats.

use graspq_core::world::hflip_chw;
use graspq_core::{Split, World, WorldConfig};
use graspq_core::cem::{random_action, ActionBounds};
use graspq_core::rngutil::rng_from;
use rand::Rng;

fn assert_worlds_equal(a: &World, b: &World, ctx: &str) {
    assert_eq!(a.gripper, b.gripper, "{ctx}: gripper");
    assert_eq!(a.objects.len(), b.objects.len(), "{ctx}: object count");
    for (x, y) in a.objects.iter().zip(b.objects.iter()) {
        assert_eq!(x, y, "{ctx}: object {}", x.object_id);
    }
    assert_eq!(a.is_done(), b.is_done(), "{ctx}: done");
    assert_eq!(a.terminal_kind(), b.terminal_kind(), "{ctx}: terminal");
    assert_eq!(a.target_id, b.target_id, "{ctx}: target");
}

fn default_bounds(cfg: &WorldConfig) -> ActionBounds {
    ActionBounds {
        delta_max: cfg.delta_max,
        rot_max: cfg.rot_max,
    }
}

#[test]
fn step_commutes_with_mirror_for_1000_pairs() {
    let cfg = WorldConfig::default();
    let bounds = default_bounds(&cfg);
    let mut rng = rng_from(0x3141);
    let mut checked = 0u32;
    let mut seed = 0u64;
    while checked < 1000 {
        seed += 1;
        let (mut w, _, _) = World::reset(cfg.clone(), seed, Split::Train).unwrap();
        let mut wm = w.mirror_world();
        // random prefix so mid-episode states get covered too
        let prefix = rng.gen_range(0..6);
        let mut alive = true;
        for _ in 0..prefix {
            let a = random_action(&mut rng, 0.3, &bounds);
            let r1 = w.step(a);
            let r2 = wm.step(a.mirrored());
            assert_eq!(r1.is_ok(), r2.is_ok());
            if r1.is_err() || r1.as_ref().unwrap().done {
                alive = false;
                break;
            }
        }
        if !alive {
            continue;
        }
        let a = random_action(&mut rng, 0.3, &bounds);
        let r = w.step(a).unwrap();
        let rm = wm.step(a.mirrored()).unwrap();
        assert_eq!(r.reward, rm.reward, "seed {seed}: reward");
        assert_eq!(r.done, rm.done, "seed {seed}: done");
        assert_eq!(r.info.grasped, rm.info.grasped, "seed {seed}: grasped");
        assert_eq!(r.info.released, rm.info.released, "seed {seed}: released");
        assert_eq!(r.info.pushed, rm.info.pushed, "seed {seed}: pushed");
        assert_worlds_equal(&w.mirror_world(), &wm, &format!("seed {seed}"));
        // observation of the mirrored world is the horizontal flip
        assert_eq!(r.obs.mirrored(), rm.obs, "seed {seed}: observation");
        checked += 1;
    }
}

#[test]
fn mirror_is_an_involution() {
    let cfg = WorldConfig::default();
    let bounds = default_bounds(&cfg);
    let mut rng = rng_from(0x2718);
    for seed in 1..=50u64 {
        let (mut w, _, _) = World::reset(cfg.clone(), seed, Split::Train).unwrap();
        for _ in 0..rng.gen_range(0..4) {
            let a = random_action(&mut rng, 0.3, &bounds);
            if w.step(a).map(|r| r.done).unwrap_or(true) {
                break;
            }
        }
        let back = w.mirror_world().mirror_world();
        assert_worlds_equal(&w, &back, &format!("seed {seed}"));
        assert_eq!(w.observation(), back.observation(), "seed {seed}: observation");
        assert_eq!(w.goal(), back.goal(), "seed {seed}: goal");
    }
}

#[test]
fn mirrored_world_renders_the_flipped_frame() {
    let cfg = WorldConfig::default();
    let bounds = default_bounds(&cfg);
    let mut rng = rng_from(0x1618);
    for seed in 1..=100u64 {
        let (mut w, _, _) = World::reset(cfg.clone(), seed, Split::Train).unwrap();
        for _ in 0..rng.gen_range(0..5) {
            let a = random_action(&mut rng, 0.3, &bounds);
            if w.step(a).map(|r| r.done).unwrap_or(true) {
                break;
            }
        }
        let frame = w.render_egocentric();
        let frame_m = w.mirror_world().render_egocentric();
        let px = cfg.render_px as usize;
        let mut want: Vec<f32> = frame.iter().map(|&b| b as f32).collect();
        hflip_chw(&mut want, px);
        let got: Vec<f32> = frame_m.iter().map(|&b| b as f32).collect();
        assert_eq!(want, got, "seed {seed}: render");
    }
}

#[test]
fn goal_and_achieved_goal_mirror_consistently() {
    let cfg = WorldConfig::default();
    for seed in 1..=50u64 {
        let (w, _, goal) = World::reset(cfg.clone(), seed, Split::Train).unwrap();
        let wm = w.mirror_world();
        assert_eq!(goal.mirrored(), *wm.goal(), "seed {seed}: goal pixels");
        assert_eq!(goal.target_object_id, wm.goal().target_object_id);
    }
}

#[test]
fn observation_and_action_mirrors_are_involutions() {
    let cfg = WorldConfig::default();
    let bounds = default_bounds(&cfg);
    let mut rng = rng_from(0x1414);
    for seed in 1..=20u64 {
        let (w, obs, goal) = World::reset(cfg.clone(), seed, Split::Train).unwrap();
        assert_eq!(obs.mirrored().mirrored(), obs);
        assert_eq!(goal.mirrored().mirrored(), goal);
        drop(w);
        let a = random_action(&mut rng, 0.3, &bounds);
        assert_eq!(a.mirrored().mirrored(), a);
    }
}
