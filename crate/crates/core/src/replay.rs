//! Per-learner replay buffer. Episodes are stored whole so that hindsight
//! relabeling can recompute rewards and discounted returns; transitions are
//! materialized (frame stack included) at sample time.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::world::{GoalImage, GraspAction, Observation};

/// One completed episode as produced by an actor. `frames[t]` is the
/// egocentric render *before* action `t`; the last frame is the terminal
/// observation. `scalars[t]` is (gripper_closed, gripper_z, time_remaining).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_seed: u64,
    pub actor_id: u32,
    pub behavior_policy_version: u64,
    pub render_px: u32,
    pub frames: Vec<Vec<u8>>,
    pub scalars: Vec<[f32; 3]>,
    pub actions: Vec<GraspAction>,
    pub rewards: Vec<f32>,
    pub desired_goal: GoalImage,
    /// Goal-image rendering of the object actually grasped; present only on
    /// episodes that ended holding an object.
    pub achieved_goal: Option<GoalImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayError {
    MalformedEpisode(&'static str),
    NotWarm { size: usize, required: usize },
}

impl fmt::Display for ReplayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayError::MalformedEpisode(why) => write!(f, "malformed episode: {why}"),
            ReplayError::NotWarm { size, required } => {
                write!(f, "replay not warm: {size} < start size {required}")
            }
        }
    }
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.actions.is_empty() {
            return Err(ReplayError::MalformedEpisode("no transitions"));
        }
        if self.frames.len() != self.actions.len() + 1 || self.scalars.len() != self.frames.len() {
            return Err(ReplayError::MalformedEpisode("frame/scalar count mismatch"));
        }
        if self.rewards.len() != self.actions.len() {
            return Err(ReplayError::MalformedEpisode("reward count mismatch"));
        }
        let px = (self.render_px * self.render_px * 3) as usize;
        if self.frames.iter().any(|f| f.len() != px) {
            return Err(ReplayError::MalformedEpisode("bad frame length"));
        }
        // corrupted floats (NaN or merely huge) blow up target computation
        // much later; reject anything outside the physical ranges here
        let in_range = |v: f32, lo: f32, hi: f32| v >= lo && v <= hi;
        if self.rewards.iter().any(|&r| !in_range(r, -1.0, 1.0)) {
            return Err(ReplayError::MalformedEpisode("reward out of range"));
        }
        if self.scalars.iter().any(|s| {
            !in_range(s[0], -1.0, 1.0) || !in_range(s[1], 0.0, 1.0) || !in_range(s[2], -1.0, 1.0)
        }) {
            return Err(ReplayError::MalformedEpisode("scalar out of range"));
        }
        let goal_ok = |g: &GoalImage| {
            g.render_px == self.render_px
                && g.pixels.len() == px
                && g.pixels.iter().all(|&p| in_range(p, 0.0, 1.0))
        };
        if !goal_ok(&self.desired_goal) || !self.achieved_goal.as_ref().map_or(true, goal_ok) {
            return Err(ReplayError::MalformedEpisode("malformed goal image"));
        }
        if self.actions.iter().any(|a| match *a {
            GraspAction::PoseDelta { dx, dy, dz, dtheta } => {
                !in_range(dx, -1.0, 1.0)
                    || !in_range(dy, -1.0, 1.0)
                    || !in_range(dz, -1.0, 1.0)
                    || !in_range(dtheta, -7.0, 7.0)
            }
            GraspAction::GripperToggle => false,
        }) {
            return Err(ReplayError::MalformedEpisode("action out of range"));
        }
        Ok(())
    }

    /// Observation at step `t`, repeating the first frame to fill history.
    pub fn observation(&self, t: usize, n_stack: usize) -> Observation {
        let px = self.render_px as usize;
        let mut frames = Vec::with_capacity(3 * px * px * n_stack);
        for back in 0..n_stack {
            let idx = t.saturating_sub(back);
            frames.extend(self.frames[idx].iter().map(|&b| b as f32 / 255.0));
        }
        let s = self.scalars[t];
        Observation {
            frames,
            render_px: self.render_px,
            n_stack: n_stack as u32,
            gripper_closed: s[0],
            gripper_z: s[1],
            time_remaining: s[2],
        }
    }
}

/// Discounted cumulative reward from each step to episode end.
pub fn observed_returns(rewards: &[f32], gamma: f32) -> Vec<f32> {
    let mut out = alloc::vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Fully materialized transition, spec form.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: GraspAction,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
    pub desired_goal: GoalImage,
    pub achieved_goal: Option<GoalImage>,
    pub observed_return: f32,
    pub grasped_object_matches_desired: bool,
}

/// A sampled transition, possibly with its goal replaced in hindsight.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledTransition {
    pub obs: Observation,
    pub action: GraspAction,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
    pub desired_goal: GoalImage,
    pub observed_return: f32,
    pub grasped_object_matches_desired: bool,
    pub relabeled: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct HerConfig {
    pub enabled: bool,
    pub relabel_prob: f32,
}

impl Default for HerConfig {
    fn default() -> Self {
        HerConfig {
            enabled: true,
            relabel_prob: 0.5,
        }
    }
}

struct StoredEpisode {
    ep: EpisodeRecord,
    returns: Vec<f32>,
}

/// FIFO ring of whole episodes; capacity counts transitions.
pub struct ReplayBuffer {
    capacity: usize,
    gamma: f32,
    episodes: VecDeque<StoredEpisode>,
    prefix: Vec<usize>,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, gamma: f32) -> Self {
        ReplayBuffer {
            capacity,
            gamma,
            episodes: VecDeque::new(),
            prefix: Vec::new(),
            size: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert a whole episode, computing observed returns, evicting FIFO
    /// past capacity.
    pub fn append_episode(&mut self, ep: EpisodeRecord) -> Result<(), ReplayError> {
        ep.validate()?;
        let returns = observed_returns(&ep.rewards, self.gamma);
        self.size += ep.len();
        self.episodes.push_back(StoredEpisode { ep, returns });
        while self.size > self.capacity {
            if self.episodes.len() == 1 {
                break; // never evict the only episode
            }
            let front = self.episodes.pop_front().expect("nonempty");
            self.size -= front.ep.len();
        }
        self.prefix.clear();
        let mut acc = 0;
        for e in &self.episodes {
            acc += e.ep.len();
            self.prefix.push(acc);
        }
        Ok(())
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let ep_idx = self.prefix.partition_point(|&p| p <= flat);
        let base = if ep_idx == 0 { 0 } else { self.prefix[ep_idx - 1] };
        (ep_idx, flat - base)
    }

    /// Uniform sampling with replacement. Per sampled transition, with
    /// probability `relabel_prob` the desired goal is replaced by the
    /// episode's achieved goal and rewards/returns are recomputed; episodes
    /// that grasped nothing are left unchanged.
    pub fn sample_batch<R: Rng>(
        &self,
        batch_size: usize,
        n_stack: usize,
        min_size: usize,
        her: &HerConfig,
        rng: &mut R,
    ) -> Result<Vec<RelabeledTransition>, ReplayError> {
        if self.size < min_size || self.size == 0 {
            return Err(ReplayError::NotWarm {
                size: self.size,
                required: min_size,
            });
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let flat = rng.gen_range(0..self.size);
            let (ep_idx, t) = self.locate(flat);
            let stored = &self.episodes[ep_idx];
            let relabel =
                her.enabled && stored.ep.achieved_goal.is_some() && rng.gen::<f32>() < her.relabel_prob;
            out.push(materialize(stored, self.gamma, t, n_stack, relabel));
        }
        Ok(out)
    }

    /// Materialize a specific transition; used by tests and oracles.
    pub fn transition(&self, ep_idx: usize, t: usize, n_stack: usize) -> Transition {
        let stored = &self.episodes[ep_idx];
        let r = materialize(stored, self.gamma, t, n_stack, false);
        Transition {
            obs: r.obs,
            action: r.action,
            reward: r.reward,
            next_obs: r.next_obs,
            done: r.done,
            desired_goal: r.desired_goal,
            achieved_goal: stored.ep.achieved_goal.clone(),
            observed_return: r.observed_return,
            grasped_object_matches_desired: r.grasped_object_matches_desired,
        }
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }
}

/// Rewards of an episode after replacing the desired goal with the achieved
/// one: non-terminal rewards are unchanged (they do not depend on the goal),
/// the terminal reward becomes a success unless it already was one.
pub fn relabeled_rewards(ep: &EpisodeRecord) -> Vec<f32> {
    let mut rewards = ep.rewards.clone();
    let matches = goal_matches(ep);
    if let Some(last) = rewards.last_mut() {
        if !matches {
            *last += 1.0;
        }
    }
    rewards
}

fn goal_matches(ep: &EpisodeRecord) -> bool {
    match &ep.achieved_goal {
        Some(a) => a.target_object_id == ep.desired_goal.target_object_id,
        None => false,
    }
}

fn materialize(
    stored: &StoredEpisode,
    gamma: f32,
    t: usize,
    n_stack: usize,
    relabel: bool,
) -> RelabeledTransition {
    let ep = &stored.ep;
    let done = t == ep.len() - 1;
    let matches = goal_matches(ep);
    let (goal, reward, observed_return, matches_out) = if relabel {
        let achieved = ep.achieved_goal.clone().expect("relabel requires achieved goal");
        let rewards = relabeled_rewards(ep);
        let returns = observed_returns(&rewards, gamma);
        (achieved, rewards[t], returns[t], true)
    } else {
        (ep.desired_goal.clone(), ep.rewards[t], stored.returns[t], matches)
    };
    RelabeledTransition {
        obs: ep.observation(t, n_stack),
        action: ep.actions[t],
        reward,
        next_obs: ep.observation(t + 1, n_stack),
        done,
        desired_goal: goal,
        observed_return,
        grasped_object_matches_desired: matches_out,
        relabeled: relabel,
    }
}
