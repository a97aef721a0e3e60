//! Actor process: rolls out ε-greedy episodes on its own world instances,
//! refreshes the model through the controller cache, and ships finished
//! episodes via SetExperience. Fully stateless across episodes apart from
//! the cached model.

use std::io::BufReader;
use std::net::TcpStream;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, Result};
use rand::Rng;

use graspq_core::cem::{
    act_epsilon_greedy, cem_maximize, random_action, ActionBounds, CemConfig, EpsilonSchedule,
};
use graspq_core::qnet::encode_action;
use graspq_core::rngutil::{mix2, rng_from};
use graspq_core::train::scalars_of;
use graspq_core::world::{scripted_grasp_action, GoalImage, Observation, Split, World};
use graspq_core::{EpisodeRecord, GraspAction, Network};

use crate::config::ExperimentConfig;
use crate::learner::{episode_seed, stop_path};
use crate::wire::{
    decode_ack, decode_model_reply, encode_hello, read_frame, serialize_episode, write_frame,
    GET_MODEL, HELLO, MODEL_REPLY, ROLE_ACTOR, SET_EXPERIENCE, ACK,
};

pub struct ActorOpts {
    pub actor_id: u32,
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
}

/// ε-greedy action on the current observation; the trunk is evaluated once
/// and shared across all CEM candidates.
pub fn policy_action<R: Rng>(
    net: &Network<f32>,
    obs: &Observation,
    goal: Option<&GoalImage>,
    bounds: &ActionBounds,
    cem: &CemConfig,
    schedule: &EpsilonSchedule,
    global_step: u64,
    rng: &mut R,
) -> Result<GraspAction> {
    let img = graspq_core::qnet::assemble_image::<f32>(&net.spec, obs, goal)
        .map_err(|e| anyhow!("{e}"))?;
    let trunk = net.trunk(&img, scalars_of(obs));
    Ok(act_epsilon_greedy(
        |a| net.q_from_trunk(&trunk, encode_action(a, bounds.delta_max, bounds.rot_max)),
        bounds,
        cem,
        schedule,
        global_step,
        rng,
    ))
}

/// Greedy (ε = 0) action used by evaluation.
pub fn greedy_action<R: Rng>(
    net: &Network<f32>,
    obs: &Observation,
    goal: Option<&GoalImage>,
    bounds: &ActionBounds,
    cem: &CemConfig,
    rng: &mut R,
) -> Result<GraspAction> {
    let img = graspq_core::qnet::assemble_image::<f32>(&net.spec, obs, goal)
        .map_err(|e| anyhow!("{e}"))?;
    let trunk = net.trunk(&img, scalars_of(obs));
    Ok(cem_maximize(
        |a| net.q_from_trunk(&trunk, encode_action(a, bounds.delta_max, bounds.rot_max)),
        bounds,
        cem,
        rng,
    )
    .0)
}

/// Behavior policy for one whole episode. Scripted episodes are the success
/// source for off-policy bootstrap; isolated scripted actions inside an
/// otherwise random episode almost never complete a grasp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Scripted,
    EpsGreedy,
}

/// Roll out one full episode and package it for replay.
#[allow(clippy::too_many_arguments)]
pub fn rollout_episode<R: Rng>(
    cfg: &ExperimentConfig,
    net: &Network<f32>,
    policy_version: u64,
    actor_id: u32,
    seed: u64,
    split: Split,
    schedule: &EpsilonSchedule,
    global_step: u64,
    mode: RolloutMode,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let wcfg = cfg.world_config(cfg.min_objects, cfg.max_objects);
    let (mut world, mut obs, goal) = World::reset(wcfg, seed, split).map_err(|e| anyhow!("{e}"))?;
    let goal_opt = cfg.targeted().then_some(&goal);
    let bounds = cfg.bounds();
    let cem = cfg.cem_config();
    let mut frames = vec![world.render_egocentric()];
    let mut scalars = vec![obs.scalars()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    while !world.is_done() {
        let a = match mode {
            // scripted with light per-action noise for state coverage
            RolloutMode::Scripted => {
                if rng.gen::<f32>() < 0.1 {
                    random_action(rng, cem.toggle_prior, &bounds)
                } else {
                    scripted_grasp_action(&world)
                }
            }
            RolloutMode::EpsGreedy => {
                if rng.gen::<f32>() < schedule.epsilon(global_step) {
                    random_action(rng, cem.toggle_prior, &bounds)
                } else {
                    greedy_action(net, &obs, goal_opt, &bounds, &cem, rng)?
                }
            }
        };
        let r = world.step(a).map_err(|e| anyhow!("{e}"))?;
        obs = r.obs;
        frames.push(world.render_egocentric());
        scalars.push(obs.scalars());
        actions.push(a);
        rewards.push(r.reward);
    }
    Ok(EpisodeRecord {
        episode_seed: seed,
        actor_id,
        behavior_policy_version: policy_version,
        render_px: cfg.render_px,
        frames,
        scalars,
        actions,
        rewards,
        desired_goal: goal,
        achieved_goal: world.achieved_goal(),
    })
}

struct ControllerLink {
    addr: String,
    stream: Option<(BufReader<TcpStream>, TcpStream)>,
}

impl ControllerLink {
    fn new(addr: String) -> Self {
        ControllerLink { addr, stream: None }
    }

    fn ensure(&mut self) -> Result<&mut (BufReader<TcpStream>, TcpStream)> {
        if self.stream.is_none() {
            let s = TcpStream::connect(&self.addr)?;
            s.set_nodelay(true)?;
            s.set_read_timeout(Some(Duration::from_secs(60)))?;
            let writer = s.try_clone()?;
            self.stream = Some((BufReader::new(s), writer));
        }
        Ok(self.stream.as_mut().unwrap())
    }

    fn rpc(&mut self, msg_type: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
        let attempt = |link: &mut Self| -> Result<(u8, Vec<u8>)> {
            let (reader, writer) = link.ensure()?;
            write_frame(writer, msg_type, payload)?;
            Ok(read_frame(reader)?)
        };
        match attempt(self) {
            Ok(r) => Ok(r),
            Err(e) => {
                // one reconnect per call; persistent failures back off upstream
                self.stream = None;
                attempt(self).map_err(|_| e)
            }
        }
    }
}

pub fn run_actor(opts: ActorOpts) -> Result<()> {
    let cfg = &opts.cfg;
    let stop = stop_path(&opts.run_dir);
    let spec = cfg.network_spec();
    let schedule = cfg.epsilon_schedule();
    let mut link = ControllerLink::new(cfg.controller_addr());
    let mut rng = rng_from(mix2(cfg.seed, 0xc7a0 + opts.actor_id as u64));
    let mut net: Option<Network<f32>> = None;
    let mut version: u64 = 0;
    let mut global_step: u64 = 0;
    let mut episodes: u64 = 0;
    let mut backoff = Duration::from_millis(100);

    // Collection allowance at a given model version. Keeps the global env
    // step counter tethered to learner optimizer progress so actors cannot
    // burn the step budget while the learners are still catching up. The
    // slack term leaves room for warmup and for episodes already in flight.
    let allowance = |version: u64| -> u64 {
        cfg.num_learners as u64 * (cfg.replay_start as u64 + cfg.transitions_per_step * version)
            + 40 * cfg.num_actors as u64
    };

    while !stop.exists() {
        if net.is_none() || episodes % cfg.model_refresh_episodes == 0 {
            match link.rpc(GET_MODEL, &[]) {
                Ok((MODEL_REPLY, payload)) => {
                    if let Ok((_, pv)) = decode_model_reply(&payload) {
                        match Network::from_params(spec.clone(), &pv) {
                            Ok(n) => {
                                net = Some(n);
                                version = pv.version;
                                backoff = Duration::from_millis(100);
                            }
                            Err(e) => return Err(anyhow!("model layout: {e}")),
                        }
                    }
                }
                _ => {
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(5));
                    continue;
                }
            }
        }
        if net.is_none() {
            continue;
        }

        // Throttle: wait for the learners when collection runs ahead.
        while !stop.exists() && global_step > allowance(version) {
            std::thread::sleep(Duration::from_millis(200));
            if let Ok((MODEL_REPLY, payload)) = link.rpc(GET_MODEL, &[]) {
                if let Ok((_, pv)) = decode_model_reply(&payload) {
                    if let Ok(n) = Network::from_params(spec.clone(), &pv) {
                        net = Some(n);
                        version = pv.version;
                    }
                }
            }
            if let Ok((ACK, reply)) = link.rpc(HELLO, &encode_hello(ROLE_ACTOR, opts.actor_id)) {
                if let Ok(ack) = decode_ack(&reply) {
                    global_step = ack.global_env_steps;
                }
            }
        }
        if stop.exists() {
            break;
        }
        let Some(ref model) = net else { continue };

        let seed = episode_seed(cfg.seed, opts.actor_id, episodes);
        episodes += 1;
        // the scripted share of collection shrinks with ε, so late data is
        // dominated by the policy being evaluated
        let mode = if rng.gen::<f32>() < cfg.scripted_frac * schedule.epsilon(global_step) {
            RolloutMode::Scripted
        } else {
            RolloutMode::EpsGreedy
        };
        let ep = rollout_episode(
            cfg,
            model,
            version,
            opts.actor_id,
            seed,
            Split::Train,
            &schedule,
            global_step,
            mode,
            &mut rng,
        )?;
        let payload = serialize_episode(&ep).map_err(|e| anyhow!("{e}"))?;
        loop {
            match link.rpc(SET_EXPERIENCE, &payload) {
                Ok((ACK, reply)) => {
                    if let Ok(ack) = decode_ack(&reply) {
                        if ack.ok {
                            global_step = ack.global_env_steps;
                            backoff = Duration::from_millis(100);
                            break;
                        }
                    }
                    // rejected: drop the episode rather than wedge the actor
                    break;
                }
                _ => {
                    if stop.exists() {
                        break;
                    }
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(5));
                }
            }
        }
    }
    Ok(())
}
