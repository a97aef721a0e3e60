//! Synchronous-SGD equivalence and throughput tooling: a recorded sample
//! stream format, a distributed runner that trains on the stream with mean
//! All-Reduce, a single-process oracle for comparison, and a benchmark mode
//! that measures optimizer steps per second for a given group size.

use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Result};
use rand::Rng;

use graspq_core::cem::{ActionBounds, CemConfig};
use graspq_core::replay::RelabeledTransition;
use graspq_core::rngutil::{mix2, rng_from};
use graspq_core::train::{adam_update, compute_targets, loss_and_grad, AdamState, LearnerConfig};
use graspq_core::world::{GoalImage, GraspAction, Observation};
use graspq_core::{Network, NetworkSpec};

use crate::allreduce::{AllReduceMember, AllReduceRoot};
use crate::wire::{put_f32s, Rd, WireError};

pub const STREAM_MAGIC: [u8; 16] = *b"graspq-strm\0v1\0\0";

/// One recorded training example: inputs plus the precomputed target.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub obs: Observation,
    pub action: GraspAction,
    pub target: f32,
}

pub struct Stream {
    pub px: u32,
    pub steps: usize,
    pub batch: usize,
    pub samples: Vec<Vec<StreamSample>>,
}

fn bounds() -> ActionBounds {
    ActionBounds {
        delta_max: 0.1,
        rot_max: core::f32::consts::FRAC_PI_8,
    }
}

fn random_obs<R: Rng>(rng: &mut R, px: u32) -> Observation {
    Observation {
        frames: (0..3 * px * px).map(|_| rng.gen_range(0.0..1.0)).collect(),
        render_px: px,
        n_stack: 1,
        gripper_closed: if rng.gen::<bool>() { 1.0 } else { -1.0 },
        gripper_z: rng.gen_range(0.0..1.0),
        time_remaining: rng.gen_range(-1.0..1.0),
    }
}

fn random_action<R: Rng>(rng: &mut R) -> GraspAction {
    if rng.gen::<f32>() < 0.1 {
        GraspAction::GripperToggle
    } else {
        GraspAction::PoseDelta {
            dx: rng.gen_range(-0.1..0.1),
            dy: rng.gen_range(-0.1..0.1),
            dz: rng.gen_range(-0.1..0.1),
            dtheta: rng.gen_range(-0.39..0.39),
        }
    }
}

fn dummy_goal(px: u32) -> GoalImage {
    GoalImage {
        pixels: vec![0.0; 3 * (px * px) as usize],
        render_px: px,
        target_object_id: 0,
    }
}

fn as_transition(s: &StreamSample, px: u32) -> RelabeledTransition {
    RelabeledTransition {
        obs: s.obs.clone(),
        action: s.action,
        reward: 0.0,
        next_obs: s.obs.clone(),
        done: true,
        desired_goal: dummy_goal(px),
        observed_return: 0.0,
        grasped_object_matches_desired: false,
        relabeled: false,
    }
}

/// Record a stream: random transitions with Bellman-style targets computed
/// once from the freshly initialized network, so every consumer sees the
/// identical bytes.
pub fn generate_stream(seed: u64, steps: usize, batch: usize, px: u32) -> Stream {
    let spec = NetworkSpec::new(px as usize, 1, false);
    let target_net: Network<f32> = Network::init(spec, mix2(seed, 0xbee5));
    let cem = CemConfig::default();
    let lcfg = LearnerConfig {
        lowerbound_enabled: false,
        frame_stack_n: 1,
        ..LearnerConfig::default()
    };
    let mut rng = rng_from(mix2(seed, 0x57ea));
    let mut samples = Vec::with_capacity(steps);
    for step in 0..steps {
        let raw: Vec<(Observation, GraspAction, f32)> = (0..batch)
            .map(|_| {
                (
                    random_obs(&mut rng, px),
                    random_action(&mut rng),
                    rng.gen_range(-0.2..1.0),
                )
            })
            .collect();
        let transitions: Vec<RelabeledTransition> = raw
            .iter()
            .map(|(o, a, r)| {
                let mut t = as_transition(
                    &StreamSample {
                        obs: o.clone(),
                        action: *a,
                        target: 0.0,
                    },
                    px,
                );
                t.reward = *r;
                t.done = false;
                t
            })
            .collect();
        let mut trng = rng_from(mix2(seed, 0x7a6 + step as u64));
        let targets =
            compute_targets(&target_net, &transitions, &cem, &bounds(), &lcfg, &mut trng).unwrap();
        samples.push(
            raw.into_iter()
                .zip(targets)
                .map(|((obs, action, _), target)| StreamSample {
                    obs,
                    action,
                    target,
                })
                .collect(),
        );
    }
    Stream {
        px,
        steps,
        batch,
        samples,
    }
}

pub fn encode_stream(s: &Stream) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&STREAM_MAGIC);
    out.extend_from_slice(&s.px.to_le_bytes());
    out.extend_from_slice(&(s.steps as u32).to_le_bytes());
    out.extend_from_slice(&(s.batch as u32).to_le_bytes());
    for step in &s.samples {
        for sample in step {
            put_f32s(&mut out, &sample.obs.frames);
            put_f32s(
                &mut out,
                &[
                    sample.obs.gripper_closed,
                    sample.obs.gripper_z,
                    sample.obs.time_remaining,
                ],
            );
            match sample.action {
                GraspAction::PoseDelta { dx, dy, dz, dtheta } => {
                    out.push(0);
                    put_f32s(&mut out, &[dx, dy, dz, dtheta]);
                }
                GraspAction::GripperToggle => {
                    out.push(1);
                    put_f32s(&mut out, &[0.0; 4]);
                }
            }
            out.extend_from_slice(&sample.target.to_le_bytes());
        }
    }
    out
}

pub fn decode_stream(bytes: &[u8]) -> Result<Stream, WireError> {
    let mut rd = Rd::new(bytes);
    if rd.bytes(16)? != STREAM_MAGIC {
        return Err(WireError::Malformed("bad stream magic"));
    }
    let px = rd.u32()?;
    let steps = rd.u32()? as usize;
    let batch = rd.u32()? as usize;
    if px == 0 || px > 64 || steps > 100_000 || batch > 4096 {
        return Err(WireError::Malformed("implausible stream shape"));
    }
    let mut samples = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut step = Vec::with_capacity(batch);
        for _ in 0..batch {
            let frames = rd.f32s(3 * (px * px) as usize)?;
            let s = rd.f32s(3)?;
            let kind = rd.u8()?;
            let d = rd.f32s(4)?;
            let action = match kind {
                0 => GraspAction::PoseDelta {
                    dx: d[0],
                    dy: d[1],
                    dz: d[2],
                    dtheta: d[3],
                },
                1 => GraspAction::GripperToggle,
                _ => return Err(WireError::Malformed("bad action kind")),
            };
            let target = rd.f32()?;
            step.push(StreamSample {
                obs: Observation {
                    frames,
                    render_px: px,
                    n_stack: 1,
                    gripper_closed: s[0],
                    gripper_z: s[1],
                    time_remaining: s[2],
                },
                action,
                target,
            });
        }
        samples.push(step);
    }
    rd.finish()?;
    Ok(Stream {
        px,
        steps,
        batch,
        samples,
    })
}

fn step_update(net: &Network<f32>, slice: &[StreamSample], px: u32) -> Result<Vec<f32>> {
    let batch: Vec<RelabeledTransition> = slice.iter().map(|s| as_transition(s, px)).collect();
    let targets: Vec<f32> = slice.iter().map(|s| s.target).collect();
    let (_, grad) =
        loss_and_grad(net, &batch, &targets, &bounds()).map_err(|e| anyhow!("{e}"))?;
    Ok(grad)
}

fn apply(net: &mut Network<f32>, adam: &mut AdamState<f32>, mean: &[f32], alpha: f64, eps: f64) -> Result<()> {
    adam_update(&mut net.params, mean, adam, alpha, 0.9, 0.999, eps)
        .map_err(|e| anyhow!("adam: {e:?}"))?;
    Ok(())
}

/// Single-process oracle: full-batch training on the recorded stream.
pub fn run_oracle(stream: &Stream, seed: u64, alpha: f64) -> Result<Vec<f32>> {
    let spec = NetworkSpec::new(stream.px as usize, 1, false);
    let mut net: Network<f32> = Network::init(spec, mix2(seed, 0xbee5));
    let mut adam = AdamState::new(net.params.len());
    let eps = 1e-2 / stream.batch as f64;
    for step in &stream.samples {
        let grad = step_update(&net, step, stream.px)?;
        apply(&mut net, &mut adam, &grad, alpha, eps)?;
    }
    Ok(net.params)
}

/// One rank of the distributed run: trains on its `batch / k` slice of every
/// recorded step, reducing gradients through the TCP hub. Returns the final
/// parameters (identical on every rank by construction).
pub fn run_distributed_rank(
    stream: &Stream,
    rank: u32,
    k: usize,
    port: u16,
    seed: u64,
    alpha: f64,
) -> Result<Vec<f32>> {
    if stream.batch % k != 0 {
        bail!("batch {} not divisible by k {}", stream.batch, k);
    }
    let local = stream.batch / k;
    let spec = NetworkSpec::new(stream.px as usize, 1, false);
    let mut net: Network<f32> = Network::init(spec.clone(), mix2(seed, 0xbee5));
    let mut adam = AdamState::new(net.params.len());
    // the effective batch is the full recorded batch, so ε matches the oracle
    let eps = 1e-2 / stream.batch as f64;

    enum G {
        Root(AllReduceRoot),
        Member(AllReduceMember),
    }
    let mut group = if rank == 0 {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        G::Root(AllReduceRoot::accept(&listener, k)?)
    } else {
        let addr = format!("127.0.0.1:{port}");
        let mut m = loop {
            match AllReduceMember::connect(&addr, rank) {
                Ok(m) => break m,
                Err(_) => std::thread::sleep(Duration::from_millis(100)),
            }
        };
        let pv = m.recv_params()?;
        net = Network::from_params(spec, &pv).map_err(|e| anyhow!("{e}"))?;
        G::Member(m)
    };
    if let G::Root(root) = &mut group {
        root.broadcast_params(&net.to_params(0))?;
    }

    for (i, step) in stream.samples.iter().enumerate() {
        let slice = &step[rank as usize * local..(rank as usize + 1) * local];
        let grad = step_update(&net, slice, stream.px)?;
        let mean = match &mut group {
            G::Root(root) => {
                // announce the step before collecting; members block on it
                root.reduce(i as u64, &grad)?
            }
            G::Member(m) => {
                let (s, stop) = m.await_step()?;
                if stop || s != i as u64 {
                    bail!("unexpected step announcement {s}");
                }
                m.submit(s, &grad)?
            }
        };
        apply(&mut net, &mut adam, &mean, alpha, eps)?;
    }
    if let G::Root(root) = &mut group {
        root.broadcast_stop(stream.steps as u64)?;
    } else if let G::Member(m) = &mut group {
        let (_, stop) = m.await_step()?;
        if !stop {
            bail!("expected stop after final step");
        }
    }
    Ok(net.params)
}

pub fn save_params(path: &Path, params: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + params.len() * 4);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    put_f32s(&mut out, params);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    let mut rd = Rd::new(&bytes);
    let n = rd.u32()? as usize;
    let v = rd.f32s(n)?;
    rd.finish().map_err(|e| anyhow!("{e}"))?;
    Ok(v)
}

/// Throughput benchmark: synthetic batches, real gradients, real All-Reduce.
/// Rank 0 returns the number of optimizer steps completed in the window.
pub fn run_bench_rank(rank: u32, k: usize, port: u16, secs: u64, px: u32, local_batch: usize) -> Result<u64> {
    let stream = generate_stream(0x9e7c4, 4, local_batch * k, px);
    let mut steps = 0u64;
    let spec = NetworkSpec::new(px as usize, 1, false);
    let mut net: Network<f32> = Network::init(spec, mix2(0x9e7c4, 0xbee5));
    let mut adam = AdamState::new(net.params.len());
    let eps = 1e-2 / (local_batch * k) as f64;
    let alpha = 1e-4;

    if rank == 0 {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let mut root = AllReduceRoot::accept(&listener, k)?;
        root.broadcast_params(&net.to_params(0))?;
        let start = Instant::now();
        while start.elapsed().as_secs() < secs {
            let step = &stream.samples[(steps % 4) as usize];
            let grad = step_update(&net, &step[..local_batch], px)?;
            let mean = root.reduce(steps, &grad)?;
            apply(&mut net, &mut adam, &mean, alpha, eps)?;
            steps += 1;
        }
        root.broadcast_stop(steps)?;
    } else {
        let addr = format!("127.0.0.1:{port}");
        let mut m = loop {
            match AllReduceMember::connect(&addr, rank) {
                Ok(m) => break m,
                Err(_) => std::thread::sleep(Duration::from_millis(100)),
            }
        };
        let _ = m.recv_params()?;
        let lo = rank as usize * local_batch;
        loop {
            let (s, stop) = m.await_step()?;
            if stop {
                break;
            }
            let step = &stream.samples[(s % 4) as usize];
            let grad = step_update(&net, &step[lo..lo + local_batch], px)?;
            let mean = m.submit(s, &grad)?;
            apply(&mut net, &mut adam, &mean, alpha, eps)?;
            steps += 1;
        }
    }
    Ok(steps)
}
