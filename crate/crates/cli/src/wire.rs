//! Length-prefixed binary framing and the payload codecs shared by actors,
//! controllers, and learners, plus the checkpoint and episode-replay file
//! formats.
//!
//! Frame layout: u32 payload length (little-endian), u8 message type,
//! payload. A malformed frame or payload is rejected with an error; it must
//! never panic, whatever the bytes.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use graspq_core::world::{GoalImage, GraspAction, Split, WorldConfig};
use graspq_core::{EpisodeRecord, NetworkSpec, ParamVector};

pub const HELLO: u8 = 0;
pub const GET_MODEL: u8 = 1;
pub const MODEL_REPLY: u8 = 2;
pub const SET_EXPERIENCE: u8 = 3;
pub const ACK: u8 = 4;
pub const STATS: u8 = 5;

/// Upper bound on a frame payload; anything larger is a protocol error.
pub const MAX_PAYLOAD: u32 = 64 << 20;

/// Episodes and goal images larger than these are rejected before any
/// allocation is sized from attacker-controlled lengths.
pub const MAX_TRANSITIONS: usize = 4096;
pub const MAX_RENDER_PX: u32 = 256;

#[derive(Debug)]
pub enum WireError {
    Io(std::io::Error),
    TooLarge(u32),
    Truncated,
    TrailingBytes(usize),
    Malformed(&'static str),
    UnknownType(u8),
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::Io(e) => write!(f, "io: {e}"),
            WireError::TooLarge(n) => write!(f, "frame payload {n} exceeds limit"),
            WireError::Truncated => write!(f, "payload truncated"),
            WireError::TrailingBytes(n) => write!(f, "{n} trailing bytes after payload"),
            WireError::Malformed(why) => write!(f, "malformed payload: {why}"),
            WireError::UnknownType(t) => write!(f, "unknown message type {t}"),
        }
    }
}

impl std::error::Error for WireError {}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e)
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg_type: u8, payload: &[u8]) -> Result<(), WireError> {
    let len = u32::try_from(payload.len()).map_err(|_| WireError::TooLarge(u32::MAX))?;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[msg_type])?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read one frame. The type byte is returned raw; callers decide which types
/// they accept. An oversized length declaration is unrecoverable (the stream
/// position is lost), so the connection should be dropped on error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(u8, Vec<u8>), WireError> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((head[4], payload))
}

/// Bounds-checked little-endian reader over a payload slice.
pub struct Rd<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    pub fn new(b: &'a [u8]) -> Self {
        Rd { b, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        if end > self.b.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, WireError> {
        let raw = self.bytes(n.checked_mul(4).ok_or(WireError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<(), WireError> {
        let left = self.b.len() - self.pos;
        if left != 0 {
            return Err(WireError::TrailingBytes(left));
        }
        Ok(())
    }
}

pub fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// HELLO: role tag and peer id.

pub const ROLE_ACTOR: u8 = 0;
pub const ROLE_LEARNER: u8 = 1;
pub const ROLE_HARNESS: u8 = 2;

pub fn encode_hello(role: u8, id: u32) -> Vec<u8> {
    let mut out = vec![role];
    out.extend_from_slice(&id.to_le_bytes());
    out
}

pub fn decode_hello(payload: &[u8]) -> Result<(u8, u32), WireError> {
    let mut rd = Rd::new(payload);
    let role = rd.u8()?;
    if role > ROLE_HARNESS {
        return Err(WireError::Malformed("unknown role"));
    }
    let id = rd.u32()?;
    rd.finish()?;
    Ok((role, id))
}

// ACK: success flag plus two counters (receiver buffer length and the
// sender-visible global environment step count).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub ok: bool,
    pub buffer_len: u64,
    pub global_env_steps: u64,
}

pub fn encode_ack(a: &Ack) -> Vec<u8> {
    let mut out = vec![a.ok as u8];
    out.extend_from_slice(&a.buffer_len.to_le_bytes());
    out.extend_from_slice(&a.global_env_steps.to_le_bytes());
    out
}

pub fn decode_ack(payload: &[u8]) -> Result<Ack, WireError> {
    let mut rd = Rd::new(payload);
    let ok = match rd.u8()? {
        0 => false,
        1 => true,
        _ => return Err(WireError::Malformed("bad ack flag")),
    };
    let buffer_len = rd.u64()?;
    let global_env_steps = rd.u64()?;
    rd.finish()?;
    Ok(Ack {
        ok,
        buffer_len,
        global_env_steps,
    })
}

// STATS: global environment steps plus per-learner (version, buffer length).
// An empty payload is the request form.

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stats {
    pub global_env_steps: u64,
    pub learners: Vec<(u64, u64)>,
}

pub fn encode_stats(s: &Stats) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&s.global_env_steps.to_le_bytes());
    out.extend_from_slice(&(s.learners.len() as u32).to_le_bytes());
    for (v, b) in &s.learners {
        out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn decode_stats(payload: &[u8]) -> Result<Stats, WireError> {
    let mut rd = Rd::new(payload);
    let global_env_steps = rd.u64()?;
    let n = rd.u32()?;
    if n > 4096 {
        return Err(WireError::Malformed("implausible learner count"));
    }
    let mut learners = Vec::with_capacity(n as usize);
    for _ in 0..n {
        learners.push((rd.u64()?, rd.u64()?));
    }
    rd.finish()?;
    Ok(Stats {
        global_env_steps,
        learners,
    })
}

// MODEL_REPLY: staleness flag and the versioned parameter vector.

pub fn encode_model_reply(stale: bool, pv: &ParamVector) -> Vec<u8> {
    let mut out = vec![stale as u8];
    out.extend_from_slice(&pv.version.to_le_bytes());
    out.extend_from_slice(&pv.layout_id.to_le_bytes());
    out.extend_from_slice(&(pv.values.len() as u32).to_le_bytes());
    put_f32s(&mut out, &pv.values);
    out
}

pub fn decode_model_reply(payload: &[u8]) -> Result<(bool, ParamVector), WireError> {
    let mut rd = Rd::new(payload);
    let stale = match rd.u8()? {
        0 => false,
        1 => true,
        _ => return Err(WireError::Malformed("bad staleness flag")),
    };
    let version = rd.u64()?;
    let layout_id = rd.u64()?;
    let n = rd.u32()?;
    if n > 16 << 20 {
        return Err(WireError::Malformed("implausible parameter count"));
    }
    let values = rd.f32s(n as usize)?;
    rd.finish()?;
    Ok((
        stale,
        ParamVector {
            version,
            layout_id,
            values,
        },
    ))
}

fn encode_goal(out: &mut Vec<u8>, g: &GoalImage) {
    out.extend_from_slice(&g.target_object_id.to_le_bytes());
    put_f32s(out, &g.pixels);
}

fn decode_goal(rd: &mut Rd<'_>, px: u32) -> Result<GoalImage, WireError> {
    let target_object_id = rd.u32()?;
    let pixels = rd.f32s(3 * (px * px) as usize)?;
    if pixels.iter().any(|p| !p.is_finite()) {
        return Err(WireError::Malformed("non-finite goal pixels"));
    }
    Ok(GoalImage {
        pixels,
        render_px: px,
        target_object_id,
    })
}

fn encode_action(out: &mut Vec<u8>, a: &GraspAction) {
    match *a {
        GraspAction::PoseDelta { dx, dy, dz, dtheta } => {
            out.push(0);
            put_f32s(out, &[dx, dy, dz, dtheta]);
        }
        GraspAction::GripperToggle => {
            out.push(1);
            put_f32s(out, &[0.0; 4]);
        }
    }
}

fn decode_action(rd: &mut Rd<'_>) -> Result<GraspAction, WireError> {
    let kind = rd.u8()?;
    let d = rd.f32s(4)?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(WireError::Malformed("non-finite action"));
    }
    match kind {
        0 => Ok(GraspAction::PoseDelta {
            dx: d[0],
            dy: d[1],
            dz: d[2],
            dtheta: d[3],
        }),
        1 => Ok(GraspAction::GripperToggle),
        _ => Err(WireError::Malformed("unknown action kind")),
    }
}

/// Exact serialized size of an episode, for closed-form checks.
pub fn episode_wire_len(n_transitions: usize, render_px: u32, achieved: bool) -> usize {
    let goal = 4 + 12 * (render_px * render_px) as usize;
    let frame = 3 * (render_px * render_px) as usize;
    22 + 4
        + 1
        + goal
        + if achieved { goal } else { 0 }
        + (n_transitions + 1) * (frame + 12)
        + n_transitions * (17 + 4)
}

pub fn serialize_episode(ep: &EpisodeRecord) -> Result<Vec<u8>, WireError> {
    ep.validate().map_err(|_| WireError::Malformed("invalid episode"))?;
    if ep.len() > MAX_TRANSITIONS || ep.render_px > MAX_RENDER_PX {
        return Err(WireError::Malformed("episode exceeds wire limits"));
    }
    let mut out = Vec::with_capacity(episode_wire_len(
        ep.len(),
        ep.render_px,
        ep.achieved_goal.is_some(),
    ));
    out.extend_from_slice(&ep.actor_id.to_le_bytes());
    out.extend_from_slice(&ep.episode_seed.to_le_bytes());
    out.extend_from_slice(&(ep.len() as u16).to_le_bytes());
    out.extend_from_slice(&ep.behavior_policy_version.to_le_bytes());
    out.extend_from_slice(&ep.render_px.to_le_bytes());
    out.push(ep.achieved_goal.is_some() as u8);
    encode_goal(&mut out, &ep.desired_goal);
    if let Some(a) = &ep.achieved_goal {
        encode_goal(&mut out, a);
    }
    for f in &ep.frames {
        out.extend_from_slice(f);
    }
    for s in &ep.scalars {
        put_f32s(&mut out, s);
    }
    for a in &ep.actions {
        encode_action(&mut out, a);
    }
    put_f32s(&mut out, &ep.rewards);
    Ok(out)
}

pub fn deserialize_episode(payload: &[u8]) -> Result<EpisodeRecord, WireError> {
    let mut rd = Rd::new(payload);
    let actor_id = rd.u32()?;
    let episode_seed = rd.u64()?;
    let n = rd.u16()? as usize;
    let behavior_policy_version = rd.u64()?;
    let render_px = rd.u32()?;
    if n == 0 || n > MAX_TRANSITIONS {
        return Err(WireError::Malformed("bad transition count"));
    }
    if render_px == 0 || render_px > MAX_RENDER_PX {
        return Err(WireError::Malformed("bad render size"));
    }
    let achieved = match rd.u8()? {
        0 => false,
        1 => true,
        _ => return Err(WireError::Malformed("bad goal flag")),
    };
    if payload.len() != episode_wire_len(n, render_px, achieved) {
        return Err(WireError::Malformed("payload length mismatch"));
    }
    let desired_goal = decode_goal(&mut rd, render_px)?;
    let achieved_goal = if achieved {
        Some(decode_goal(&mut rd, render_px)?)
    } else {
        None
    };
    let frame = 3 * (render_px * render_px) as usize;
    let mut frames = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        frames.push(rd.bytes(frame)?.to_vec());
    }
    let mut scalars = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let s = rd.f32s(3)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(WireError::Malformed("non-finite scalars"));
        }
        scalars.push([s[0], s[1], s[2]]);
    }
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        actions.push(decode_action(&mut rd)?);
    }
    let rewards = rd.f32s(n)?;
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(WireError::Malformed("non-finite rewards"));
    }
    rd.finish()?;
    let ep = EpisodeRecord {
        episode_seed,
        actor_id,
        behavior_policy_version,
        render_px,
        frames,
        scalars,
        actions,
        rewards,
        desired_goal,
        achieved_goal,
    };
    ep.validate().map_err(|_| WireError::Malformed("invalid episode"))?;
    Ok(ep)
}

// Checkpoint file: magic, network shape, layout fingerprint, version, raw
// little-endian f32 parameters.

pub const CKPT_MAGIC: [u8; 16] = *b"graspq-ckpt\0v1\0\0";

pub fn encode_checkpoint(spec: &NetworkSpec, pv: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 33 + pv.values.len() * 4);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&(spec.render_px as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_stack as u32).to_le_bytes());
    out.push(spec.targeted as u8);
    out.extend_from_slice(&pv.layout_id.to_le_bytes());
    out.extend_from_slice(&pv.version.to_le_bytes());
    out.extend_from_slice(&(pv.values.len() as u32).to_le_bytes());
    put_f32s(&mut out, &pv.values);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkSpec, ParamVector), WireError> {
    let mut rd = Rd::new(bytes);
    if rd.bytes(16)? != CKPT_MAGIC {
        return Err(WireError::Malformed("bad checkpoint magic"));
    }
    let render_px = rd.u32()?;
    let n_stack = rd.u32()?;
    let targeted = match rd.u8()? {
        0 => false,
        1 => true,
        _ => return Err(WireError::Malformed("bad targeted flag")),
    };
    if render_px == 0 || render_px > MAX_RENDER_PX || n_stack == 0 || n_stack > 16 {
        return Err(WireError::Malformed("implausible network shape"));
    }
    let spec = NetworkSpec::new(render_px as usize, n_stack as usize, targeted);
    let layout_id = rd.u64()?;
    let version = rd.u64()?;
    let n = rd.u32()? as usize;
    if layout_id != spec.layout_id() || n != spec.param_count() {
        return Err(WireError::Malformed("layout mismatch"));
    }
    let values = rd.f32s(n)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(WireError::Malformed("non-finite parameters"));
    }
    rd.finish()?;
    Ok((
        spec,
        ParamVector {
            version,
            layout_id,
            values,
        },
    ))
}

pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, pv: &ParamVector) -> Result<(), WireError> {
    // write-then-rename so readers never observe a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(spec, pv))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, ParamVector), WireError> {
    decode_checkpoint(&fs::read(path)?)
}

// Episode replay file: world config, seed, split, and the action list; enough
// to reconstruct the trajectory bit-exactly.

pub const REPLAY_MAGIC: [u8; 16] = *b"graspq-replay\0v1";

pub fn encode_replay(cfg: &WorldConfig, episode_seed: u64, split: Split, actions: &[GraspAction]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&REPLAY_MAGIC);
    put_f32s(
        &mut out,
        &[
            cfg.tray_extent,
            cfg.step_penalty,
            cfg.discount,
            cfg.lift_threshold_z,
            cfg.grasp_radius,
            cfg.grasp_z_max,
            cfg.angle_tolerance,
            cfg.push_z_max,
            cfg.fov_min,
            cfg.fov_max,
            cfg.delta_max,
            cfg.rot_max,
        ],
    );
    for v in [
        cfg.num_objects_range.0,
        cfg.num_objects_range.1,
        cfg.max_episode_len,
        cfg.render_px,
        cfg.frame_stack,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(cfg.targeted as u8);
    out.extend_from_slice(&cfg.rng_seed.to_le_bytes());
    out.extend_from_slice(&episode_seed.to_le_bytes());
    out.push(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.extend_from_slice(&(actions.len() as u16).to_le_bytes());
    for a in actions {
        encode_action(&mut out, a);
    }
    out
}

pub fn decode_replay(bytes: &[u8]) -> Result<(WorldConfig, u64, Split, Vec<GraspAction>), WireError> {
    let mut rd = Rd::new(bytes);
    if rd.bytes(16)? != REPLAY_MAGIC {
        return Err(WireError::Malformed("bad replay magic"));
    }
    let f = rd.f32s(12)?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(WireError::Malformed("non-finite config"));
    }
    let mut u = [0u32; 5];
    for v in u.iter_mut() {
        *v = rd.u32()?;
    }
    let targeted = match rd.u8()? {
        0 => false,
        1 => true,
        _ => return Err(WireError::Malformed("bad targeted flag")),
    };
    let rng_seed = rd.u64()?;
    let cfg = WorldConfig {
        tray_extent: f[0],
        num_objects_range: (u[0], u[1]),
        max_episode_len: u[2],
        step_penalty: f[1],
        discount: f[2],
        lift_threshold_z: f[3],
        grasp_radius: f[4],
        grasp_z_max: f[5],
        angle_tolerance: f[6],
        push_z_max: f[7],
        fov_min: f[8],
        fov_max: f[9],
        render_px: u[3],
        frame_stack: u[4],
        delta_max: f[10],
        rot_max: f[11],
        targeted,
        rng_seed,
    };
    cfg.validate().map_err(|_| WireError::Malformed("invalid world config"))?;
    let episode_seed = rd.u64()?;
    let split = match rd.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        _ => return Err(WireError::Malformed("bad split tag")),
    };
    let n = rd.u16()? as usize;
    if n > MAX_TRANSITIONS {
        return Err(WireError::Malformed("bad action count"));
    }
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        actions.push(decode_action(&mut rd)?);
    }
    rd.finish()?;
    Ok((cfg, episode_seed, split, actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use graspq_core::rngutil::rng_from;
    use graspq_core::world::World;
    use rand::Rng;

    fn sample_episode(seed: u64) -> EpisodeRecord {
        let mut rng = rng_from(seed);
        let px = 8u32;
        let n = rng.gen_range(1..=20usize);
        let frame = 3 * (px * px) as usize;
        let goal = |rng: &mut _| GoalImage {
            pixels: (0..frame).map(|_| rng_gen(rng)).collect(),
            render_px: px,
            target_object_id: 7,
        };
        fn rng_gen<R: Rng>(rng: &mut R) -> f32 {
            rng.gen_range(0.0..1.0)
        }
        EpisodeRecord {
            episode_seed: rng.gen(),
            actor_id: rng.gen(),
            behavior_policy_version: rng.gen(),
            render_px: px,
            frames: (0..=n).map(|_| (0..frame).map(|_| rng.gen()).collect()).collect(),
            scalars: (0..=n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
            actions: (0..n)
                .map(|_| {
                    if rng.gen::<bool>() {
                        GraspAction::GripperToggle
                    } else {
                        GraspAction::PoseDelta {
                            dx: rng.gen_range(-0.1..0.1),
                            dy: rng.gen_range(-0.1..0.1),
                            dz: rng.gen_range(-0.1..0.1),
                            dtheta: rng.gen_range(-0.3..0.3),
                        }
                    }
                })
                .collect(),
            rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            desired_goal: goal(&mut rng),
            achieved_goal: if rng.gen::<bool>() { Some(goal(&mut rng)) } else { None },
        }
    }

    #[test]
    fn episode_round_trip_and_exact_length() {
        for seed in 0..50 {
            let ep = sample_episode(seed);
            let bytes = serialize_episode(&ep).unwrap();
            assert_eq!(
                bytes.len(),
                episode_wire_len(ep.len(), ep.render_px, ep.achieved_goal.is_some())
            );
            let back = deserialize_episode(&bytes).unwrap();
            assert_eq!(back, ep);
        }
    }

    #[test]
    fn truncated_and_padded_payloads_are_rejected() {
        let ep = sample_episode(1);
        let bytes = serialize_episode(&ep).unwrap();
        assert!(deserialize_episode(&bytes[..bytes.len() - 1]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(deserialize_episode(&padded).is_err());
        assert!(deserialize_episode(&[]).is_err());
    }

    #[test]
    fn frame_round_trip_over_a_buffer() {
        let mut buf = Vec::new();
        write_frame(&mut buf, SET_EXPERIENCE, &[1, 2, 3]).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let (t, p) = read_frame(&mut cursor).unwrap();
        assert_eq!((t, p.as_slice()), (SET_EXPERIENCE, &[1u8, 2, 3][..]));
    }

    #[test]
    fn oversized_frame_is_rejected_before_allocation() {
        let mut bytes = (MAX_PAYLOAD + 1).to_le_bytes().to_vec();
        bytes.push(HELLO);
        let mut cursor = std::io::Cursor::new(bytes);
        assert!(matches!(read_frame(&mut cursor), Err(WireError::TooLarge(_))));
    }

    #[test]
    fn checkpoint_round_trip_guards_layout() {
        let spec = NetworkSpec::new(8, 1, true);
        let net: graspq_core::Network<f32> = graspq_core::Network::init(spec.clone(), 5);
        let pv = net.to_params(42);
        let bytes = encode_checkpoint(&spec, &pv);
        let (spec2, pv2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(pv2, pv);
        let mut corrupt = bytes.clone();
        corrupt[20] ^= 1; // render_px
        assert!(decode_checkpoint(&corrupt).is_err());
    }

    #[test]
    fn replay_file_reconstructs_the_trajectory() {
        let cfg = WorldConfig {
            render_px: 16,
            num_objects_range: (2, 3),
            ..WorldConfig::default()
        };
        let mut rng = rng_from(9);
        let (mut w, _, _) = World::reset(cfg.clone(), 77, Split::Train).unwrap();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        while !w.is_done() {
            let a = GraspAction::PoseDelta {
                dx: rng.gen_range(-0.1..0.1),
                dy: rng.gen_range(-0.1..0.1),
                dz: rng.gen_range(-0.1..0.1),
                dtheta: rng.gen_range(-0.3..0.3),
            };
            rewards.push(w.step(a).unwrap().reward);
            actions.push(a);
        }
        let bytes = encode_replay(&cfg, 77, Split::Train, &actions);
        let (cfg2, seed2, split2, actions2) = decode_replay(&bytes).unwrap();
        assert_eq!(seed2, 77);
        assert_eq!(split2, Split::Train);
        assert_eq!(actions2, actions);
        let (mut w2, _, _) = World::reset(cfg2, seed2, split2).unwrap();
        for (a, &r) in actions2.iter().zip(rewards.iter()) {
            assert_eq!(w2.step(*a).unwrap().reward, r);
        }
        assert!(w2.is_done());
    }
}
