//! Deterministic 2D targeted-grasping world with an egocentric wrist camera.
//!
//! The tray is a square centered at the origin. The gripper moves in x, y, z
//! and yaw; its heading is stored as a unit vector so that the mirror
//! reflection (x negation) is exact in floating point, which makes
//! `step ∘ mirror == mirror ∘ step` hold bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::rngutil::{mix2, mix64, rng_from};

pub const BORDER_COLOR: [u8; 3] = [60, 60, 60];
pub const FLOOR_COLOR: [u8; 3] = [15, 15, 15];
pub const FINGER_COLOR: [u8; 3] = [230, 230, 230];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// World parameters. Distances are in world units (tray side = 1 by default),
/// angles in radians.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub tray_extent: f32,
    pub num_objects_range: (u32, u32),
    pub max_episode_len: u32,
    pub step_penalty: f32,
    pub discount: f32,
    pub lift_threshold_z: f32,
    pub grasp_radius: f32,
    pub grasp_z_max: f32,
    pub angle_tolerance: f32,
    pub push_z_max: f32,
    pub fov_min: f32,
    pub fov_max: f32,
    pub render_px: u32,
    pub frame_stack: u32,
    pub delta_max: f32,
    pub rot_max: f32,
    /// In untargeted mode any grasped object counts as a success.
    pub targeted: bool,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            tray_extent: 0.8,
            num_objects_range: (4, 10),
            max_episode_len: 20,
            step_penalty: 0.05,
            discount: 0.9,
            lift_threshold_z: 0.35,
            // just under 5 render pixels; tighter radii demand sub-pixel
            // servo precision the 32px egocentric view cannot support
            grasp_radius: 0.12,
            grasp_z_max: 0.25,
            angle_tolerance: core::f32::consts::FRAC_PI_4,
            push_z_max: 0.15,
            fov_min: 0.3,
            fov_max: 1.2,
            render_px: 32,
            frame_stack: 4,
            delta_max: 0.1,
            rot_max: core::f32::consts::FRAC_PI_8,
            targeted: true,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    BadObjectRange,
    BadFov,
    BadHeights,
    BadPenalty,
    BadDiscount,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::BadObjectRange => write!(f, "num_objects_range must be non-empty and >= 1"),
            ConfigError::BadFov => write!(f, "fov_min must be < fov_max"),
            ConfigError::BadHeights => write!(f, "need grasp_z_max < lift_threshold_z <= 1"),
            ConfigError::BadPenalty => write!(f, "step penalty must be in [0,1)"),
            ConfigError::BadDiscount => write!(f, "discount must be in (0,1]"),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_objects_range.0 < 1 || self.num_objects_range.0 > self.num_objects_range.1 {
            return Err(ConfigError::BadObjectRange);
        }
        if self.fov_min >= self.fov_max {
            return Err(ConfigError::BadFov);
        }
        if !(self.grasp_z_max < self.lift_threshold_z && self.lift_threshold_z <= 1.0) {
            return Err(ConfigError::BadHeights);
        }
        if !(0.0..1.0).contains(&self.step_penalty) {
            return Err(ConfigError::BadPenalty);
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(ConfigError::BadDiscount);
        }
        Ok(())
    }

    pub fn half_extent(&self) -> f32 {
        0.5 * self.tray_extent
    }
}

/// A procedurally generated rigid object: a star-shaped polygon around its
/// own origin, a color, and a graspable axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub object_id: u32,
    /// Vertices in the object frame, star-shaped around the origin.
    pub shape_polygon: Vec<[f32; 2]>,
    pub color_rgb: [f32; 3],
    pub pos: [f32; 2],
    /// Unit heading vector (cos θ, sin θ).
    pub heading: [f32; 2],
    /// Unit graspable-axis vector in the object frame.
    pub grasp_axis: [f32; 2],
    pub split_tag: Split,
    pub gen_seed: u64,
}

impl ObjectSpec {
    pub fn theta(&self) -> f32 {
        self.heading[1].atan2(self.heading[0])
    }

    /// World-frame graspable axis direction.
    pub fn world_grasp_axis(&self) -> [f32; 2] {
        rot(self.heading, self.grasp_axis)
    }

    pub fn bounding_radius(&self) -> f32 {
        let mut r = 0.0f32;
        for v in &self.shape_polygon {
            let d = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if d > r {
                r = d;
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperState {
    pub pos: [f32; 2],
    pub z: f32,
    /// Unit heading vector (cos θ, sin θ).
    pub heading: [f32; 2],
    pub closed: bool,
    pub held_object: Option<u32>,
}

impl GripperState {
    pub fn theta(&self) -> f32 {
        self.heading[1].atan2(self.heading[0])
    }
}

/// Hybrid action: either a continuous pose delta in the egocentric frame or
/// a discrete gripper toggle, never both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraspAction {
    PoseDelta { dx: f32, dy: f32, dz: f32, dtheta: f32 },
    GripperToggle,
}

impl GraspAction {
    /// Reflection across the camera's lateral symmetry axis: the lateral
    /// delta and the rotation flip sign, a toggle is unchanged.
    pub fn mirrored(self) -> GraspAction {
        match self {
            GraspAction::PoseDelta { dx, dy, dz, dtheta } => GraspAction::PoseDelta {
                dx,
                dy: -dy,
                dz,
                dtheta: -dtheta,
            },
            GraspAction::GripperToggle => GraspAction::GripperToggle,
        }
    }

    pub fn clamped(self, delta_max: f32, rot_max: f32) -> GraspAction {
        match self {
            GraspAction::PoseDelta { dx, dy, dz, dtheta } => GraspAction::PoseDelta {
                dx: dx.clamp(-delta_max, delta_max),
                dy: dy.clamp(-delta_max, delta_max),
                dz: dz.clamp(-delta_max, delta_max),
                dtheta: dtheta.clamp(-rot_max, rot_max),
            },
            GraspAction::GripperToggle => GraspAction::GripperToggle,
        }
    }
}

/// Agent input: stacked egocentric frames (newest first, channel-major) plus
/// the gripper scalars. Pixels are in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frames: Vec<f32>,
    pub render_px: u32,
    pub n_stack: u32,
    /// -1.0 open encoded as -1, closed as +1.
    pub gripper_closed: f32,
    pub gripper_z: f32,
    /// +1 at the first permitted step, -1 at the last.
    pub time_remaining: f32,
}

impl Observation {
    pub fn scalars(&self) -> [f32; 3] {
        [self.gripper_closed, self.gripper_z, self.time_remaining]
    }

    /// Horizontal flip of every stacked frame; scalars unchanged. Involution.
    pub fn mirrored(&self) -> Observation {
        let mut out = self.clone();
        hflip_chw(&mut out.frames, self.render_px as usize);
        out
    }
}

/// Goal specification: the target object rendered alone, centered, at a
/// random rotation on a blank background.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalImage {
    pub pixels: Vec<f32>,
    pub render_px: u32,
    /// Hidden from the agent; used by the harness and HER only.
    pub target_object_id: u32,
}

impl GoalImage {
    pub fn mirrored(&self) -> GoalImage {
        let mut out = self.clone();
        hflip_chw(&mut out.pixels, self.render_px as usize);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    LiftedClosed,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub grasped: Option<u32>,
    pub released: Option<u32>,
    pub pushed: Vec<u32>,
    pub terminal: Option<TerminalKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f32,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepError {
    EpisodeDone,
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::EpisodeDone => write!(f, "step called after episode terminated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenError {
    WrongSplit { bucket: u64, requested: Split },
}

impl fmt::Display for GenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenError::WrongSplit { bucket, requested } => write!(
                f,
                "seed hash bucket {} is inconsistent with requested split {}",
                bucket,
                requested.tag()
            ),
        }
    }
}

/// Hash bucket of a generator seed; buckets 0..=8 are train, 9 is test.
pub fn split_bucket(gen_seed: u64) -> u64 {
    mix64(gen_seed ^ 0x5eed_0b7e_c75a_11e5) % 10
}

pub fn split_of_seed(gen_seed: u64) -> Split {
    if split_bucket(gen_seed) == 9 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Deterministic procedural object from a 64-bit seed. Errors if the seed's
/// hash bucket disagrees with the requested split.
pub fn generate_object(gen_seed: u64, split: Split) -> Result<ObjectSpec, GenError> {
    let bucket = split_bucket(gen_seed);
    if split_of_seed(gen_seed) != split {
        return Err(GenError::WrongSplit { bucket, requested: split });
    }
    let mut rng = rng_from(mix2(gen_seed, 0x0b1e_c7));
    let n: usize = rng.gen_range(4..=8);
    let radius: f32 = rng.gen_range(0.035..0.06);
    let mut poly = Vec::with_capacity(n);
    for i in 0..n {
        let jitter: f32 = rng.gen_range(-0.3..0.3);
        let ang = (i as f32 + jitter) * core::f32::consts::TAU / n as f32;
        let r: f32 = rng.gen_range(0.55 * radius..radius);
        poly.push([r * ang.cos(), r * ang.sin()]);
    }
    let color = [
        rng.gen_range(0.25..1.0f32),
        rng.gen_range(0.25..1.0f32),
        rng.gen_range(0.25..1.0f32),
    ];
    let axis_ang: f32 = rng.gen_range(0.0..core::f32::consts::TAU);
    Ok(ObjectSpec {
        object_id: 0,
        shape_polygon: poly,
        color_rgb: color,
        pos: [0.0, 0.0],
        heading: [1.0, 0.0],
        grasp_axis: [axis_ang.cos(), axis_ang.sin()],
        split_tag: split,
        gen_seed,
    })
}

/// One live episode. Many independent instances may run in parallel; a
/// single instance is strictly single-threaded.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub objects: Vec<ObjectSpec>,
    pub gripper: GripperState,
    pub target_id: u32,
    pub episode_seed: u64,
    step_count: u32,
    done: bool,
    terminal: Option<TerminalKind>,
    frame_history: Vec<Vec<u8>>,
    goal: GoalImage,
    achieved_rotation: [f32; 2],
}

impl World {
    /// Populate a fresh world. Identical (config, seed, split) always yields
    /// an identical world.
    pub fn reset(cfg: WorldConfig, episode_seed: u64, split: Split) -> Result<(World, Observation, GoalImage), ConfigError> {
        cfg.validate()?;
        let mut rng = rng_from(mix2(cfg.rng_seed, episode_seed));
        let n = rng.gen_range(cfg.num_objects_range.0..=cfg.num_objects_range.1) as usize;
        let h = cfg.half_extent();
        let margin = 0.08f32.min(0.5 * h);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
        for id in 0..n {
            let mut obj = loop {
                let seed: u64 = rng.gen();
                if split_of_seed(seed) == split {
                    break generate_object(seed, split).expect("bucket checked");
                }
            };
            obj.object_id = id as u32;
            let ang: f32 = rng.gen_range(0.0..core::f32::consts::TAU);
            obj.heading = [ang.cos(), ang.sin()];
            // keep object centers separated when there is room
            for attempt in 0..32 {
                let x = rng.gen_range(-(h - margin)..(h - margin));
                let y = rng.gen_range(-(h - margin)..(h - margin));
                let ok = objects.iter().all(|o: &ObjectSpec| {
                    let dx = o.pos[0] - x;
                    let dy = o.pos[1] - y;
                    dx * dx + dy * dy > 0.12 * 0.12
                });
                if ok || attempt == 31 {
                    obj.pos = [x, y];
                    break;
                }
            }
            objects.push(obj);
        }
        let target_id = rng.gen_range(0..n) as u32;
        let goal_ang: f32 = rng.gen_range(0.0..core::f32::consts::TAU);
        let achieved_ang: f32 = rng.gen_range(0.0..core::f32::consts::TAU);
        // The start height sits above the lift threshold (closing right away
        // is still a failed terminal) but close enough to the grasp zone that
        // a competent grasp finishes inside the discount horizon: with
        // gamma 0.9 and the step penalty, success only out-values immediate
        // termination when it completes within about 12 steps.
        let gripper = GripperState {
            pos: [0.0, 0.0],
            z: 0.45,
            heading: [1.0, 0.0],
            closed: false,
            held_object: None,
        };
        let goal = render_goal_image(&cfg, &objects[target_id as usize], [goal_ang.cos(), goal_ang.sin()]);
        let mut world = World {
            cfg,
            objects,
            gripper,
            target_id,
            episode_seed,
            step_count: 0,
            done: false,
            terminal: None,
            frame_history: Vec::new(),
            goal: goal.clone(),
            achieved_rotation: [achieved_ang.cos(), achieved_ang.sin()],
        };
        let first = world.render_egocentric();
        world.frame_history = vec![first; world.cfg.frame_stack as usize];
        let obs = world.observation();
        Ok((world, obs, goal))
    }

    pub fn goal(&self) -> &GoalImage {
        &self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn terminal_kind(&self) -> Option<TerminalKind> {
        self.terminal
    }

    pub fn steps_taken(&self) -> u32 {
        self.step_count
    }

    /// Goal-image rendering of the object actually held at a successful
    /// lift; `None` when the episode did not end holding an object.
    pub fn achieved_goal(&self) -> Option<GoalImage> {
        if self.terminal != Some(TerminalKind::LiftedClosed) {
            return None;
        }
        let id = self.gripper.held_object?;
        Some(render_goal_image(&self.cfg, &self.objects[id as usize], self.achieved_rotation))
    }

    pub fn observation(&self) -> Observation {
        let px = self.cfg.render_px as usize;
        let n_stack = self.cfg.frame_stack as usize;
        let mut frames = Vec::with_capacity(3 * px * px * n_stack);
        // newest first
        for f in self.frame_history.iter().rev() {
            frames.extend(f.iter().map(|&b| b as f32 / 255.0));
        }
        let t_max = self.cfg.max_episode_len.max(2);
        let remaining = t_max - self.step_count.min(t_max - 1);
        let time_remaining = -1.0 + 2.0 * (remaining - 1) as f32 / (t_max - 1) as f32;
        Observation {
            frames,
            render_px: self.cfg.render_px,
            n_stack: self.cfg.frame_stack,
            gripper_closed: if self.gripper.closed { 1.0 } else { -1.0 },
            gripper_z: self.gripper.z,
            time_remaining,
        }
    }

    /// Apply one action. Dynamics are fully deterministic.
    pub fn step(&mut self, action: GraspAction) -> Result<StepResult, StepError> {
        if self.done {
            return Err(StepError::EpisodeDone);
        }
        let cfg = self.cfg.clone();
        let h = cfg.half_extent();
        let mut info = StepInfo {
            grasped: None,
            released: None,
            pushed: Vec::new(),
            terminal: None,
        };
        match action.clamped(cfg.delta_max, cfg.rot_max) {
            GraspAction::PoseDelta { dx, dy, dz, dtheta } => {
                // camera-frame deltas rotate by the gripper heading into world frame
                let wd = rot(self.gripper.heading, [dx, dy]);
                self.gripper.pos[0] = (self.gripper.pos[0] + wd[0]).clamp(-h, h);
                self.gripper.pos[1] = (self.gripper.pos[1] + wd[1]).clamp(-h, h);
                self.gripper.z = (self.gripper.z + dz).clamp(0.0, 1.0);
                let (sd, cd) = dtheta.sin_cos();
                self.gripper.heading = rot([cd, sd], self.gripper.heading);
                renorm(&mut self.gripper.heading);
                let held = self.gripper.held_object;
                if let Some(id) = held {
                    self.objects[id as usize].pos = self.gripper.pos;
                }
                if self.gripper.z <= cfg.push_z_max {
                    let gp = self.gripper.pos;
                    let r2 = cfg.grasp_radius * cfg.grasp_radius;
                    for obj in &mut self.objects {
                        if Some(obj.object_id) == held {
                            continue;
                        }
                        let ox = obj.pos[0] - gp[0];
                        let oy = obj.pos[1] - gp[1];
                        if ox * ox + oy * oy <= r2 {
                            obj.pos[0] = (obj.pos[0] + wd[0]).clamp(-h, h);
                            obj.pos[1] = (obj.pos[1] + wd[1]).clamp(-h, h);
                            info.pushed.push(obj.object_id);
                        }
                    }
                }
            }
            GraspAction::GripperToggle => {
                if self.gripper.closed {
                    if let Some(id) = self.gripper.held_object.take() {
                        self.objects[id as usize].pos = self.gripper.pos;
                        info.released = Some(id);
                    }
                    self.gripper.closed = false;
                } else {
                    self.gripper.closed = true;
                    if self.gripper.z <= cfg.grasp_z_max {
                        let gp = self.gripper.pos;
                        let r2 = cfg.grasp_radius * cfg.grasp_radius;
                        let sin_tol = cfg.angle_tolerance.sin();
                        let mut best: Option<(f32, u32)> = None;
                        for obj in &self.objects {
                            let ox = obj.pos[0] - gp[0];
                            let oy = obj.pos[1] - gp[1];
                            let d2 = ox * ox + oy * oy;
                            if d2 > r2 {
                                continue;
                            }
                            // angular difference mod π via |sin Δ| on unit vectors
                            let axis = obj.world_grasp_axis();
                            let g = self.gripper.heading;
                            let cross = g[0] * axis[1] - g[1] * axis[0];
                            if cross.abs() <= sin_tol {
                                match best {
                                    Some((bd2, _)) if bd2 <= d2 => {}
                                    _ => best = Some((d2, obj.object_id)),
                                }
                            }
                        }
                        if let Some((_, id)) = best {
                            self.gripper.held_object = Some(id);
                            self.objects[id as usize].pos = gp;
                            info.grasped = Some(id);
                        }
                    }
                }
            }
        }
        self.step_count += 1;
        // scripted termination: closed and lifted above the threshold
        if self.gripper.closed && self.gripper.z > cfg.lift_threshold_z {
            info.terminal = Some(TerminalKind::LiftedClosed);
        } else if self.step_count >= cfg.max_episode_len {
            info.terminal = Some(TerminalKind::TimeLimit);
        }
        let reward = match info.terminal {
            Some(_) => {
                let success = match self.gripper.held_object {
                    Some(id) => !cfg.targeted || id == self.target_id,
                    None => false,
                };
                if success {
                    1.0 - cfg.step_penalty
                } else {
                    -cfg.step_penalty
                }
            }
            None => -cfg.step_penalty,
        };
        self.done = info.terminal.is_some();
        self.terminal = info.terminal;
        let frame = self.render_egocentric();
        self.frame_history.remove(0);
        self.frame_history.push(frame);
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done,
            info,
        })
    }

    /// Orthographic top-down crop centered at the gripper, rotated so the
    /// gripper frame is axis-aligned. Image rows run along the gripper
    /// heading (top = ahead), columns along the lateral axis. Window side
    /// grows linearly with z.
    pub fn render_egocentric(&self) -> Vec<u8> {
        let cfg = &self.cfg;
        let px = cfg.render_px as usize;
        let side = cfg.fov_min + self.gripper.z * (cfg.fov_max - cfg.fov_min);
        let h = cfg.half_extent();
        let fwd = self.gripper.heading;
        let lat = [-fwd[1], fwd[0]];
        let gp = self.gripper.pos;
        let scale = side / px as f32;
        let mut img = vec![0u8; 3 * px * px];
        let plane = px * px;
        for y in 0..px {
            let f = -((y as f32 + 0.5) - px as f32 * 0.5) * scale;
            for x in 0..px {
                let l = ((x as f32 + 0.5) - px as f32 * 0.5) * scale;
                let wx = gp[0] + fwd[0] * f + lat[0] * l;
                let wy = gp[1] + fwd[1] * f + lat[1] * l;
                let color = if wx.abs() > h || wy.abs() > h {
                    BORDER_COLOR
                } else {
                    let mut c = FLOOR_COLOR;
                    // ascending id draw order == pick the highest id containing the point
                    for obj in self.objects.iter().rev() {
                        if object_contains(obj, [wx, wy]) {
                            c = quantize(obj.color_rgb);
                            break;
                        }
                    }
                    c
                };
                let idx = y * px + x;
                img[idx] = color[0];
                img[plane + idx] = color[1];
                img[2 * plane + idx] = color[2];
            }
        }
        draw_fingers(&mut img, px, self.gripper.closed);
        img
    }

    /// Reflect the whole scene (objects and gripper) across the tray's
    /// vertical center axis. An involution, exact in floating point.
    pub fn mirror_world(&self) -> World {
        let mut w = self.clone();
        w.gripper.pos[0] = -w.gripper.pos[0];
        w.gripper.heading[0] = -w.gripper.heading[0];
        for obj in &mut w.objects {
            obj.pos[0] = -obj.pos[0];
            obj.heading[0] = -obj.heading[0];
            for v in &mut obj.shape_polygon {
                v[1] = -v[1];
            }
            obj.grasp_axis[1] = -obj.grasp_axis[1];
        }
        w.achieved_rotation[0] = -w.achieved_rotation[0];
        // cached renders correspond to the reflected scene
        for f in &mut w.frame_history {
            hflip_chw_u8(f, self.cfg.render_px as usize);
        }
        hflip_chw(&mut w.goal.pixels, self.cfg.render_px as usize);
        w
    }
}

/// Privileged scripted grasp policy used to seed exploration. Reads object
/// positions directly, which only scripted data collection may do; the
/// learned policy sees pixels alone. Servo to the nearest object, align with
/// its graspable axis, descend, close, lift. When the script closes the
/// gripper the world-level grasp test is guaranteed to pass for some object.
pub fn scripted_grasp_action(world: &World) -> GraspAction {
    let cfg = &world.cfg;
    let g = &world.gripper;
    let dm = cfg.delta_max;
    if g.closed {
        return if g.held_object.is_some() {
            // carry straight up until the lift terminal fires
            GraspAction::PoseDelta { dx: 0.0, dy: 0.0, dz: dm, dtheta: 0.0 }
        } else {
            // closed on nothing; reopen (non-terminal because z <= lift threshold)
            GraspAction::GripperToggle
        };
    }
    let Some(obj) = world.objects.iter().min_by(|a, b| {
        let da = (a.pos[0] - g.pos[0]).hypot(a.pos[1] - g.pos[1]);
        let db = (b.pos[0] - g.pos[0]).hypot(b.pos[1] - g.pos[1]);
        da.partial_cmp(&db).unwrap_or(core::cmp::Ordering::Equal)
    }) else {
        return GraspAction::PoseDelta { dx: 0.0, dy: 0.0, dz: 0.0, dtheta: 0.0 };
    };
    let d = [obj.pos[0] - g.pos[0], obj.pos[1] - g.pos[1]];
    // offset in the gripper frame: q = R^T d
    let hc = g.heading[0];
    let hs = g.heading[1];
    let local = [hc * d[0] + hs * d[1], hc * d[1] - hs * d[0]];
    let dist = (local[0] * local[0] + local[1] * local[1]).sqrt();
    // heading error to the graspable axis, wrapped to [-pi/2, pi/2]
    let axis = obj.world_grasp_axis();
    let mut ang = (hc * axis[1] - hs * axis[0]).atan2(hc * axis[0] + hs * axis[1]);
    if ang > core::f32::consts::FRAC_PI_2 {
        ang -= core::f32::consts::PI;
    } else if ang < -core::f32::consts::FRAC_PI_2 {
        ang += core::f32::consts::PI;
    }
    if dist <= 0.5 * cfg.grasp_radius && g.z <= cfg.grasp_z_max && ang.abs() <= cfg.angle_tolerance {
        return GraspAction::GripperToggle;
    }
    // hover above the push band while far so approach does not scatter
    // objects, descend into the grasp zone once roughly overhead
    let z_want = if dist <= 2.0 * cfg.grasp_radius {
        0.5 * cfg.grasp_z_max
    } else {
        cfg.push_z_max + 0.05
    };
    GraspAction::PoseDelta {
        dx: local[0].clamp(-dm, dm),
        dy: local[1].clamp(-dm, dm),
        dz: (z_want - g.z).clamp(-dm, dm),
        dtheta: ang.clamp(-cfg.rot_max, cfg.rot_max),
    }
}

/// Rotate vector `v` by the rotation encoded by unit vector `r`.
fn rot(r: [f32; 2], v: [f32; 2]) -> [f32; 2] {
    [r[0] * v[0] - r[1] * v[1], r[1] * v[0] + r[0] * v[1]]
}

/// Renormalize a heading vector, guarding against drift over many rotations.
/// Written so that negation of either component is preserved exactly.
fn renorm(v: &mut [f32; 2]) {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > 0.0 {
        v[0] /= n;
        v[1] /= n;
    }
}

fn quantize(c: [f32; 3]) -> [u8; 3] {
    [
        (c[0] * 255.0).round().clamp(0.0, 255.0) as u8,
        (c[1] * 255.0).round().clamp(0.0, 255.0) as u8,
        (c[2] * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Point-in-star-polygon via the triangle fan around the object origin.
/// Accepts either orientation so reflected polygons test identically.
fn object_contains(obj: &ObjectSpec, world_pt: [f32; 2]) -> bool {
    // into the object frame: q = R^T (p - pos)
    let dx = world_pt[0] - obj.pos[0];
    let dy = world_pt[1] - obj.pos[1];
    let hc = obj.heading[0];
    let hs = obj.heading[1];
    let q = [hc * dx + hs * dy, hc * dy - hs * dx];
    let n = obj.shape_polygon.len();
    for i in 0..n {
        let a = obj.shape_polygon[i];
        let b = obj.shape_polygon[(i + 1) % n];
        if point_in_triangle(q, a, b) {
            return true;
        }
    }
    false
}

/// Triangle (origin, a, b) containment, orientation-agnostic.
fn point_in_triangle(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> bool {
    let c0 = a[0] * p[1] - a[1] * p[0];
    let c1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let c2 = -b[0] * (p[1] - b[1]) + b[1] * (p[0] - b[0]);
    (c0 >= 0.0 && c1 >= 0.0 && c2 >= 0.0) || (c0 <= 0.0 && c1 <= 0.0 && c2 <= 0.0)
}

/// Fingers live at fixed pixel positions (the camera is wrist-mounted), a
/// laterally symmetric pair of bars near the bottom of the frame.
fn draw_fingers(img: &mut [u8], px: usize, closed: bool) {
    let plane = px * px;
    let gap = if closed { px / 16 } else { px / 4 };
    let half = px / 2;
    let bar_w = (px / 16).max(1);
    let y0 = px / 2;
    let y1 = px - px / 8;
    for y in y0..y1 {
        for side in [0usize, 1] {
            for t in 0..bar_w {
                let off = gap / 2 + t;
                let x = if side == 0 {
                    half - 1 - off
                } else {
                    half + off
                };
                if x < px {
                    let idx = y * px + x;
                    img[idx] = FINGER_COLOR[0];
                    img[plane + idx] = FINGER_COLOR[1];
                    img[2 * plane + idx] = FINGER_COLOR[2];
                }
            }
        }
    }
}

/// Render an object alone, centered, at the given rotation, on a blank
/// background. Window side is `fov_min` so the object fills the frame.
pub fn render_goal_image(cfg: &WorldConfig, obj: &ObjectSpec, rotation: [f32; 2]) -> GoalImage {
    let px = cfg.render_px as usize;
    let side = cfg.fov_min;
    let scale = side / px as f32;
    let mut staged = obj.clone();
    staged.pos = [0.0, 0.0];
    staged.heading = rotation;
    let color = quantize(obj.color_rgb);
    let mut pixels = vec![0.0f32; 3 * px * px];
    let plane = px * px;
    for y in 0..px {
        let wy = -((y as f32 + 0.5) - px as f32 * 0.5) * scale;
        for x in 0..px {
            let wx = ((x as f32 + 0.5) - px as f32 * 0.5) * scale;
            if object_contains(&staged, [wx, wy]) {
                let idx = y * px + x;
                pixels[idx] = color[0] as f32 / 255.0;
                pixels[plane + idx] = color[1] as f32 / 255.0;
                pixels[2 * plane + idx] = color[2] as f32 / 255.0;
            }
        }
    }
    GoalImage {
        pixels,
        render_px: cfg.render_px,
        target_object_id: obj.object_id,
    }
}

/// In-place horizontal flip of a channel-major [C][H][W] f32 tensor.
pub fn hflip_chw(data: &mut [f32], px: usize) {
    let channels = data.len() / (px * px);
    for c in 0..channels {
        for y in 0..px {
            let row = c * px * px + y * px;
            data[row..row + px].reverse();
        }
    }
}

fn hflip_chw_u8(data: &mut [u8], px: usize) {
    let channels = data.len() / (px * px);
    for c in 0..channels {
        for y in 0..px {
            let row = c * px * px + y * px;
            data[row..row + px].reverse();
        }
    }
}
