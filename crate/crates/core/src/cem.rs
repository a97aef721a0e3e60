//! Cross-entropy maximization over the hybrid action space, plus the
//! ε-greedy exploration schedule.
//!
//! Each population member is either a gripper toggle (with the current
//! toggle prior) or a Gaussian pose delta clamped to bounds. Elites refit
//! the Gaussian and the toggle prior; the best action seen anywhere is
//! returned.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::nn::normal_sample;
use crate::world::GraspAction;

#[derive(Debug, Clone, Copy)]
pub struct ActionBounds {
    pub delta_max: f32,
    pub rot_max: f32,
}

impl ActionBounds {
    pub fn as_array(&self) -> [f32; 4] {
        [self.delta_max, self.delta_max, self.delta_max, self.rot_max]
    }
}

#[derive(Debug, Clone)]
pub struct CemConfig {
    pub iterations: usize,
    pub population: usize,
    pub elites: usize,
    pub init_stddev: [f32; 4],
    pub toggle_prior: f32,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            iterations: 3,
            population: 64,
            elites: 6,
            init_stddev: [0.05, 0.05, 0.05, 0.2],
            toggle_prior: 0.1,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> bool {
        self.iterations >= 1 && self.elites >= 1 && self.elites < self.population
    }
}

fn sample_member<R: Rng>(
    rng: &mut R,
    toggle_prior: f32,
    mean: &[f32; 4],
    std: &[f32; 4],
    bounds: &ActionBounds,
) -> GraspAction {
    if rng.gen::<f32>() < toggle_prior {
        return GraspAction::GripperToggle;
    }
    let mut d = [0.0f32; 4];
    let b = bounds.as_array();
    for i in 0..4 {
        let n: f32 = normal_sample(rng);
        d[i] = (mean[i] + std[i] * n).clamp(-b[i], b[i]);
    }
    GraspAction::PoseDelta {
        dx: d[0],
        dy: d[1],
        dz: d[2],
        dtheta: d[3],
    }
}

/// Uniform exploration action: toggle with `toggle_prior`, otherwise a
/// uniform pose delta inside the bounds.
pub fn random_action<R: Rng>(rng: &mut R, toggle_prior: f32, bounds: &ActionBounds) -> GraspAction {
    if rng.gen::<f32>() < toggle_prior {
        return GraspAction::GripperToggle;
    }
    let b = bounds.as_array();
    GraspAction::PoseDelta {
        dx: rng.gen_range(-b[0]..=b[0]),
        dy: rng.gen_range(-b[1]..=b[1]),
        dz: rng.gen_range(-b[2]..=b[2]),
        dtheta: rng.gen_range(-b[3]..=b[3]),
    }
}

/// Maximize `score` over the hybrid action space. Never returns an
/// out-of-bounds action.
pub fn cem_maximize<R, S>(
    mut score: S,
    bounds: &ActionBounds,
    cfg: &CemConfig,
    rng: &mut R,
) -> (GraspAction, f32)
where
    R: Rng,
    S: FnMut(&GraspAction) -> f32,
{
    debug_assert!(cfg.validate());
    let mut mean = [0.0f32; 4];
    let mut std = cfg.init_stddev;
    let mut toggle_prior = cfg.toggle_prior;
    let mut best: Option<(f32, GraspAction)> = None;

    // per-iteration lower envelope on std: geometric decay from the initial
    // scale down to 1% of it at the final iteration, so no dimension can
    // collapse early while the mean is still converging
    let floor_decay = if cfg.iterations > 1 {
        (1e-2f32).powf(1.0 / (cfg.iterations as f32 - 1.0))
    } else {
        1.0
    };
    let mut scored: Vec<(f32, GraspAction)> = Vec::with_capacity(cfg.population);
    for it in 0..cfg.iterations {
        scored.clear();
        for _ in 0..cfg.population {
            let a = sample_member(rng, toggle_prior, &mean, &std, bounds);
            let s = score(&a);
            scored.push((s, a));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        let elites = &scored[..cfg.elites];
        if best.as_ref().map_or(true, |(bq, _)| elites[0].0 > *bq) {
            best = Some((elites[0].0, elites[0].1));
        }
        let cont: Vec<[f32; 4]> = elites
            .iter()
            .filter_map(|(_, a)| match *a {
                GraspAction::PoseDelta { dx, dy, dz, dtheta } => Some([dx, dy, dz, dtheta]),
                GraspAction::GripperToggle => None,
            })
            .collect();
        let toggles = cfg.elites - cont.len();
        // keep both arms alive across iterations
        toggle_prior = (toggles as f32 / cfg.elites as f32).clamp(0.05, 0.95);
        if !cont.is_empty() {
            for i in 0..4 {
                let m: f32 = cont.iter().map(|d| d[i]).sum::<f32>() / cont.len() as f32;
                let v: f32 =
                    cont.iter().map(|d| (d[i] - m) * (d[i] - m)).sum::<f32>() / cont.len() as f32;
                // the covering term keeps the cloud wide while the mean is
                // still moving, preventing premature collapse off-optimum
                let shift = (m - mean[i]).abs();
                let floor = cfg.init_stddev[i] * floor_decay.powi(it as i32 + 1);
                mean[i] = m;
                std[i] = v
                    .sqrt()
                    .max(0.5 * shift)
                    .max(floor)
                    .max(1e-3 * bounds.as_array()[i]);
            }
        }
    }
    let (q, a) = best.expect("population nonempty");
    (a, q)
}

/// Linear ε decay: ε0 at step 0 down to ε_final at `decay_steps`, constant after.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonSchedule {
    pub start: f32,
    pub end: f32,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.2,
            decay_steps: 800_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn epsilon(&self, global_step: u64) -> f32 {
        let frac = if self.decay_steps == 0 {
            1.0
        } else {
            (global_step as f32 / self.decay_steps as f32).min(1.0)
        };
        self.start - (self.start - self.end) * frac
    }
}

/// ε-greedy action selection over a scorer (usually the Q head on a cached
/// trunk embedding).
#[allow(clippy::too_many_arguments)]
pub fn act_epsilon_greedy<R, S>(
    score: S,
    bounds: &ActionBounds,
    cfg: &CemConfig,
    schedule: &EpsilonSchedule,
    global_step: u64,
    rng: &mut R,
) -> GraspAction
where
    R: Rng,
    S: FnMut(&GraspAction) -> f32,
{
    let eps = schedule.epsilon(global_step);
    if rng.gen::<f32>() < eps {
        random_action(rng, cfg.toggle_prior, bounds)
    } else {
        cem_maximize(score, bounds, cfg, rng).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::rng_from;

    #[test]
    fn flat_objective_returns_constant() {
        let mut rng = rng_from(1);
        let bounds = ActionBounds {
            delta_max: 0.1,
            rot_max: 0.4,
        };
        let (_, q) = cem_maximize(|_| 2.5, &bounds, &CemConfig::default(), &mut rng);
        assert_eq!(q, 2.5);
    }

    #[test]
    fn dominant_toggle_wins() {
        let mut rng = rng_from(2);
        let bounds = ActionBounds {
            delta_max: 0.1,
            rot_max: 0.4,
        };
        let (a, q) = cem_maximize(
            |a| match a {
                GraspAction::GripperToggle => 1.0,
                _ => 0.0,
            },
            &bounds,
            &CemConfig::default(),
            &mut rng,
        );
        assert_eq!(a, GraspAction::GripperToggle);
        assert_eq!(q, 1.0);
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let s = EpsilonSchedule {
            start: 1.0,
            end: 0.2,
            decay_steps: 800_000,
        };
        assert_eq!(s.epsilon(0), 1.0);
        assert!((s.epsilon(800_000) - 0.2).abs() < 1e-6);
        assert!((s.epsilon(2_000_000) - 0.2).abs() < 1e-6);
        assert!((s.epsilon(400_000) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn never_out_of_bounds() {
        let mut rng = rng_from(3);
        let bounds = ActionBounds {
            delta_max: 0.1,
            rot_max: 0.4,
        };
        for seed in 0..50u64 {
            let mut r2 = rng_from(seed);
            let (a, _) = cem_maximize(|_| rng.gen::<f32>(), &bounds, &CemConfig::default(), &mut r2);
            if let GraspAction::PoseDelta { dx, dy, dz, dtheta } = a {
                assert!(dx.abs() <= 0.1 && dy.abs() <= 0.1 && dz.abs() <= 0.1);
                assert!(dtheta.abs() <= 0.4);
            }
        }
    }
}
