//! Experiment configuration: one TOML-serializable struct shared by the
//! harness and every spawned role, plus the named presets for the ablation
//! grid.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use graspq_core::cem::{ActionBounds, CemConfig, EpsilonSchedule};
use graspq_core::replay::HerConfig;
use graspq_core::train::LearnerConfig;
use graspq_core::world::WorldConfig;
use graspq_core::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Untargeted,
    Targeted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub her: bool,
    pub mirror: bool,
    pub frame_stack: bool,
    pub lowerbound: bool,
    pub num_learners: usize,
    pub num_actors: usize,
    pub total_env_steps: u64,
    /// Hard wall-clock cap; the run is stopped early if it is hit.
    pub max_wallclock_secs: u64,
    pub eval_episodes: usize,
    pub eval_period_env_steps: u64,
    pub checkpoint_period_steps: u64,
    pub clutter_sweep: Vec<u32>,
    pub seed: u64,
    pub min_objects: u32,
    pub max_objects: u32,
    pub render_px: u32,
    pub epsilon_final: f32,
    pub epsilon_decay_steps: u64,
    /// Within the ε arm, probability of taking the privileged scripted grasp
    /// action instead of a uniform random one. Off-policy bootstrap needs a
    /// source of successes; uniform exploration essentially never produces
    /// one here, so collection is seeded with scripted episodes.
    pub scripted_frac: f32,
    pub replay_capacity: usize,
    pub replay_start: usize,
    pub local_batch: usize,
    /// Learner pacing: one optimizer step per this many locally ingested
    /// transitions.
    pub transitions_per_step: u64,
    pub adam_alpha: f64,
    pub target_sync_period: u64,
    pub cem_iterations: usize,
    pub cem_population: usize,
    pub cem_elites: usize,
    /// Actor refreshes its model every this many episodes.
    pub model_refresh_episodes: u64,
    pub base_port: u16,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Targeted,
            her: true,
            mirror: true,
            frame_stack: true,
            lowerbound: true,
            num_learners: 2,
            num_actors: 16,
            total_env_steps: 300_000,
            max_wallclock_secs: 7_200,
            eval_episodes: 100,
            eval_period_env_steps: 25_000,
            checkpoint_period_steps: 250,
            clutter_sweep: vec![2, 3, 4, 5, 6, 7, 8, 9, 10],
            seed: 1,
            min_objects: 2,
            max_objects: 4,
            render_px: 32,
            epsilon_final: 0.2,
            epsilon_decay_steps: 150_000,
            scripted_frac: 0.5,
            replay_capacity: 100_000,
            replay_start: 1_000,
            local_batch: 64,
            transitions_per_step: 16,
            adam_alpha: 1e-3,
            target_sync_period: 500,
            cem_iterations: 3,
            cem_population: 64,
            cem_elites: 6,
            model_refresh_episodes: 1,
            base_port: 17_100,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Untargeted && self.her {
            bail!("untargeted mode has no goal to relabel; her must be off");
        }
        if self.num_learners == 0 || self.num_actors == 0 {
            bail!("need at least one learner and one actor");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            bail!("bad object range");
        }
        if self.cem_elites == 0 || self.cem_elites >= self.cem_population || self.cem_iterations == 0 {
            bail!("bad cem config");
        }
        if self.local_batch == 0 || self.replay_start == 0 {
            bail!("bad batch or warmup size");
        }
        self.world_config(self.min_objects, self.max_objects)
            .validate()
            .map_err(|e| anyhow::anyhow!("world config: {e}"))?;
        Ok(())
    }

    pub fn targeted(&self) -> bool {
        self.mode == Mode::Targeted
    }

    pub fn n_stack(&self) -> usize {
        if self.frame_stack {
            4
        } else {
            1
        }
    }

    pub fn world_config(&self, min_objects: u32, max_objects: u32) -> WorldConfig {
        WorldConfig {
            num_objects_range: (min_objects, max_objects),
            render_px: self.render_px,
            frame_stack: self.n_stack() as u32,
            targeted: self.targeted(),
            ..WorldConfig::default()
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.render_px as usize, self.n_stack(), self.targeted())
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            local_batch: self.local_batch,
            num_learners: self.num_learners,
            adam_alpha: self.adam_alpha,
            target_sync_period: self.target_sync_period,
            lowerbound_enabled: self.lowerbound,
            mirror_enabled: self.mirror,
            her_enabled: self.her,
            frame_stack_n: self.n_stack(),
            ..LearnerConfig::default()
        }
    }

    pub fn cem_config(&self) -> CemConfig {
        CemConfig {
            iterations: self.cem_iterations,
            population: self.cem_population,
            elites: self.cem_elites,
            ..CemConfig::default()
        }
    }

    pub fn her_config(&self) -> HerConfig {
        HerConfig {
            enabled: self.her,
            relabel_prob: 0.5,
        }
    }

    pub fn bounds(&self) -> ActionBounds {
        let w = WorldConfig::default();
        ActionBounds {
            delta_max: w.delta_max,
            rot_max: w.rot_max,
        }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: 1.0,
            end: self.epsilon_final,
            decay_steps: self.epsilon_decay_steps,
        }
    }

    // Port map, relative to `base_port` (overridable via GRASPQ_BASE_PORT):
    // all-reduce hub, then one RPC port per learner, then the controller.

    pub fn allreduce_port(&self) -> u16 {
        self.base_port
    }

    pub fn learner_port(&self, rank: u32) -> u16 {
        self.base_port + 1 + rank as u16
    }

    pub fn controller_port(&self) -> u16 {
        self.base_port + 64
    }

    pub fn learner_addrs(&self) -> Vec<String> {
        (0..self.num_learners as u32)
            .map(|r| format!("127.0.0.1:{}", self.learner_port(r)))
            .collect()
    }

    pub fn controller_addr(&self) -> String {
        format!("127.0.0.1:{}", self.controller_port())
    }

    pub fn apply_env_overrides(&mut self) {
        if let Some(p) = std::env::var("GRASPQ_BASE_PORT")
            .ok()
            .and_then(|v| v.parse::<u16>().ok())
        {
            self.base_port = p;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named experiment presets. `targeted-full` is the all-extensions variant;
/// `targeted-ablate-<x>` drops one extension; `targeted-hl` keeps only the
/// two key extensions and `targeted-plain` drops all four.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let cfg = match name {
        "untargeted" => ExperimentConfig {
            mode: Mode::Untargeted,
            her: false,
            mirror: true,
            frame_stack: false,
            lowerbound: true,
            ..base
        },
        "targeted-full" => base,
        "targeted-hl" => ExperimentConfig {
            mirror: false,
            frame_stack: false,
            ..base
        },
        "targeted-plain" => ExperimentConfig {
            her: false,
            mirror: false,
            frame_stack: false,
            lowerbound: false,
            ..base
        },
        "targeted-ablate-h" => ExperimentConfig { her: false, ..base },
        "targeted-ablate-m" => ExperimentConfig { mirror: false, ..base },
        "targeted-ablate-f" => ExperimentConfig { frame_stack: false, ..base },
        "targeted-ablate-l" => ExperimentConfig { lowerbound: false, ..base },
        other => bail!("unknown preset {other}"),
    };
    Ok(cfg)
}
