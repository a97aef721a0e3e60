//! Command-line entry point. Public subcommands drive experiments and
//! evaluation; hidden subcommands are the process roles the harness spawns.

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use graspq::actor::{run_actor, ActorOpts};
use graspq::config::{preset, ExperimentConfig};
use graspq::controller::{run_controller, ControllerOpts};
use graspq::harness::{evaluate_checkpoint, probe_scaling, resolve_run_dir, run_experiment};
use graspq::learner::{run_learner, LearnerOpts};
use graspq::synccheck::{decode_stream, run_bench_rank, run_distributed_rank, save_params};

#[derive(Parser)]
#[command(name = "graspq", about = "Distributed goal-conditioned grasping trainer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full training experiment (learners, controller, actors).
    Train {
        /// TOML config file; preset and flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named preset: untargeted, targeted-full, targeted-hl,
        /// targeted-plain, targeted-ablate-{h,m,f,l}.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        learners: Option<usize>,
        #[arg(long)]
        actors: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint greedily on test-split scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated object counts, e.g. 2,4,6.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2u32, 4, 6])]
        objects: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Config the checkpoint was trained with; defaults are inferred
        /// from the checkpoint's network shape.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure optimizer throughput for several learner group sizes.
    ProbeScaling {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        secs: u64,
        #[arg(long, default_value_t = 17_400)]
        port: u16,
        #[arg(long, default_value = "scaling.csv")]
        out: PathBuf,
    },
    #[command(hide = true)]
    Learner {
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    #[command(hide = true)]
    Controller {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    #[command(hide = true)]
    Actor {
        #[arg(long)]
        actor_id: u32,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Train on a recorded sample stream with k-way mean All-Reduce
    /// (equivalence check for synchronous SGD).
    #[command(hide = true)]
    SyncCheck {
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        learners: usize,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        alpha: f64,
        /// Rank 0 writes the final parameters here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    SyncBench {
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        learners: usize,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        secs: u64,
    },
}

fn load_role_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env_overrides();
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Train {
            config,
            preset: preset_name,
            learners,
            actors,
            seed,
            steps,
            run_dir,
        } => {
            let mut cfg = match (&config, &preset_name) {
                (Some(path), None) => ExperimentConfig::load(path)?,
                (None, Some(name)) => preset(name)?,
                (Some(path), Some(name)) => {
                    // preset first, then file fields win where the file sets them
                    let _ = preset(name)?;
                    ExperimentConfig::load(path)?
                }
                (None, None) => preset("targeted-full")?,
            };
            if let Some(k) = learners {
                cfg.num_learners = k;
            }
            if let Some(a) = actors {
                cfg.num_actors = a;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.total_env_steps = n;
            }
            cfg.apply_env_overrides();
            let name = preset_name.unwrap_or_else(|| "run".to_string());
            let dir = resolve_run_dir(run_dir, &format!("{name}-seed{}", cfg.seed));
            let summary = run_experiment(&cfg, &dir)?;
            println!(
                "run complete: env_steps={} best_success={:.3} final_success={:.3} dir={}",
                summary.env_steps,
                summary.best_success,
                summary.final_success,
                dir.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            objects,
            episodes,
            seed,
            config,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => {
                    let (spec, _) =
                        graspq::wire::load_checkpoint(&checkpoint).map_err(|e| anyhow!("{e}"))?;
                    let mut c = ExperimentConfig::default();
                    c.mode = if spec.targeted {
                        graspq::config::Mode::Targeted
                    } else {
                        graspq::config::Mode::Untargeted
                    };
                    c.her = spec.targeted;
                    c.frame_stack = spec.n_stack == 4;
                    c.render_px = spec.render_px as u32;
                    c
                }
            };
            let report = evaluate_checkpoint(&cfg, &checkpoint, episodes, &objects, seed)?;
            println!("object_count,success_rate,mean_len,mean_return");
            for row in &report.rows {
                println!(
                    "{},{:.4},{:.2},{:.4}",
                    row.object_count, row.success_rate, row.mean_episode_len, row.mean_return
                );
            }
            Ok(())
        }
        Cmd::ProbeScaling { k, secs, port, out } => {
            let rows = probe_scaling(&k, secs, port, &out)?;
            println!("k,steps_per_sec,transitions_per_sec");
            for (k, sps, tps) in rows {
                println!("{k},{sps:.3},{tps:.1}");
            }
            Ok(())
        }
        Cmd::Learner { rank, config, run_dir } => run_learner(LearnerOpts {
            rank,
            cfg: load_role_config(&config)?,
            run_dir,
        }),
        Cmd::Controller { config, run_dir } => run_controller(ControllerOpts {
            cfg: load_role_config(&config)?,
            run_dir,
        }),
        Cmd::Actor {
            actor_id,
            config,
            run_dir,
        } => run_actor(ActorOpts {
            actor_id,
            cfg: load_role_config(&config)?,
            run_dir,
        }),
        Cmd::SyncCheck {
            rank,
            learners,
            stream,
            port,
            seed,
            alpha,
            out,
        } => {
            let bytes = std::fs::read(&stream)?;
            let stream = decode_stream(&bytes).map_err(|e| anyhow!("{e}"))?;
            let params = run_distributed_rank(&stream, rank, learners, port, seed, alpha)?;
            if rank == 0 {
                if let Some(path) = out {
                    save_params(&path, &params)?;
                }
            }
            Ok(())
        }
        Cmd::SyncBench {
            rank,
            learners,
            port,
            secs,
        } => {
            let steps = run_bench_rank(rank, learners, port, secs, 16, 64)?;
            if rank == 0 {
                println!("steps {steps}");
            }
            Ok(())
        }
    }
}
