//! Experiment orchestration: spawns the learner/controller/actor processes,
//! monitors progress through the controller's STATS channel, evaluates
//! checkpoints on held-out objects, and emits all run artifacts (metrics and
//! evaluation CSVs, checkpoints, config, summary).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use graspq_core::rngutil::{mix2, rng_from};
use graspq_core::world::{Split, World};
use graspq_core::Network;

use crate::actor::greedy_action;
use crate::config::ExperimentConfig;
use crate::controller::fetch_stats;
use crate::learner::{csv_open, stop_path};
use crate::wire::load_checkpoint;

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub object_count: u32,
    pub success_rate: f64,
    pub mean_episode_len: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint_version: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Success pooled over all object counts.
    pub fn overall_success(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.success_rate).sum::<f64>() / self.rows.len() as f64
    }
}

/// Greedy evaluation on fresh test-split scenes. An `object_count` of 0
/// means "use the config's training range".
pub fn evaluate(
    cfg: &ExperimentConfig,
    net: &Network<f32>,
    version: u64,
    n_episodes: usize,
    object_counts: &[u32],
    eval_seed: u64,
) -> Result<EvalReport> {
    let bounds = cfg.bounds();
    let cem = cfg.cem_config();
    let mut rows = Vec::new();
    for &count in object_counts {
        let wcfg = if count == 0 {
            cfg.world_config(cfg.min_objects, cfg.max_objects)
        } else {
            cfg.world_config(count, count)
        };
        let mut successes = 0usize;
        let mut total_len = 0usize;
        let mut total_return = 0.0f64;
        for i in 0..n_episodes {
            let seed = mix2(eval_seed, ((count as u64) << 32) | i as u64);
            let mut rng = rng_from(mix2(seed, 0xe7a1));
            let (mut world, mut obs, goal) =
                World::reset(wcfg.clone(), seed, Split::Test).map_err(|e| anyhow!("{e}"))?;
            let goal_opt = cfg.targeted().then_some(&goal);
            let mut last_reward = 0.0f32;
            let mut ep_return = 0.0f64;
            while !world.is_done() {
                let a = greedy_action(net, &obs, goal_opt, &bounds, &cem, &mut rng)?;
                let r = world.step(a).map_err(|e| anyhow!("{e}"))?;
                obs = r.obs;
                last_reward = r.reward;
                ep_return += r.reward as f64;
            }
            // success iff the terminal reward is the 1 - p payout
            if last_reward > 0.0 {
                successes += 1;
            }
            total_len += world.steps_taken() as usize;
            total_return += ep_return;
        }
        rows.push(EvalRow {
            object_count: count,
            success_rate: successes as f64 / n_episodes as f64,
            mean_episode_len: total_len as f64 / n_episodes as f64,
            mean_return: total_return / n_episodes as f64,
        });
    }
    Ok(EvalReport {
        checkpoint_version: version,
        rows,
    })
}

pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    n_episodes: usize,
    object_counts: &[u32],
    eval_seed: u64,
) -> Result<EvalReport> {
    let (spec, pv) = load_checkpoint(ckpt).map_err(|e| anyhow!("{e}"))?;
    let net = Network::from_params(spec, &pv).map_err(|e| anyhow!("{e}"))?;
    evaluate(cfg, &net, pv.version, n_episodes, object_counts, eval_seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_steps: u64,
    pub best_success: f64,
    pub best_version: u64,
    pub final_success: f64,
    pub wallclock_secs: f64,
    pub stopped_early: bool,
}

struct Proc {
    name: String,
    child: Child,
}

/// Executable to spawn for the process roles. Defaults to the running
/// binary; GRASPQ_BIN overrides it for callers that are not the trainer
/// binary themselves (integration tests, external harnesses).
pub fn role_exe() -> Result<PathBuf> {
    if let Ok(p) = std::env::var("GRASPQ_BIN") {
        return Ok(PathBuf::from(p));
    }
    Ok(std::env::current_exe()?)
}

fn spawn_role(exe: &Path, run_dir: &Path, name: &str, args: &[String]) -> Result<Proc> {
    let logs = run_dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    let log = std::fs::File::create(logs.join(format!("{name}.log")))?;
    let child = Command::new(exe)
        .args(args)
        .stdout(Stdio::from(log.try_clone()?))
        .stderr(Stdio::from(log))
        .spawn()
        .with_context(|| format!("spawning {name}"))?;
    Ok(Proc {
        name: name.to_string(),
        child,
    })
}

fn teardown(run_dir: &Path, procs: &mut Vec<Proc>, grace: Duration) {
    let _ = std::fs::write(stop_path(run_dir), b"stop\n");
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        if procs.iter_mut().all(|p| matches!(p.child.try_wait(), Ok(Some(_)))) {
            return;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    for p in procs.iter_mut() {
        let _ = p.child.kill();
        let _ = p.child.wait();
    }
}

/// Launch the full topology for one experiment and supervise it to the
/// environment-step budget (or the wall-clock cap), evaluating checkpoints
/// as they appear. Returns the run summary, which is also written to
/// `summary.toml` in the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let stop = stop_path(run_dir);
    if stop.exists() {
        std::fs::remove_file(&stop)?;
    }
    let config_path = run_dir.join("config.toml");
    cfg.save(&config_path)?;
    let exe = role_exe()?;
    let start = Instant::now();

    let common = |extra: &[String]| -> Vec<String> {
        let mut v = extra.to_vec();
        v.push("--config".into());
        v.push(config_path.display().to_string());
        v.push("--run-dir".into());
        v.push(run_dir.display().to_string());
        v
    };
    let mut procs: Vec<Proc> = Vec::new();
    for rank in 0..cfg.num_learners as u32 {
        procs.push(spawn_role(
            &exe,
            run_dir,
            &format!("learner{rank}"),
            &common(&["learner".into(), "--rank".into(), rank.to_string()]),
        )?);
    }
    procs.push(spawn_role(&exe, run_dir, "controller", &common(&["controller".into()]))?);
    for id in 0..cfg.num_actors as u32 {
        procs.push(spawn_role(
            &exe,
            run_dir,
            &format!("actor{id}"),
            &common(&["actor".into(), "--actor-id".into(), id.to_string()]),
        )?);
    }

    let controller_addr = cfg.controller_addr();
    let mut eval_csv = csv_open(
        &run_dir.join("eval.csv"),
        "env_steps,version,success_rate,mean_len,mean_return",
    )?;
    let mut best = (0.0f64, 0u64);
    let mut next_eval = cfg.eval_period_env_steps;
    let mut env_steps = 0u64;
    let mut stopped_early = false;
    let eval_seed = mix2(cfg.seed, 0x5eed);

    loop {
        std::thread::sleep(Duration::from_secs(2));
        let mut failed = None;
        for p in procs.iter_mut() {
            if let Ok(Some(status)) = p.child.try_wait() {
                if !status.success() && !stop.exists() {
                    failed = Some((p.name.clone(), status));
                }
            }
        }
        if let Some((name, status)) = failed {
            teardown(run_dir, &mut procs, Duration::from_secs(60));
            bail!(
                "{name} exited early with {status}; see {}",
                run_dir.join("logs").display()
            );
        }
        if let Ok(stats) = fetch_stats(&controller_addr) {
            env_steps = stats.global_env_steps;
        }
        if env_steps >= next_eval {
            next_eval += cfg.eval_period_env_steps;
            let ckpt = run_dir.join("latest.ckpt");
            if ckpt.exists() {
                let report = evaluate_checkpoint(cfg, &ckpt, cfg.eval_episodes, &[0], eval_seed)?;
                let row = &report.rows[0];
                writeln!(
                    eval_csv,
                    "{env_steps},{},{:.4},{:.2},{:.4}",
                    report.checkpoint_version, row.success_rate, row.mean_episode_len, row.mean_return
                )?;
                eval_csv.flush()?;
                if row.success_rate >= best.0 {
                    best = (row.success_rate, report.checkpoint_version);
                    std::fs::copy(&ckpt, run_dir.join("best.ckpt"))?;
                }
            }
        }
        if env_steps >= cfg.total_env_steps {
            break;
        }
        if start.elapsed().as_secs() >= cfg.max_wallclock_secs {
            stopped_early = true;
            break;
        }
    }
    teardown(run_dir, &mut procs, Duration::from_secs(180));

    // final checkpoint gets the same evaluation treatment
    let mut final_success = 0.0;
    let final_ckpt = run_dir.join("final.ckpt");
    if final_ckpt.exists() {
        let report = evaluate_checkpoint(cfg, &final_ckpt, cfg.eval_episodes, &[0], eval_seed)?;
        let row = &report.rows[0];
        final_success = row.success_rate;
        writeln!(
            eval_csv,
            "{env_steps},{},{:.4},{:.2},{:.4}",
            report.checkpoint_version, row.success_rate, row.mean_episode_len, row.mean_return
        )?;
        eval_csv.flush()?;
        if row.success_rate >= best.0 {
            best = (row.success_rate, report.checkpoint_version);
            std::fs::copy(&final_ckpt, run_dir.join("best.ckpt"))?;
        }
    }

    let summary = RunSummary {
        env_steps,
        best_success: best.0,
        best_version: best.1,
        final_success,
        wallclock_secs: start.elapsed().as_secs_f64(),
        stopped_early,
    };
    std::fs::write(run_dir.join("summary.toml"), toml::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(run_dir.join("summary.toml"))?;
    Ok(toml::from_str(&text)?)
}

/// Throughput probe: for each group size, run the synthetic benchmark as
/// real subprocesses and report optimizer steps and transitions per second.
pub fn probe_scaling(ks: &[usize], secs: u64, base_port: u16, out: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let exe = role_exe()?;
    let local_batch = 64usize;
    let mut rows = Vec::new();
    for (i, &k) in ks.iter().enumerate() {
        let port = base_port + i as u16;
        let mut children: Vec<Child> = Vec::new();
        for rank in (1..k as u32).rev() {
            children.push(
                Command::new(&exe)
                    .args([
                        "sync-bench".to_string(),
                        "--rank".into(),
                        rank.to_string(),
                        "--learners".into(),
                        k.to_string(),
                        "--port".into(),
                        port.to_string(),
                        "--secs".into(),
                        secs.to_string(),
                    ])
                    .stdout(Stdio::null())
                    .stderr(Stdio::inherit())
                    .spawn()?,
            );
        }
        let steps = crate::synccheck::run_bench_rank(0, k, port, secs, 16, local_batch)?;
        for mut c in children {
            let status = c.wait()?;
            if !status.success() {
                bail!("benchmark member failed: {status}");
            }
        }
        let sps = steps as f64 / secs as f64;
        rows.push((k, sps, sps * (local_batch * k) as f64));
    }
    let mut csv = csv_open(out, "k,steps_per_sec,transitions_per_sec")?;
    for (k, sps, tps) in &rows {
        writeln!(csv, "{k},{sps:.3},{tps:.1}")?;
    }
    csv.flush()?;
    Ok(rows)
}

/// Run directory helper honoring the GRASPQ_RUN_DIR override.
pub fn resolve_run_dir(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p;
    }
    let base = std::env::var("GRASPQ_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("runs"));
    base.join(name)
}
