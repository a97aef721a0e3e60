//! Learner process: an RPC thread ingesting episodes into the private replay
//! buffer and serving the published model, plus the synchronous optimization
//! loop with mean All-Reduce across the learner group.
//!
//! Rank 0 drives the step cadence; a `stop` file in the run directory winds
//! the whole group down at a step boundary.

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::Rng;

use graspq_core::rngutil::{mix2, rng_from};
use graspq_core::train::{adam_update, compute_targets, loss_and_grad, maybe_mirror_batch, AdamState};
use graspq_core::{Network, ParamVector, ReplayBuffer};

use crate::allreduce::{AllReduceMember, AllReduceRoot};
use crate::config::ExperimentConfig;
use crate::wire::{
    decode_hello, deserialize_episode, encode_ack, encode_model_reply, encode_stats, read_frame,
    write_frame, Ack, Stats, WireError, ACK, GET_MODEL, HELLO, MODEL_REPLY, SET_EXPERIENCE, STATS,
};

pub struct LearnerOpts {
    pub rank: u32,
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
}

struct Shared {
    replay: ReplayBuffer,
    ingested: u64,
}

pub fn stop_path(run_dir: &Path) -> PathBuf {
    run_dir.join("stop")
}

fn handle_conn(
    stream: TcpStream,
    shared: &Mutex<Shared>,
    published: &Mutex<ParamVector>,
    expected_px: u32,
    running: &AtomicBool,
) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(1)));
    let _ = stream.set_nodelay(true);
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    while running.load(Ordering::Relaxed) {
        let (msg_type, payload) = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Io(e))
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            // framing errors lose stream sync; drop the connection
            Err(_) => return,
        };
        let reject = |writer: &mut TcpStream| {
            let ack = Ack {
                ok: false,
                buffer_len: 0,
                global_env_steps: 0,
            };
            write_frame(writer, ACK, &encode_ack(&ack)).is_ok()
        };
        let ok = match msg_type {
            HELLO => match decode_hello(&payload) {
                Ok(_) => {
                    let len = shared.lock().unwrap().replay.len() as u64;
                    let ack = Ack {
                        ok: true,
                        buffer_len: len,
                        global_env_steps: 0,
                    };
                    write_frame(&mut writer, ACK, &encode_ack(&ack)).is_ok()
                }
                Err(_) => reject(&mut writer),
            },
            GET_MODEL => {
                let pv = published.lock().unwrap().clone();
                write_frame(&mut writer, MODEL_REPLY, &encode_model_reply(false, &pv)).is_ok()
            }
            SET_EXPERIENCE => match deserialize_episode(&payload) {
                Ok(ep) if ep.render_px == expected_px => {
                    let mut sh = shared.lock().unwrap();
                    let n = ep.len() as u64;
                    match sh.replay.append_episode(ep) {
                        Ok(()) => {
                            sh.ingested += n;
                            let ack = Ack {
                                ok: true,
                                buffer_len: sh.replay.len() as u64,
                                global_env_steps: 0,
                            };
                            write_frame(&mut writer, ACK, &encode_ack(&ack)).is_ok()
                        }
                        Err(_) => reject(&mut writer),
                    }
                }
                _ => reject(&mut writer),
            },
            STATS => {
                let len = shared.lock().unwrap().replay.len() as u64;
                let version = published.lock().unwrap().version;
                let stats = Stats {
                    global_env_steps: 0,
                    learners: vec![(version, len)],
                };
                write_frame(&mut writer, STATS, &encode_stats(&stats)).is_ok()
            }
            // unknown types are protocol errors but must not kill the peer
            _ => reject(&mut writer),
        };
        if !ok {
            return;
        }
    }
}

fn spawn_rpc(
    port: u16,
    shared: Arc<Mutex<Shared>>,
    published: Arc<Mutex<ParamVector>>,
    expected_px: u32,
    running: Arc<AtomicBool>,
) -> Result<thread::JoinHandle<()>> {
    let listener =
        TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("binding rpc port {port}"))?;
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while running.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let shared = Arc::clone(&shared);
                    let published = Arc::clone(&published);
                    let running = Arc::clone(&running);
                    thread::spawn(move || {
                        handle_conn(stream, &shared, &published, expected_px, &running)
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(50));
                }
                Err(_) => break,
            }
        }
    }))
}

enum Group {
    Root(AllReduceRoot),
    Member(AllReduceMember),
}

pub fn run_learner(opts: LearnerOpts) -> Result<()> {
    let cfg = &opts.cfg;
    let rank = opts.rank;
    let k = cfg.num_learners;
    let spec = cfg.network_spec();
    let lcfg = cfg.learner_config();
    let cem = cfg.cem_config();
    let her = cfg.her_config();
    let bounds = cfg.bounds();
    let stop = stop_path(&opts.run_dir);

    let shared = Arc::new(Mutex::new(Shared {
        replay: ReplayBuffer::new(cfg.replay_capacity, lcfg.gamma),
        ingested: 0,
    }));
    let published = Arc::new(Mutex::new(ParamVector {
        version: 0,
        layout_id: spec.layout_id(),
        values: vec![0.0; spec.param_count()],
    }));
    let running = Arc::new(AtomicBool::new(true));
    let rpc = spawn_rpc(
        cfg.learner_port(rank),
        Arc::clone(&shared),
        Arc::clone(&published),
        cfg.render_px,
        Arc::clone(&running),
    )?;

    // rank 0 owns the initial weights; everyone starts bit-identical
    let mut group;
    let mut net: Network<f32>;
    if rank == 0 {
        let listener = TcpListener::bind(("127.0.0.1", cfg.allreduce_port()))
            .with_context(|| format!("binding all-reduce port {}", cfg.allreduce_port()))?;
        let mut root = AllReduceRoot::accept(&listener, k)?;
        net = Network::init(spec.clone(), mix2(cfg.seed, 0xbee5));
        root.broadcast_params(&net.to_params(0))?;
        group = Group::Root(root);
    } else {
        let addr = format!("127.0.0.1:{}", cfg.allreduce_port());
        let mut member = loop {
            match AllReduceMember::connect(&addr, rank) {
                Ok(m) => break m,
                Err(_) if !stop.exists() => thread::sleep(Duration::from_millis(200)),
                Err(e) => return Err(e),
            }
        };
        let pv = member.recv_params()?;
        net = Network::from_params(spec.clone(), &pv).map_err(|e| anyhow::anyhow!("{e}"))?;
        group = Group::Member(member);
    }
    *published.lock().unwrap() = net.to_params(0);

    let mut target_net = net.clone();
    let mut adam: AdamState<f32> = AdamState::new(net.params.len());
    let mut rng = rng_from(mix2(cfg.seed, 0x11ea0 + rank as u64));
    let start = Instant::now();
    let metrics_path = opts.run_dir.join(format!("metrics_rank{rank}.csv"));
    let mut metrics = csv_open(&metrics_path, "step,loss,mean_target,grad_norm,wallclock")?;

    let mut step: u64 = 0;
    let mut version: u64 = 0;
    loop {
        // pacing: wait for enough ingested data before the next step; rank 0
        // turns a stop request into a group-wide stop at this boundary
        let committed_step = match &mut group {
            Group::Root(root) => {
                let mut stopping = false;
                loop {
                    if stop.exists() {
                        stopping = true;
                        break;
                    }
                    let sh = shared.lock().unwrap();
                    let paced = sh.ingested >= (step + 1) * cfg.transitions_per_step;
                    let warm = sh.replay.len() >= cfg.replay_start;
                    drop(sh);
                    if paced && warm {
                        break;
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                if stopping {
                    root.broadcast_stop(step)?;
                    break;
                }
                step
            }
            Group::Member(member) => {
                let (s, stop_flag) = member.await_step()?;
                if stop_flag {
                    break;
                }
                // the step is committed; proceed as soon as the buffer is
                // warm, even if the stop file appears mid-wait
                loop {
                    let sh = shared.lock().unwrap();
                    let paced = sh.ingested >= (s + 1) * cfg.transitions_per_step;
                    let warm = sh.replay.len() >= cfg.replay_start;
                    drop(sh);
                    if warm && (paced || stop.exists()) {
                        break;
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                s
            }
        };

        let mut batch = {
            let sh = shared.lock().unwrap();
            sh.replay
                .sample_batch(cfg.local_batch, lcfg.frame_stack_n, cfg.replay_start, &her, &mut rng)
                .map_err(|e| anyhow::anyhow!("sampling: {e}"))?
        };
        if lcfg.mirror_enabled {
            maybe_mirror_batch(&mut batch, &mut rng);
        }
        let targets = compute_targets(&target_net, &batch, &cem, &bounds, &lcfg, &mut rng)
            .map_err(|e| anyhow::anyhow!("targets: {e}"))?;
        let (loss, grad) =
            loss_and_grad(&net, &batch, &targets, &bounds).map_err(|e| anyhow::anyhow!("grad: {e}"))?;
        if !loss.is_finite() {
            bail!("non-finite loss at step {committed_step}");
        }

        let mean = match &mut group {
            Group::Root(root) => root.reduce(committed_step, &grad)?,
            Group::Member(member) => member.submit(committed_step, &grad)?,
        };
        adam_update(
            &mut net.params,
            &mean,
            &mut adam,
            lcfg.adam_alpha,
            lcfg.beta1,
            lcfg.beta2,
            lcfg.adam_eps(),
        )
        .map_err(|e| anyhow::anyhow!("adam: {e:?}"))?;
        step = committed_step + 1;
        version += 1;
        *published.lock().unwrap() = net.to_params(version);
        if step % lcfg.target_sync_period == 0 {
            target_net = net.clone();
        }

        let grad_norm = mean.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        let mean_target =
            targets.iter().map(|t| *t as f64).sum::<f64>() / targets.len().max(1) as f64;
        use std::io::Write as _;
        writeln!(
            metrics,
            "{step},{loss:.6},{mean_target:.6},{grad_norm:.6},{:.3}",
            start.elapsed().as_secs_f64()
        )?;
        if rank == 0 && step % cfg.checkpoint_period_steps == 0 {
            metrics.flush()?;
            crate::wire::save_checkpoint(
                &opts.run_dir.join("latest.ckpt"),
                &spec,
                &net.to_params(version),
            )?;
        }
    }

    if rank == 0 {
        crate::wire::save_checkpoint(&opts.run_dir.join("final.ckpt"), &spec, &net.to_params(version))?;
        crate::wire::save_checkpoint(&opts.run_dir.join("latest.ckpt"), &spec, &net.to_params(version))?;
    }
    use std::io::Write as _;
    metrics.flush()?;
    std::fs::write(opts.run_dir.join(format!("learner{rank}.done")), b"done\n")?;
    running.store(false, Ordering::Relaxed);
    let _ = rpc.join();
    Ok(())
}

pub fn csv_open(path: &Path, header: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    use std::io::Write as _;
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

/// Seed helper shared by actors and the harness so episode seeds never
/// collide across processes.
pub fn episode_seed(run_seed: u64, actor_id: u32, counter: u64) -> u64 {
    mix2(mix2(run_seed, 0xac70 + actor_id as u64), counter)
}

/// Draws that should not correlate across ranks get their own stream.
pub fn rank_rng(seed: u64, salt: u64) -> impl Rng {
    rng_from(mix2(seed, salt))
}
