//! Controller process: caches the model for actors and routes episodes to
//! the learner whose replay buffer is currently smallest, keeping the shards
//! balanced. It is the only process that knows the global environment step
//! count, which actors use for the shared ε schedule.

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};

use crate::config::ExperimentConfig;
use crate::learner::stop_path;
use crate::wire::{
    decode_ack, decode_model_reply, deserialize_episode, encode_ack, encode_hello, encode_stats,
    read_frame, write_frame, Ack, Stats, WireError, ACK, GET_MODEL, HELLO, MODEL_REPLY,
    ROLE_HARNESS, SET_EXPERIENCE, STATS,
};

pub const MODEL_FRESHNESS: Duration = Duration::from_secs(5);

pub struct ControllerOpts {
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
}

struct LearnerEntry {
    addr: String,
    buffer_len: u64,
    version: u64,
}

struct State {
    learners: Vec<LearnerEntry>,
    /// Cached raw MODEL_REPLY payload (stale flag rewritable in place).
    cache: Option<(Instant, Vec<u8>, u64)>,
    rr_next: usize,
    global_env_steps: u64,
}

/// One request/response exchange on a fresh connection.
fn rpc_once(addr: &str, msg_type: u8, payload: &[u8]) -> Result<(u8, Vec<u8>), WireError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut writer = stream.try_clone()?;
    write_frame(&mut writer, msg_type, payload)?;
    read_frame(&mut BufReader::new(stream))
}

/// Fetch-through on the model cache: round-robin over learners, serving a
/// stale copy (flagged) only when every learner is unreachable.
fn cached_model(state: &Mutex<State>) -> Option<Vec<u8>> {
    let (n, start, fresh) = {
        let st = state.lock().unwrap();
        let fresh = st
            .cache
            .as_ref()
            .is_some_and(|(at, _, _)| at.elapsed() < MODEL_FRESHNESS);
        (st.learners.len(), st.rr_next, fresh)
    };
    if fresh {
        return state.lock().unwrap().cache.as_ref().map(|(_, b, _)| b.clone());
    }
    for i in 0..n {
        let idx = (start + i) % n;
        let addr = state.lock().unwrap().learners[idx].addr.clone();
        if let Ok((MODEL_REPLY, payload)) = rpc_once(&addr, GET_MODEL, &[]) {
            if let Ok((_, pv)) = decode_model_reply(&payload) {
                let mut st = state.lock().unwrap();
                st.learners[idx].version = pv.version;
                st.rr_next = (idx + 1) % n;
                st.cache = Some((Instant::now(), payload.clone(), pv.version));
                return Some(payload);
            }
        }
    }
    let st = state.lock().unwrap();
    st.cache.as_ref().map(|(_, b, _)| {
        let mut stale = b.clone();
        stale[0] = 1;
        stale
    })
}

/// Route to the learner with the smallest known buffer, retrying
/// next-smallest on failure. Returns the accepting learner's buffer length.
fn route_episode(state: &Mutex<State>, payload: &[u8], n_transitions: u64) -> Option<u64> {
    let mut order: Vec<usize> = {
        let st = state.lock().unwrap();
        let mut idx: Vec<usize> = (0..st.learners.len()).collect();
        idx.sort_by_key(|&i| (st.learners[i].buffer_len, i));
        idx
    };
    for idx in order.drain(..) {
        let addr = state.lock().unwrap().learners[idx].addr.clone();
        match rpc_once(&addr, SET_EXPERIENCE, payload) {
            Ok((ACK, reply)) => {
                if let Ok(ack) = decode_ack(&reply) {
                    if ack.ok {
                        let mut st = state.lock().unwrap();
                        st.learners[idx].buffer_len = ack.buffer_len;
                        st.global_env_steps += n_transitions;
                        return Some(ack.buffer_len);
                    }
                }
            }
            _ => continue,
        }
    }
    None
}

fn handle_conn(stream: TcpStream, state: &Mutex<State>, running: &AtomicBool) {
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
            HELLO => {
                let steps = state.lock().unwrap().global_env_steps;
                let ack = Ack {
                    ok: true,
                    buffer_len: 0,
                    global_env_steps: steps,
                };
                write_frame(&mut writer, ACK, &encode_ack(&ack)).is_ok()
            }
            GET_MODEL => match cached_model(state) {
                Some(reply) => write_frame(&mut writer, MODEL_REPLY, &reply).is_ok(),
                None => reject(&mut writer),
            },
            SET_EXPERIENCE => match deserialize_episode(&payload) {
                Ok(ep) => match route_episode(state, &payload, ep.len() as u64) {
                    Some(buffer_len) => {
                        let steps = state.lock().unwrap().global_env_steps;
                        let ack = Ack {
                            ok: true,
                            buffer_len,
                            global_env_steps: steps,
                        };
                        write_frame(&mut writer, ACK, &encode_ack(&ack)).is_ok()
                    }
                    None => reject(&mut writer),
                },
                Err(_) => reject(&mut writer),
            },
            STATS => {
                let st = state.lock().unwrap();
                let stats = Stats {
                    global_env_steps: st.global_env_steps,
                    learners: st.learners.iter().map(|l| (l.version, l.buffer_len)).collect(),
                };
                drop(st);
                write_frame(&mut writer, STATS, &encode_stats(&stats)).is_ok()
            }
            _ => reject(&mut writer),
        };
        if !ok {
            return;
        }
    }
}

pub fn run_controller(opts: ControllerOpts) -> Result<()> {
    let cfg = &opts.cfg;
    let stop = stop_path(&opts.run_dir);
    let state = Arc::new(Mutex::new(State {
        learners: cfg
            .learner_addrs()
            .into_iter()
            .map(|addr| LearnerEntry {
                addr,
                buffer_len: 0,
                version: 0,
            })
            .collect(),
        cache: None,
        rr_next: 0,
        global_env_steps: 0,
    }));
    let running = Arc::new(AtomicBool::new(true));
    let listener = TcpListener::bind(("127.0.0.1", cfg.controller_port()))
        .with_context(|| format!("binding controller port {}", cfg.controller_port()))?;
    listener.set_nonblocking(true)?;
    while !stop.exists() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let state = Arc::clone(&state);
                let running = Arc::clone(&running);
                thread::spawn(move || handle_conn(stream, &state, &running));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    }
    running.store(false, Ordering::Relaxed);
    std::fs::write(opts.run_dir.join("controller.done"), b"done\n")?;
    Ok(())
}

/// Blocking STATS query used by actors and the harness monitor.
pub fn fetch_stats(addr: &str) -> Result<Stats, WireError> {
    match rpc_once(addr, STATS, &[])? {
        (STATS, payload) => Ok(crate::wire::decode_stats(&payload)?),
        (t, _) => Err(WireError::UnknownType(t)),
    }
}

/// Announce the harness to the controller; currently used as a liveness probe.
pub fn probe(addr: &str) -> Result<u64, WireError> {
    match rpc_once(addr, HELLO, &encode_hello(ROLE_HARNESS, 0))? {
        (ACK, payload) => Ok(decode_ack(&payload)?.global_env_steps),
        (t, _) => Err(WireError::UnknownType(t)),
    }
}
