//! Synchronous gradient All-Reduce over local TCP streams.
//!
//! Rank 0 is the hub: it announces each step, collects one gradient per
//! member, accumulates them in rank order (so the mean is bit-reproducible),
//! and broadcasts the result. A step announcement can instead carry a stop
//! flag, which is how a run winds down without racing on shared state.

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};

use anyhow::{bail, Context, Result};

use graspq_core::train::reduce_mean_rank_order;
use graspq_core::ParamVector;

use crate::wire::{put_f32s, read_frame, write_frame, Rd};

pub const AR_HELLO: u8 = 10;
pub const AR_PARAMS: u8 = 11;
pub const AR_STEP: u8 = 12;
pub const AR_GRAD: u8 = 13;
pub const AR_MEAN: u8 = 14;

// Group streams carry no read timeout. A member legitimately stalls for as
// long as its replay pacing starves it of experience (minutes under heavy
// CPU contention), a dead peer surfaces as EOF regardless, and run-level
// hangs are bounded by the harness wallclock cap.

fn encode_params(pv: &ParamVector) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&pv.version.to_le_bytes());
    out.extend_from_slice(&pv.layout_id.to_le_bytes());
    out.extend_from_slice(&(pv.values.len() as u32).to_le_bytes());
    put_f32s(&mut out, &pv.values);
    out
}

fn decode_params(payload: &[u8]) -> Result<ParamVector> {
    let mut rd = Rd::new(payload);
    let version = rd.u64()?;
    let layout_id = rd.u64()?;
    let n = rd.u32()? as usize;
    let values = rd.f32s(n)?;
    rd.finish()?;
    Ok(ParamVector {
        version,
        layout_id,
        values,
    })
}

fn encode_vec(step: u64, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f32s(&mut out, values);
    out
}

fn decode_vec(payload: &[u8]) -> Result<(u64, Vec<f32>)> {
    let mut rd = Rd::new(payload);
    let step = rd.u64()?;
    let n = rd.u32()? as usize;
    let values = rd.f32s(n)?;
    rd.finish()?;
    Ok((step, values))
}

struct Peer {
    rank: u32,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Rank-0 side of the group.
pub struct AllReduceRoot {
    peers: Vec<Peer>,
}

impl AllReduceRoot {
    /// Accept the other `k - 1` members and order them by rank.
    pub fn accept(listener: &TcpListener, k: usize) -> Result<Self> {
        let mut peers = Vec::with_capacity(k.saturating_sub(1));
        for _ in 1..k {
            let (stream, _) = listener.accept().context("accepting all-reduce member")?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let (t, payload) = read_frame(&mut reader)?;
            if t != AR_HELLO {
                bail!("expected member hello, got type {t}");
            }
            let mut rd = Rd::new(&payload);
            let rank = rd.u32()?;
            rd.finish()?;
            peers.push(Peer {
                rank,
                reader,
                writer: stream,
            });
        }
        peers.sort_by_key(|p| p.rank);
        for w in peers.windows(2) {
            if w[0].rank == w[1].rank {
                bail!("duplicate member rank {}", w[0].rank);
            }
        }
        Ok(AllReduceRoot { peers })
    }

    pub fn broadcast_params(&mut self, pv: &ParamVector) -> Result<()> {
        let payload = encode_params(pv);
        for p in &mut self.peers {
            write_frame(&mut p.writer, AR_PARAMS, &payload)?;
        }
        Ok(())
    }

    /// Announce a stop; members exit their loops without contributing.
    pub fn broadcast_stop(&mut self, step: u64) -> Result<()> {
        let mut payload = step.to_le_bytes().to_vec();
        payload.push(1);
        for p in &mut self.peers {
            write_frame(&mut p.writer, AR_STEP, &payload)?;
        }
        Ok(())
    }

    /// One synchronous step: announce, collect every member's gradient,
    /// reduce in rank order with rank 0 first, broadcast the mean.
    pub fn reduce(&mut self, step: u64, own_grad: &[f32]) -> Result<Vec<f32>> {
        let mut payload = step.to_le_bytes().to_vec();
        payload.push(0);
        for p in &mut self.peers {
            write_frame(&mut p.writer, AR_STEP, &payload)?;
        }
        let mut gathered: Vec<Vec<f32>> = Vec::with_capacity(self.peers.len());
        for p in &mut self.peers {
            let (t, payload) = read_frame(&mut p.reader)?;
            if t != AR_GRAD {
                bail!("rank {}: expected gradient, got type {t}", p.rank);
            }
            let (peer_step, values) = decode_vec(&payload)?;
            if peer_step != step {
                bail!("rank {}: step {peer_step} != {step}", p.rank);
            }
            if values.len() != own_grad.len() {
                bail!("rank {}: gradient length mismatch", p.rank);
            }
            gathered.push(values);
        }
        let mut contribs: Vec<&[f32]> = Vec::with_capacity(1 + gathered.len());
        contribs.push(own_grad);
        contribs.extend(gathered.iter().map(|g| g.as_slice()));
        let mean = reduce_mean_rank_order(&contribs);
        let out = encode_vec(step, &mean);
        for p in &mut self.peers {
            write_frame(&mut p.writer, AR_MEAN, &out)?;
        }
        Ok(mean)
    }
}

/// Non-zero rank side of the group.
pub struct AllReduceMember {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl AllReduceMember {
    pub fn connect(addr: &str, rank: u32) -> Result<Self> {
        let stream = TcpStream::connect(addr).with_context(|| format!("connecting to hub {addr}"))?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        write_frame(&mut writer, AR_HELLO, &rank.to_le_bytes())?;
        Ok(AllReduceMember {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn recv_params(&mut self) -> Result<ParamVector> {
        let (t, payload) = read_frame(&mut self.reader)?;
        if t != AR_PARAMS {
            bail!("expected initial parameters, got type {t}");
        }
        decode_params(&payload)
    }

    /// Block until the hub announces the next step; `(step, stop)`.
    pub fn await_step(&mut self) -> Result<(u64, bool)> {
        let (t, payload) = read_frame(&mut self.reader)?;
        if t != AR_STEP {
            bail!("expected step announcement, got type {t}");
        }
        let mut rd = Rd::new(&payload);
        let step = rd.u64()?;
        let stop = rd.u8()? != 0;
        rd.finish()?;
        Ok((step, stop))
    }

    pub fn submit(&mut self, step: u64, grad: &[f32]) -> Result<Vec<f32>> {
        write_frame(&mut self.writer, AR_GRAD, &encode_vec(step, grad))?;
        let (t, payload) = read_frame(&mut self.reader)?;
        if t != AR_MEAN {
            bail!("expected reduced mean, got type {t}");
        }
        let (got_step, mean) = decode_vec(&payload)?;
        if got_step != step {
            bail!("mean for step {got_step}, expected {step}");
        }
        Ok(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use graspq_core::rngutil::rng_from;
    use rand::Rng;
    use std::thread;

    #[test]
    fn three_rank_reduce_matches_the_sequential_oracle() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let n = 257;
        let mut rng = rng_from(4);
        let vecs: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let expect = reduce_mean_rank_order(&[&vecs[0], &vecs[1], &vecs[2]]);

        let handles: Vec<_> = (1..3u32)
            .map(|rank| {
                let addr = addr.clone();
                let v = vecs[rank as usize].clone();
                thread::spawn(move || {
                    let mut m = AllReduceMember::connect(&addr, rank).unwrap();
                    let pv = m.recv_params().unwrap();
                    assert_eq!(pv.version, 0);
                    let mut means = Vec::new();
                    loop {
                        let (step, stop) = m.await_step().unwrap();
                        if stop {
                            break;
                        }
                        means.push(m.submit(step, &v).unwrap());
                    }
                    means
                })
            })
            .collect();

        let mut root = AllReduceRoot::accept(&listener, 3).unwrap();
        root.broadcast_params(&ParamVector {
            version: 0,
            layout_id: 1,
            values: vec![0.0; 4],
        })
        .unwrap();
        let mean0 = root.reduce(0, &vecs[0]).unwrap();
        let mean1 = root.reduce(1, &vecs[0]).unwrap();
        root.broadcast_stop(2).unwrap();
        assert_eq!(mean0, expect);
        assert_eq!(mean1, expect);
        for h in handles {
            for m in h.join().unwrap() {
                assert_eq!(m, expect);
            }
        }
    }

    #[test]
    fn single_rank_group_needs_no_peers() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let mut root = AllReduceRoot::accept(&listener, 1).unwrap();
        let g = vec![1.0f32, -2.0];
        assert_eq!(root.reduce(0, &g).unwrap(), g);
    }
}
