//! Learner math: Bellman targets with the observed-return lowerbound,
//! mirroring augmentation, Adam with the ε batch-scaling rule, and the
//! fixed-order mean reduction used by All-Reduce.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::cem::{cem_maximize, ActionBounds, CemConfig};
use crate::nn::{sc, Scalar};
use crate::qnet::{assemble_image, encode_action, q_gradient, BatchSample, Network, QError};
use crate::replay::RelabeledTransition;

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub local_batch: usize,
    pub num_learners: usize,
    pub adam_alpha: f64,
    pub adam_base_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f32,
    pub target_sync_period: u64,
    pub lowerbound_enabled: bool,
    pub mirror_enabled: bool,
    pub her_enabled: bool,
    pub frame_stack_n: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            local_batch: 64,
            num_learners: 1,
            adam_alpha: 5e-5,
            adam_base_eps: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 0.9,
            target_sync_period: 500,
            lowerbound_enabled: true,
            mirror_enabled: true,
            her_enabled: true,
            frame_stack_n: 4,
        }
    }
}

impl LearnerConfig {
    pub fn effective_batch(&self) -> usize {
        self.local_batch * self.num_learners
    }

    /// Adam ε scaled down by the effective batch size.
    pub fn adam_eps(&self) -> f64 {
        self.adam_base_eps / self.effective_batch() as f64
    }
}

/// Reflect a sampled transition: flip every image horizontally and mirror
/// the action; rewards and returns are invariant.
pub fn mirror_transition(t: &RelabeledTransition) -> RelabeledTransition {
    RelabeledTransition {
        obs: t.obs.mirrored(),
        action: t.action.mirrored(),
        reward: t.reward,
        next_obs: t.next_obs.mirrored(),
        done: t.done,
        desired_goal: t.desired_goal.mirrored(),
        observed_return: t.observed_return,
        grasped_object_matches_desired: t.grasped_object_matches_desired,
        relabeled: t.relabeled,
    }
}

/// Apply the mirroring augmentation with probability 0.5 per transition.
pub fn maybe_mirror_batch<R: Rng>(batch: &mut Vec<RelabeledTransition>, rng: &mut R) {
    for t in batch.iter_mut() {
        if rng.gen::<f32>() < 0.5 {
            *t = mirror_transition(t);
        }
    }
}

/// Bellman targets from the target network: `r + γ·max_a' Q(s',a',g)` via
/// CEM, clamped from below by the episode's observed return when the
/// lowerbound trick is enabled.
pub fn compute_targets<F: Scalar, R: Rng>(
    target_net: &Network<F>,
    batch: &[RelabeledTransition],
    cem: &CemConfig,
    bounds: &ActionBounds,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> Result<Vec<F>, QError> {
    let mut out = Vec::with_capacity(batch.len());
    for t in batch {
        let bootstrap = if t.done {
            sc::<F>(t.reward as f64)
        } else {
            let img = assemble_image::<F>(&target_net.spec, &t.next_obs, Some(&t.desired_goal).filter(|_| target_net.spec.targeted))?;
            let trunk = target_net.trunk(&img, scalars_of(&t.next_obs));
            let (_, qmax) = cem_maximize(
                |a| {
                    target_net
                        .q_from_trunk(&trunk, encode_action(a, bounds.delta_max, bounds.rot_max))
                        .to_f32()
                        .unwrap_or(f32::NEG_INFINITY)
                },
                bounds,
                cem,
                rng,
            );
            if !qmax.is_finite() {
                return Err(QError::NonFiniteTarget);
            }
            sc::<F>(t.reward as f64) + sc::<F>(cfg.gamma as f64) * sc::<F>(qmax as f64)
        };
        let target = if cfg.lowerbound_enabled {
            let lb = sc::<F>(t.observed_return as f64);
            let v = if bootstrap > lb { bootstrap } else { lb };
            assert!(v >= lb, "lowerbound dominance violated");
            v
        } else {
            bootstrap
        };
        out.push(target);
    }
    Ok(out)
}

pub fn scalars_of<F: Scalar>(obs: &crate::world::Observation) -> [F; 3] {
    [
        sc(obs.gripper_closed as f64),
        sc(obs.gripper_z as f64),
        sc(obs.time_remaining as f64),
    ]
}

/// Loss and analytic gradient on a relabeled batch against precomputed targets.
pub fn loss_and_grad<F: Scalar>(
    net: &Network<F>,
    batch: &[RelabeledTransition],
    targets: &[F],
    bounds: &ActionBounds,
) -> Result<(F, Vec<F>), QError> {
    let samples: Vec<BatchSample<F>> = batch
        .iter()
        .map(|t| {
            Ok(BatchSample {
                img: assemble_image::<F>(&net.spec, &t.obs, Some(&t.desired_goal).filter(|_| net.spec.targeted))?,
                scalars: scalars_of(&t.obs),
                action: encode_action(&t.action, bounds.delta_max, bounds.rot_max),
            })
        })
        .collect::<Result<_, QError>>()?;
    q_gradient(net, &samples, targets)
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdamError {
    NonFiniteGradient,
    ShapeMismatch,
}

/// Bias-corrected Adam step in place.
pub fn adam_update<F: Scalar>(
    params: &mut [F],
    grad: &[F],
    state: &mut AdamState<F>,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), AdamError> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(AdamError::ShapeMismatch);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AdamError::NonFiniteGradient);
    }
    state.t += 1;
    let b1 = sc::<F>(beta1);
    let b2 = sc::<F>(beta2);
    let one = F::one();
    let corr1 = sc::<F>(1.0 - beta1.powi(state.t as i32));
    let corr2 = sc::<F>(1.0 - beta2.powi(state.t as i32));
    let a = sc::<F>(alpha);
    let e = sc::<F>(eps);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / corr1;
        let vhat = state.v[i] / corr2;
        params[i] = params[i] - a * mhat / (vhat.sqrt() + e);
    }
    Ok(())
}

/// Element-wise mean over contributions accumulated in rank order, so the
/// result is bit-reproducible for a fixed membership.
pub fn reduce_mean_rank_order(contribs: &[&[f32]]) -> Vec<f32> {
    assert!(!contribs.is_empty());
    let n = contribs[0].len();
    assert!(contribs.iter().all(|c| c.len() == n), "length mismatch");
    let mut acc: Vec<f32> = contribs[0].to_vec();
    for c in &contribs[1..] {
        for (a, &v) in acc.iter_mut().zip(c.iter()) {
            *a += v;
        }
    }
    let k = contribs.len() as f32;
    for a in &mut acc {
        *a /= k;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_eps_scaling_rule() {
        let cfg = LearnerConfig {
            local_batch: 64,
            num_learners: 128,
            ..LearnerConfig::default()
        };
        assert_eq!(cfg.effective_batch(), 8192);
        assert_eq!(cfg.adam_eps(), 1e-2 / 8192.0);
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0f64; 3];
        let mut st = AdamState::new(3);
        adam_update(&mut p, &g, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn reduce_identical_is_identity() {
        let v = vec![1.0f32, 2.0, 3.0];
        let out = reduce_mean_rank_order(&[&v, &v, &v]);
        assert_eq!(out, v);
    }

    #[test]
    fn reduce_cancellation() {
        let v = vec![1.0f32, -2.0, 3.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let out = reduce_mean_rank_order(&[&v, &neg]);
        assert!(out.iter().all(|&x| x == 0.0));
    }
}
