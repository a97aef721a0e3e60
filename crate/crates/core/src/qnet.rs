//! Goal-conditioned Q-function Q(s, a, g): a fixed convolutional trunk over
//! the stacked frames (and goal channels in targeted mode) plus linear
//! embeddings of the gripper scalars and the action, merged into a scalar
//! head. Gradients are analytic and flow through every layer.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;

use crate::nn::{
    conv3x3s2_bwd, conv3x3s2_fwd, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd,
    normal_sample, relu_bwd, relu_fwd, sc, LnCache, Scalar,
};
use crate::rngutil::{mix64, rng_from};
use crate::world::{GoalImage, GraspAction, Observation};

pub const SCALAR_INPUTS: usize = 3;
pub const ACTION_INPUTS: usize = 5;

/// Architecture description. The parameter layout is a pure function of this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub render_px: usize,
    pub n_stack: usize,
    pub targeted: bool,
    pub conv_channels: [usize; 3],
    pub hidden: [usize; 2],
}

impl NetworkSpec {
    pub fn new(render_px: usize, n_stack: usize, targeted: bool) -> Self {
        NetworkSpec {
            render_px,
            n_stack,
            targeted,
            conv_channels: [8, 16, 16],
            hidden: [64, 64],
        }
    }

    /// Image input channels: stacked frames, plus the goal image in targeted mode.
    pub fn in_channels(&self) -> usize {
        3 * self.n_stack + if self.targeted { 3 } else { 0 }
    }

    /// Flattened size after the three stride-2 convolutions; also the
    /// embedding width the scalar/action projections are summed into.
    pub fn embed_dim(&self) -> usize {
        let side = self.render_px / 8;
        self.conv_channels[2] * side * side
    }

    /// Named parameter tensors in flat-layout order.
    pub fn tensor_layout(&self) -> Vec<(&'static str, usize)> {
        let c = self.in_channels();
        let [c1, c2, c3] = self.conv_channels;
        let e = self.embed_dim();
        let [h1, h2] = self.hidden;
        vec![
            ("conv1_w", c1 * c * 9),
            ("conv1_b", c1),
            ("ln1_g", c1),
            ("ln1_b", c1),
            ("conv2_w", c2 * c1 * 9),
            ("conv2_b", c2),
            ("ln2_g", c2),
            ("ln2_b", c2),
            ("conv3_w", c3 * c2 * 9),
            ("conv3_b", c3),
            ("ln3_g", c3),
            ("ln3_b", c3),
            ("scalar_w", e * SCALAR_INPUTS),
            ("scalar_b", e),
            ("action_w", e * ACTION_INPUTS),
            ("action_b", e),
            ("lne_g", e),
            ("lne_b", e),
            ("fc1_w", h1 * e),
            ("fc1_b", h1),
            ("ln4_g", h1),
            ("ln4_b", h1),
            ("fc2_w", h2 * h1),
            ("fc2_b", h2),
            ("ln5_g", h2),
            ("ln5_b", h2),
            ("out_w", h2),
            ("out_b", 1),
        ]
    }

    pub fn named_ranges(&self) -> Vec<(&'static str, Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for (name, len) in self.tensor_layout() {
            out.push((name, off..off + len));
            off += len;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_layout().iter().map(|(_, l)| l).sum()
    }

    /// Architecture fingerprint; the layout (and so the flat length) is
    /// determined solely by this.
    pub fn layout_id(&self) -> u64 {
        let mut h = 0xa90a_5eedu64;
        for v in [
            self.render_px as u64,
            self.n_stack as u64,
            self.targeted as u64,
            self.conv_channels[0] as u64,
            self.conv_channels[1] as u64,
            self.conv_channels[2] as u64,
            self.hidden[0] as u64,
            self.hidden[1] as u64,
        ] {
            h = mix64(h ^ v.wrapping_mul(0x9e37_79b9));
        }
        h
    }
}

/// Versioned flat model parameters as shipped over the wire and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub version: u64,
    pub layout_id: u64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QError {
    LayoutMismatch { expected: u64, got: u64 },
    ShapeMismatch { expected: usize, got: usize },
    NonFiniteTarget,
    EmptyBatch,
}

impl fmt::Display for QError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QError::LayoutMismatch { expected, got } => {
                write!(f, "layout id mismatch: expected {expected:#x}, got {got:#x}")
            }
            QError::ShapeMismatch { expected, got } => {
                write!(f, "input length mismatch: expected {expected}, got {got}")
            }
            QError::NonFiniteTarget => write!(f, "non-finite regression target"),
            QError::EmptyBatch => write!(f, "empty batch"),
        }
    }
}

struct Offsets {
    ranges: Vec<Range<usize>>,
}

impl Offsets {
    fn of(spec: &NetworkSpec) -> Self {
        Offsets {
            ranges: spec.named_ranges().into_iter().map(|(_, r)| r).collect(),
        }
    }
}

// tensor indices into Offsets::ranges, matching tensor_layout order
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const LN1_G: usize = 2;
const LN1_B: usize = 3;
const CONV2_W: usize = 4;
const CONV2_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const CONV3_W: usize = 8;
const CONV3_B: usize = 9;
const LN3_G: usize = 10;
const LN3_B: usize = 11;
const SCALAR_W: usize = 12;
const SCALAR_B: usize = 13;
const ACTION_W: usize = 14;
const ACTION_B: usize = 15;
const LNE_G: usize = 16;
const LNE_B: usize = 17;
const FC1_W: usize = 18;
const FC1_B: usize = 19;
const LN4_G: usize = 20;
const LN4_B: usize = 21;
const FC2_W: usize = 22;
const FC2_B: usize = 23;
const LN5_G: usize = 24;
const LN5_B: usize = 25;
const OUT_W: usize = 26;
const OUT_B: usize = 27;

pub struct Network<F: Scalar> {
    pub spec: NetworkSpec,
    pub params: Vec<F>,
    off: Offsets,
}

impl<F: Scalar> Clone for Network<F> {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            params: self.params.clone(),
            off: Offsets::of(&self.spec),
        }
    }
}

/// Per-sample forward cache for the backward pass.
pub struct FullCache<F: Scalar> {
    img: Vec<F>,
    scalars: [F; SCALAR_INPUTS],
    action: [F; ACTION_INPUTS],
    ln1: LnCache<F>,
    r1: Vec<F>,
    ln2: LnCache<F>,
    r2: Vec<F>,
    ln3: LnCache<F>,
    r3: Vec<F>,
    lne: LnCache<F>,
    h0: Vec<F>,
    ln4: LnCache<F>,
    h1: Vec<F>,
    ln5: LnCache<F>,
    h2: Vec<F>,
}

impl<F: Scalar> Network<F> {
    fn with_params(spec: NetworkSpec, params: Vec<F>) -> Self {
        let off = Offsets::of(&spec);
        Network { spec, params, off }
    }

    pub fn zeros(spec: NetworkSpec) -> Self {
        let n = spec.param_count();
        Self::with_params(spec, vec![F::zero(); n])
    }

    /// He-initialized weights, unit layer-norm gains, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut net = Self::zeros(spec);
        let mut rng = rng_from(seed ^ 0x1217_0057);
        let layout = net.spec.named_ranges();
        let spec = net.spec.clone();
        for (name, range) in layout {
            let fan_in = match name {
                "conv1_w" => spec.in_channels() * 9,
                "conv2_w" => spec.conv_channels[0] * 9,
                "conv3_w" => spec.conv_channels[1] * 9,
                "scalar_w" => SCALAR_INPUTS,
                "action_w" => ACTION_INPUTS,
                "fc1_w" => spec.embed_dim(),
                "fc2_w" => spec.hidden[0],
                "out_w" => spec.hidden[1],
                _ => 0,
            };
            if fan_in > 0 {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in &mut net.params[range] {
                    *v = normal_sample::<F, _>(&mut rng) * sc(std);
                }
            } else if name.ends_with("_g") {
                for v in &mut net.params[range] {
                    *v = F::one();
                }
            }
        }
        net
    }

    pub fn from_params(spec: NetworkSpec, pv: &ParamVector) -> Result<Self, QError> {
        if pv.layout_id != spec.layout_id() {
            return Err(QError::LayoutMismatch {
                expected: spec.layout_id(),
                got: pv.layout_id,
            });
        }
        if pv.values.len() != spec.param_count() {
            return Err(QError::ShapeMismatch {
                expected: spec.param_count(),
                got: pv.values.len(),
            });
        }
        let params = pv.values.iter().map(|&v| sc::<F>(v as f64)).collect();
        Ok(Self::with_params(spec, params))
    }

    pub fn to_params(&self, version: u64) -> ParamVector {
        ParamVector {
            version,
            layout_id: self.spec.layout_id(),
            values: self
                .params
                .iter()
                .map(|&v| v.to_f32().expect("finite parameter"))
                .collect(),
        }
    }

    fn t(&self, id: usize) -> &[F] {
        &self.params[self.off.ranges[id].clone()]
    }

    /// Image-plus-scalars trunk: everything that does not depend on the
    /// action. The returned embedding makes per-action evaluation cheap,
    /// which is what CEM leans on.
    pub fn trunk(&self, img: &[F], scalars: [F; SCALAR_INPUTS]) -> Vec<F> {
        let spec = &self.spec;
        let c = spec.in_channels();
        let px = spec.render_px;
        let [c1, c2, c3] = spec.conv_channels;
        debug_assert_eq!(img.len(), c * px * px);
        let mut a1 = vec![F::zero(); c1 * (px / 2) * (px / 2)];
        conv3x3s2_fwd(img, c, px, self.t(CONV1_W), self.t(CONV1_B), c1, &mut a1);
        let mut r1 = vec![F::zero(); a1.len()];
        layernorm_fwd(&a1, self.t(LN1_G), self.t(LN1_B), c1, &mut r1);
        relu_fwd(&mut r1);
        let mut a2 = vec![F::zero(); c2 * (px / 4) * (px / 4)];
        conv3x3s2_fwd(&r1, c1, px / 2, self.t(CONV2_W), self.t(CONV2_B), c2, &mut a2);
        let mut r2 = vec![F::zero(); a2.len()];
        layernorm_fwd(&a2, self.t(LN2_G), self.t(LN2_B), c2, &mut r2);
        relu_fwd(&mut r2);
        let mut a3 = vec![F::zero(); c3 * (px / 8) * (px / 8)];
        conv3x3s2_fwd(&r2, c2, px / 4, self.t(CONV3_W), self.t(CONV3_B), c3, &mut a3);
        let mut r3 = vec![F::zero(); a3.len()];
        layernorm_fwd(&a3, self.t(LN3_G), self.t(LN3_B), c3, &mut r3);
        relu_fwd(&mut r3);
        let e = spec.embed_dim();
        let mut sproj = vec![F::zero(); e];
        linear_fwd(&scalars, self.t(SCALAR_W), self.t(SCALAR_B), e, SCALAR_INPUTS, &mut sproj);
        for (acc, v) in sproj.iter_mut().zip(r3.iter()) {
            *acc += *v;
        }
        sproj
    }

    /// Scalar head on a precomputed trunk embedding.
    pub fn q_from_trunk(&self, trunk: &[F], action: [F; ACTION_INPUTS]) -> F {
        let spec = &self.spec;
        let e = spec.embed_dim();
        let [h1d, h2d] = spec.hidden;
        let mut emb = vec![F::zero(); e];
        linear_fwd(&action, self.t(ACTION_W), self.t(ACTION_B), e, ACTION_INPUTS, &mut emb);
        for (acc, v) in emb.iter_mut().zip(trunk.iter()) {
            *acc += *v;
        }
        let mut h0 = vec![F::zero(); e];
        layernorm_fwd(&emb, self.t(LNE_G), self.t(LNE_B), e, &mut h0);
        relu_fwd(&mut h0);
        let mut z1 = vec![F::zero(); h1d];
        linear_fwd(&h0, self.t(FC1_W), self.t(FC1_B), h1d, e, &mut z1);
        let mut h1 = vec![F::zero(); h1d];
        layernorm_fwd(&z1, self.t(LN4_G), self.t(LN4_B), h1d, &mut h1);
        relu_fwd(&mut h1);
        let mut z2 = vec![F::zero(); h2d];
        linear_fwd(&h1, self.t(FC2_W), self.t(FC2_B), h2d, h1d, &mut z2);
        let mut h2 = vec![F::zero(); h2d];
        layernorm_fwd(&z2, self.t(LN5_G), self.t(LN5_B), h2d, &mut h2);
        relu_fwd(&mut h2);
        let mut q = vec![F::zero(); 1];
        linear_fwd(&h2, self.t(OUT_W), self.t(OUT_B), 1, h2d, &mut q);
        q[0]
    }

    pub fn q(&self, img: &[F], scalars: [F; SCALAR_INPUTS], action: [F; ACTION_INPUTS]) -> F {
        let trunk = self.trunk(img, scalars);
        self.q_from_trunk(&trunk, action)
    }

    /// Full forward pass retaining every intermediate needed by `backward`.
    pub fn forward_cached(
        &self,
        img: Vec<F>,
        scalars: [F; SCALAR_INPUTS],
        action: [F; ACTION_INPUTS],
    ) -> (F, FullCache<F>) {
        let spec = &self.spec;
        let c = spec.in_channels();
        let px = spec.render_px;
        let [c1, c2, c3] = spec.conv_channels;
        let e = spec.embed_dim();
        let [h1d, h2d] = spec.hidden;

        let mut a1 = vec![F::zero(); c1 * (px / 2) * (px / 2)];
        conv3x3s2_fwd(&img, c, px, self.t(CONV1_W), self.t(CONV1_B), c1, &mut a1);
        let mut r1 = vec![F::zero(); a1.len()];
        let ln1 = layernorm_fwd(&a1, self.t(LN1_G), self.t(LN1_B), c1, &mut r1);
        relu_fwd(&mut r1);

        let mut a2 = vec![F::zero(); c2 * (px / 4) * (px / 4)];
        conv3x3s2_fwd(&r1, c1, px / 2, self.t(CONV2_W), self.t(CONV2_B), c2, &mut a2);
        let mut r2 = vec![F::zero(); a2.len()];
        let ln2 = layernorm_fwd(&a2, self.t(LN2_G), self.t(LN2_B), c2, &mut r2);
        relu_fwd(&mut r2);

        let mut a3 = vec![F::zero(); c3 * (px / 8) * (px / 8)];
        conv3x3s2_fwd(&r2, c2, px / 4, self.t(CONV3_W), self.t(CONV3_B), c3, &mut a3);
        let mut r3 = vec![F::zero(); a3.len()];
        let ln3 = layernorm_fwd(&a3, self.t(LN3_G), self.t(LN3_B), c3, &mut r3);
        relu_fwd(&mut r3);

        let mut emb = vec![F::zero(); e];
        linear_fwd(&scalars, self.t(SCALAR_W), self.t(SCALAR_B), e, SCALAR_INPUTS, &mut emb);
        let mut aproj = vec![F::zero(); e];
        linear_fwd(&action, self.t(ACTION_W), self.t(ACTION_B), e, ACTION_INPUTS, &mut aproj);
        for i in 0..e {
            emb[i] += r3[i] + aproj[i];
        }
        let mut h0 = vec![F::zero(); e];
        let lne = layernorm_fwd(&emb, self.t(LNE_G), self.t(LNE_B), e, &mut h0);
        relu_fwd(&mut h0);

        let mut z1 = vec![F::zero(); h1d];
        linear_fwd(&h0, self.t(FC1_W), self.t(FC1_B), h1d, e, &mut z1);
        let mut h1 = vec![F::zero(); h1d];
        let ln4 = layernorm_fwd(&z1, self.t(LN4_G), self.t(LN4_B), h1d, &mut h1);
        relu_fwd(&mut h1);

        let mut z2 = vec![F::zero(); h2d];
        linear_fwd(&h1, self.t(FC2_W), self.t(FC2_B), h2d, h1d, &mut z2);
        let mut h2 = vec![F::zero(); h2d];
        let ln5 = layernorm_fwd(&z2, self.t(LN5_G), self.t(LN5_B), h2d, &mut h2);
        relu_fwd(&mut h2);

        let mut q = vec![F::zero(); 1];
        linear_fwd(&h2, self.t(OUT_W), self.t(OUT_B), 1, h2d, &mut q);
        (
            q[0],
            FullCache {
                img,
                scalars,
                action,
                ln1,
                r1,
                ln2,
                r2,
                ln3,
                r3,
                lne,
                h0,
                ln4,
                h1,
                ln5,
                h2,
            },
        )
    }

    /// Accumulate d(dq·Q)/dθ into `grad` (flat, same layout as `params`).
    pub fn backward(&self, cache: &FullCache<F>, dq: F, grad: &mut [F]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let spec = &self.spec;
        let c = spec.in_channels();
        let px = spec.render_px;
        let [c1, c2, c3] = spec.conv_channels;
        let e = spec.embed_dim();
        let [h1d, h2d] = spec.hidden;
        let r = &self.off.ranges;
        // split one mutable borrow of grad into per-tensor slices
        let mut slices: Vec<&mut [F]> = Vec::with_capacity(r.len());
        let mut rest = grad;
        let mut consumed = 0;
        for range in r.iter() {
            let (head, tail) = core::mem::take(&mut rest).split_at_mut(range.end - consumed);
            slices.push(head);
            consumed = range.end;
            rest = tail;
        }

        // head
        let mut d_h2 = vec![F::zero(); h2d];
        {
            let out_w = self.t(OUT_W);
            for i in 0..h2d {
                slices[OUT_W][i] += dq * cache.h2[i];
                d_h2[i] = dq * out_w[i];
            }
            slices[OUT_B][0] += dq;
        }
        relu_bwd(&cache.h2, &mut d_h2);
        let mut d_z2 = vec![F::zero(); h2d];
        {
            let (g, b) = split2(&mut slices, LN5_G, LN5_B);
            layernorm_bwd(&cache.ln5, self.t(LN5_G), h2d, &d_h2, g, b, &mut d_z2);
        }
        let mut d_h1 = vec![F::zero(); h1d];
        {
            let (w, b) = split2(&mut slices, FC2_W, FC2_B);
            linear_bwd(&cache.h1, self.t(FC2_W), h2d, h1d, &d_z2, w, b, &mut d_h1);
        }
        relu_bwd(&cache.h1, &mut d_h1);
        let mut d_z1 = vec![F::zero(); h1d];
        {
            let (g, b) = split2(&mut slices, LN4_G, LN4_B);
            layernorm_bwd(&cache.ln4, self.t(LN4_G), h1d, &d_h1, g, b, &mut d_z1);
        }
        let mut d_h0 = vec![F::zero(); e];
        {
            let (w, b) = split2(&mut slices, FC1_W, FC1_B);
            linear_bwd(&cache.h0, self.t(FC1_W), h1d, e, &d_z1, w, b, &mut d_h0);
        }
        relu_bwd(&cache.h0, &mut d_h0);
        let mut d_emb = vec![F::zero(); e];
        {
            let (g, b) = split2(&mut slices, LNE_G, LNE_B);
            layernorm_bwd(&cache.lne, self.t(LNE_G), e, &d_h0, g, b, &mut d_emb);
        }
        // the summed embedding fans the gradient out to all three branches
        let mut d_scalars = vec![F::zero(); SCALAR_INPUTS];
        {
            let (w, b) = split2(&mut slices, SCALAR_W, SCALAR_B);
            linear_bwd(&cache.scalars, self.t(SCALAR_W), e, SCALAR_INPUTS, &d_emb, w, b, &mut d_scalars);
        }
        let mut d_action = vec![F::zero(); ACTION_INPUTS];
        {
            let (w, b) = split2(&mut slices, ACTION_W, ACTION_B);
            linear_bwd(&cache.action, self.t(ACTION_W), e, ACTION_INPUTS, &d_emb, w, b, &mut d_action);
        }
        let mut d_r3 = d_emb;
        relu_bwd(&cache.r3, &mut d_r3);
        let mut d_a3 = vec![F::zero(); c3 * (px / 8) * (px / 8)];
        {
            let (g, b) = split2(&mut slices, LN3_G, LN3_B);
            layernorm_bwd(&cache.ln3, self.t(LN3_G), c3, &d_r3, g, b, &mut d_a3);
        }
        let mut d_r2 = vec![F::zero(); c2 * (px / 4) * (px / 4)];
        {
            let (w, b) = split2(&mut slices, CONV3_W, CONV3_B);
            conv3x3s2_bwd(&cache.r2, c2, px / 4, self.t(CONV3_W), c3, &d_a3, w, b, &mut d_r2);
        }
        relu_bwd(&cache.r2, &mut d_r2);
        let mut d_a2 = vec![F::zero(); c2 * (px / 4) * (px / 4)];
        {
            let (g, b) = split2(&mut slices, LN2_G, LN2_B);
            layernorm_bwd(&cache.ln2, self.t(LN2_G), c2, &d_r2, g, b, &mut d_a2);
        }
        let mut d_r1 = vec![F::zero(); c1 * (px / 2) * (px / 2)];
        {
            let (w, b) = split2(&mut slices, CONV2_W, CONV2_B);
            conv3x3s2_bwd(&cache.r1, c1, px / 2, self.t(CONV2_W), c2, &d_a2, w, b, &mut d_r1);
        }
        relu_bwd(&cache.r1, &mut d_r1);
        let mut d_a1 = vec![F::zero(); c1 * (px / 2) * (px / 2)];
        {
            let (g, b) = split2(&mut slices, LN1_G, LN1_B);
            layernorm_bwd(&cache.ln1, self.t(LN1_G), c1, &d_r1, g, b, &mut d_a1);
        }
        let mut d_img = vec![F::zero(); c * px * px];
        {
            let (w, b) = split2(&mut slices, CONV1_W, CONV1_B);
            conv3x3s2_bwd(&cache.img, c, px, self.t(CONV1_W), c1, &d_a1, w, b, &mut d_img);
        }
    }
}

/// Two distinct mutable tensor slices out of the per-tensor split.
fn split2<'a, 'b, F>(slices: &'a mut [&'b mut [F]], i: usize, j: usize) -> (&'a mut [F], &'a mut [F]) {
    debug_assert!(i < j);
    let (lo, hi) = slices.split_at_mut(j);
    (&mut *lo[i], &mut *hi[0])
}

/// Concatenate stacked frames (and the goal image in targeted mode) into
/// the network's channel-major image input.
pub fn assemble_image<F: Scalar>(spec: &NetworkSpec, obs: &Observation, goal: Option<&GoalImage>) -> Result<Vec<F>, QError> {
    let px = spec.render_px;
    let want_frames = 3 * spec.n_stack * px * px;
    if obs.frames.len() != want_frames {
        return Err(QError::ShapeMismatch {
            expected: want_frames,
            got: obs.frames.len(),
        });
    }
    let mut img: Vec<F> = Vec::with_capacity(spec.in_channels() * px * px);
    img.extend(obs.frames.iter().map(|&v| sc::<F>(v as f64)));
    if spec.targeted {
        let goal = goal.ok_or(QError::ShapeMismatch { expected: 3 * px * px, got: 0 })?;
        if goal.pixels.len() != 3 * px * px {
            return Err(QError::ShapeMismatch {
                expected: 3 * px * px,
                got: goal.pixels.len(),
            });
        }
        img.extend(goal.pixels.iter().map(|&v| sc::<F>(v as f64)));
    }
    Ok(img)
}

/// Action encoding: pose deltas normalized to [-1,1] plus a ±1 toggle flag.
pub fn encode_action<F: Scalar>(action: &GraspAction, delta_max: f32, rot_max: f32) -> [F; ACTION_INPUTS] {
    match *action {
        GraspAction::PoseDelta { dx, dy, dz, dtheta } => [
            sc((dx / delta_max) as f64),
            sc((dy / delta_max) as f64),
            sc((dz / delta_max) as f64),
            sc((dtheta / rot_max) as f64),
            sc(-1.0),
        ],
        GraspAction::GripperToggle => [F::zero(), F::zero(), F::zero(), F::zero(), F::one()],
    }
}

/// Huber loss (delta = 1) and its derivative in the residual.
pub fn huber<F: Scalar>(residual: F) -> (F, F) {
    let one = F::one();
    if residual.abs() <= one {
        (sc::<F>(0.5) * residual * residual, residual)
    } else {
        (residual.abs() - sc::<F>(0.5), residual.signum())
    }
}

pub struct BatchSample<F: Scalar> {
    pub img: Vec<F>,
    pub scalars: [F; SCALAR_INPUTS],
    pub action: [F; ACTION_INPUTS],
}

/// Mean Huber loss over the batch and its analytic gradient in the
/// parameters. The gradient is the exact derivative of the reported loss.
pub fn q_gradient<F: Scalar>(
    net: &Network<F>,
    batch: &[BatchSample<F>],
    targets: &[F],
) -> Result<(F, Vec<F>), QError> {
    if batch.is_empty() {
        return Err(QError::EmptyBatch);
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(QError::NonFiniteTarget);
    }
    let inv_b = sc::<F>(1.0 / batch.len() as f64);
    let mut grad = vec![F::zero(); net.params.len()];
    let mut loss = F::zero();
    for (sample, &target) in batch.iter().zip(targets.iter()) {
        let (q, cache) = net.forward_cached(sample.img.clone(), sample.scalars, sample.action);
        let (l, dl) = huber(q - target);
        loss += l * inv_b;
        net.backward(&cache, dl * inv_b, &mut grad);
    }
    Ok((loss, grad))
}

/// Occlusion-style sensitivity map: for each `patch_px`-sized patch, replace
/// that patch of every stacked frame with a Gaussian-blurred version and
/// record |ΔQ|. The grid is normalized to [0,1] (all-zero stays all-zero).
pub fn sensitivity_map<F: Scalar>(
    net: &Network<F>,
    obs: &Observation,
    goal: Option<&GoalImage>,
    action: &GraspAction,
    delta_max: f32,
    rot_max: f32,
    patch_px: usize,
) -> Result<Vec<f32>, QError> {
    let px = net.spec.render_px;
    assert!(patch_px > 0 && px % patch_px == 0, "patch_px must divide render_px");
    let grid = px / patch_px;
    let img = assemble_image::<F>(&net.spec, obs, goal)?;
    let scalars = [
        sc(obs.gripper_closed as f64),
        sc(obs.gripper_z as f64),
        sc(obs.time_remaining as f64),
    ];
    let act = encode_action::<F>(action, delta_max, rot_max);
    let q0 = net.q(&img, scalars, act);
    let frame_channels = 3 * net.spec.n_stack;
    let blurred = gaussian_blur(&img[..frame_channels * px * px], frame_channels, px, patch_px as f64 / 2.0);
    let mut map = vec![0.0f32; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut perturbed = img.clone();
            for ch in 0..frame_channels {
                for y in gy * patch_px..(gy + 1) * patch_px {
                    let row = ch * px * px + y * px;
                    let xs = gx * patch_px;
                    perturbed[row + xs..row + xs + patch_px]
                        .copy_from_slice(&blurred[row + xs..row + xs + patch_px]);
                }
            }
            let dq = (net.q(&perturbed, scalars, act) - q0).abs();
            map[gy * grid + gx] = dq.to_f32().unwrap_or(0.0);
        }
    }
    let max = map.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in &mut map {
            *v /= max;
        }
    }
    Ok(map)
}

/// Separable Gaussian blur with clamp-to-edge sampling, per channel.
fn gaussian_blur<F: Scalar>(img: &[F], channels: usize, px: usize, sigma: f64) -> Vec<F> {
    let radius = (2.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let w = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let kernel: Vec<F> = kernel.into_iter().map(sc::<F>).collect();
    let clamp = |v: i64| -> usize { v.clamp(0, px as i64 - 1) as usize };
    let mut tmp = vec![F::zero(); img.len()];
    for c in 0..channels {
        let plane = &img[c * px * px..(c + 1) * px * px];
        let out = &mut tmp[c * px * px..(c + 1) * px * px];
        for y in 0..px {
            for x in 0..px {
                let mut acc = F::zero();
                for (ki, &kw) in kernel.iter().enumerate() {
                    let sx = clamp(x as i64 + ki as i64 - radius);
                    acc += kw * plane[y * px + sx];
                }
                out[y * px + x] = acc;
            }
        }
    }
    let mut out = vec![F::zero(); img.len()];
    for c in 0..channels {
        let plane = &tmp[c * px * px..(c + 1) * px * px];
        let o = &mut out[c * px * px..(c + 1) * px * px];
        for y in 0..px {
            for x in 0..px {
                let mut acc = F::zero();
                for (ki, &kw) in kernel.iter().enumerate() {
                    let sy = clamp(y as i64 + ki as i64 - radius);
                    acc += kw * plane[sy * px + x];
                }
                o[y * px + x] = acc;
            }
        }
    }
    out
}
