//! Fixed actor-critic CNN with hand-written reverse-mode gradients.
//!
//! Architecture: two 3x3 same-padded conv layers (3 -> 32 -> 64 channels,
//! ReLU), a 128-unit linear trunk (ReLU), a 5-way actor head, and a
//! scalar critic head, all in f32. Activations are stored channels-last
//! so the innermost loops run over contiguous output channels, which
//! keeps the kernels auto-vectorizable without reassociating float sums.
//!
//! Gradients are exact: [`backward_params`] produces the derivative of a
//! scalar loss with respect to every parameter, [`input_gradient`] with
//! respect to the observation tensor. Both are validated against finite
//! differences in the test suites.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::env::{Obs, OBS_LEN, OBS_SIDE};
use crate::math::{self, NUM_ACTIONS};
use crate::rng;

const S: usize = OBS_SIDE; // spatial side, 5
const C_IN: usize = 3;
const C1: usize = 32;
const C2: usize = 64;
const FLAT: usize = S * S * C2; // 1600
const TRUNK: usize = 128;

const LEN_C1W: usize = 3 * 3 * C_IN * C1;
const LEN_C1B: usize = C1;
const LEN_C2W: usize = 3 * 3 * C1 * C2;
const LEN_C2B: usize = C2;
const LEN_TW: usize = FLAT * TRUNK;
const LEN_TB: usize = TRUNK;
const LEN_AW: usize = TRUNK * NUM_ACTIONS;
const LEN_AB: usize = NUM_ACTIONS;
const LEN_CW: usize = TRUNK;
const LEN_CB: usize = 1;

const OFF_C1W: usize = 0;
const OFF_C1B: usize = OFF_C1W + LEN_C1W;
const OFF_C2W: usize = OFF_C1B + LEN_C1B;
const OFF_C2B: usize = OFF_C2W + LEN_C2W;
const OFF_TW: usize = OFF_C2B + LEN_C2B;
const OFF_TB: usize = OFF_TW + LEN_TW;
const OFF_AW: usize = OFF_TB + LEN_TB;
const OFF_AB: usize = OFF_AW + LEN_AW;
const OFF_CW: usize = OFF_AB + LEN_AB;
const OFF_CB: usize = OFF_CW + LEN_CW;

/// Total number of parameters; asserted when loading checkpoints.
pub const PARAM_COUNT: usize = OFF_CB + LEN_CB;

/// Tensor table: name, offset, length, dims. Field order is the
/// checkpoint order.
const TENSORS: [(&str, usize, usize, &[u32]); 10] = [
    ("conv1.weight", OFF_C1W, LEN_C1W, &[3, 3, 3, 32]),
    ("conv1.bias", OFF_C1B, LEN_C1B, &[32]),
    ("conv2.weight", OFF_C2W, LEN_C2W, &[3, 3, 32, 64]),
    ("conv2.bias", OFF_C2B, LEN_C2B, &[64]),
    ("trunk.weight", OFF_TW, LEN_TW, &[1600, 128]),
    ("trunk.bias", OFF_TB, LEN_TB, &[128]),
    ("actor.weight", OFF_AW, LEN_AW, &[128, 5]),
    ("actor.bias", OFF_AB, LEN_AB, &[5]),
    ("critic.weight", OFF_CW, LEN_CW, &[128]),
    ("critic.bias", OFF_CB, LEN_CB, &[1]),
];

const CHECKPOINT_MAGIC: &[u8; 5] = b"GRPN1";

/// Flat parameter bundle. Conv weights are laid out
/// `[ky][kx][in_ch][out_ch]`, linear weights `[in][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    data: Vec<f32>,
}

/// Gradients, same layout as [`NetParams`].
#[derive(Clone, Debug)]
pub struct NetGrads {
    data: Vec<f32>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unexpected tensor `{got}` (expected `{expected}`)")]
    TensorName { expected: &'static str, got: String },
    #[error("tensor `{0}` has unexpected shape")]
    TensorShape(&'static str),
    #[error("trailing bytes after checksum")]
    TrailingBytes,
}

/// Policy head outputs for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: [f32; NUM_ACTIONS],
    pub probs: [f32; NUM_ACTIONS],
    pub value: f32,
}

impl PolicyOutput {
    pub fn log_probs(&self) -> [f32; NUM_ACTIONS] {
        math::log_softmax(&self.logits)
    }

    pub fn entropy(&self) -> f32 {
        math::entropy(&self.probs)
    }

    /// Deterministic argmax action index (ties to the lowest index).
    pub fn greedy(&self) -> usize {
        math::argmax(&self.logits)
    }
}

/// Cached activations for one backward pass.
#[derive(Clone)]
pub struct ForwardTrace {
    x: [f32; S * S * C_IN],   // channels-last input
    pre1: [f32; S * S * C1],  // conv1 pre-activation
    pre2: [f32; S * S * C2],  // conv2 pre-activation
    pre3: [f32; TRUNK],       // trunk pre-activation
}

impl Default for ForwardTrace {
    fn default() -> Self {
        ForwardTrace {
            x: [0.0; S * S * C_IN],
            pre1: [0.0; S * S * C1],
            pre2: [0.0; S * S * C2],
            pre3: [0.0; TRUNK],
        }
    }
}

/// Gradient of a scalar loss with respect to the network heads.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadGrad {
    pub dlogits: [f32; NUM_ACTIONS],
    pub dvalue: f32,
}

/// Scalar losses whose input gradient the attack code needs.
#[derive(Clone, Copy, Debug)]
pub enum ScalarLoss {
    /// Cross-entropy of the policy distribution against a target action.
    CrossEntropy { target: usize },
    /// KL(target || policy) against a fixed target distribution.
    KlFrom { target: [f32; NUM_ACTIONS] },
}

impl NetParams {
    pub fn from_flat(data: Vec<f32>) -> NetParams {
        assert_eq!(data.len(), PARAM_COUNT);
        NetParams { data }
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn slice(&self, off: usize, len: usize) -> &[f32] {
        &self.data[off..off + len]
    }
}

impl NetGrads {
    pub fn zeros() -> NetGrads {
        NetGrads { data: vec![0.0; PARAM_COUNT] }
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add(&mut self, other: &NetGrads) {
        math::axpy(1.0, &other.data, &mut self.data);
    }

    /// Global L2 norm, accumulated in f64 in a fixed order.
    pub fn global_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for &g in self.data.iter() {
            acc += (g as f64) * (g as f64);
        }
        math::sqrt(acc) as f32
    }

    /// Scales gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f32) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Deterministic fan-in-scaled uniform initialization; biases zero.
pub fn init_params(seed: u64) -> NetParams {
    let mut data = vec![0.0f32; PARAM_COUNT];
    let mut rng = rng::stream(&[rng::tag::INIT, seed]);
    let fans: [(usize, usize, usize); 5] = [
        (OFF_C1W, LEN_C1W, 3 * 3 * C_IN),
        (OFF_C2W, LEN_C2W, 3 * 3 * C1),
        (OFF_TW, LEN_TW, FLAT),
        (OFF_AW, LEN_AW, TRUNK),
        (OFF_CW, LEN_CW, TRUNK),
    ];
    for (off, len, fan_in) in fans {
        let bound = 1.0 / math::sqrtf(fan_in as f32);
        for w in data[off..off + len].iter_mut() {
            *w = rng::uniform_f32(&mut rng, -bound, bound);
        }
    }
    NetParams { data }
}

#[inline]
fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// acc[j] += scale * row[j] over a fixed-width lane bundle.
#[inline(always)]
fn fma_row(acc: &mut [f32], row: &[f32], scale: f32) {
    for (a, &r) in acc.iter_mut().zip(row.iter()) {
        *a += scale * r;
    }
}

/// Forward pass for one observation; the trace feeds one backward pass.
pub fn forward(params: &NetParams, obs: &Obs) -> (PolicyOutput, ForwardTrace) {
    let mut trace = ForwardTrace::default();
    let out = forward_into(params, obs, &mut trace);
    (out, trace)
}

/// Forward pass writing into a caller-owned trace (hot-loop variant).
pub fn forward_into(params: &NetParams, obs: &Obs, trace: &mut ForwardTrace) -> PolicyOutput {
    debug_assert_eq!(obs.data.len(), OBS_LEN);

    // Transpose channel-major input to channels-last.
    for y in 0..S {
        for x in 0..S {
            for c in 0..C_IN {
                trace.x[(y * S + x) * C_IN + c] = obs.data[c * S * S + y * S + x];
            }
        }
    }

    let w1 = params.slice(OFF_C1W, LEN_C1W);
    let b1 = params.slice(OFF_C1B, LEN_C1B);
    conv_forward::<C_IN, C1>(&trace.x, w1, b1, &mut trace.pre1);
    let mut h1 = [0.0f32; S * S * C1];
    for (h, &p) in h1.iter_mut().zip(trace.pre1.iter()) {
        *h = relu(p);
    }

    let w2 = params.slice(OFF_C2W, LEN_C2W);
    let b2 = params.slice(OFF_C2B, LEN_C2B);
    conv_forward::<C1, C2>(&h1, w2, b2, &mut trace.pre2);

    // Trunk over the flattened (relu'd) conv2 output.
    let tw = params.slice(OFF_TW, LEN_TW);
    let tb = params.slice(OFF_TB, LEN_TB);
    let mut acc = [0.0f32; TRUNK];
    acc.copy_from_slice(tb);
    for i in 0..FLAT {
        let v = relu(trace.pre2[i]);
        if v != 0.0 {
            fma_row(&mut acc, &tw[i * TRUNK..(i + 1) * TRUNK], v);
        }
    }
    trace.pre3 = acc;

    let mut h3 = [0.0f32; TRUNK];
    for (h, &p) in h3.iter_mut().zip(trace.pre3.iter()) {
        *h = relu(p);
    }

    let aw = params.slice(OFF_AW, LEN_AW);
    let ab = params.slice(OFF_AB, LEN_AB);
    let mut logits = [0.0f32; NUM_ACTIONS];
    logits.copy_from_slice(ab);
    for i in 0..TRUNK {
        let v = h3[i];
        if v != 0.0 {
            fma_row(&mut logits, &aw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], v);
        }
    }

    let cw = params.slice(OFF_CW, LEN_CW);
    let value = math::dot(cw, &h3) + params.data[OFF_CB];

    let probs = math::softmax(&logits);
    PolicyOutput { logits, probs, value }
}

/// Batched forward; equals independent per-observation forwards.
pub fn forward_batch(params: &NetParams, batch: &[Obs]) -> Vec<(PolicyOutput, ForwardTrace)> {
    batch.iter().map(|o| forward(params, o)).collect()
}

/// Same-padded 3x3 convolution, channels-last activations, weights
/// `[ky][kx][in][out]` so the innermost accumulation runs over `OUT`
/// contiguous lanes.
fn conv_forward<const IN: usize, const OUT: usize>(
    input: &[f32],
    w: &[f32],
    b: &[f32],
    out: &mut [f32],
) {
    for y in 0..S {
        let ky_lo = if y == 0 { 1 } else { 0 };
        let ky_hi = if y == S - 1 { 2 } else { 3 };
        for x in 0..S {
            let kx_lo = if x == 0 { 1 } else { 0 };
            let kx_hi = if x == S - 1 { 2 } else { 3 };
            let mut acc = [0.0f32; OUT];
            acc.copy_from_slice(b);
            for ky in ky_lo..ky_hi {
                let iy = y + ky - 1;
                for kx in kx_lo..kx_hi {
                    let ix = x + kx - 1;
                    let in_base = (iy * S + ix) * IN;
                    let w_base = ((ky * 3 + kx) * IN) * OUT;
                    for ic in 0..IN {
                        let v = input[in_base + ic];
                        if v != 0.0 {
                            fma_row(&mut acc, &w[w_base + ic * OUT..w_base + (ic + 1) * OUT], v);
                        }
                    }
                }
            }
            out[(y * S + x) * OUT..(y * S + x + 1) * OUT].copy_from_slice(&acc);
        }
    }
}

/// Backward for the conv weights/bias plus (optionally) the input.
fn conv_backward<const IN: usize, const OUT: usize>(
    input: &[f32],
    w: &[f32],
    dout: &[f32],
    gw: Option<&mut [f32]>,
    gb: Option<&mut [f32]>,
    dinput: Option<&mut [f32]>,
) {
    let mut gw = gw;
    let mut gb = gb;
    let mut dinput = dinput;
    for y in 0..S {
        let ky_lo = if y == 0 { 1 } else { 0 };
        let ky_hi = if y == S - 1 { 2 } else { 3 };
        for x in 0..S {
            let kx_lo = if x == 0 { 1 } else { 0 };
            let kx_hi = if x == S - 1 { 2 } else { 3 };
            let d = &dout[(y * S + x) * OUT..(y * S + x + 1) * OUT];
            if let Some(gb) = gb.as_deref_mut() {
                for (g, &dv) in gb.iter_mut().zip(d.iter()) {
                    *g += dv;
                }
            }
            for ky in ky_lo..ky_hi {
                let iy = y + ky - 1;
                for kx in kx_lo..kx_hi {
                    let ix = x + kx - 1;
                    let in_base = (iy * S + ix) * IN;
                    let w_base = ((ky * 3 + kx) * IN) * OUT;
                    if let Some(gw) = gw.as_deref_mut() {
                        for ic in 0..IN {
                            let v = input[in_base + ic];
                            if v != 0.0 {
                                fma_row(
                                    &mut gw[w_base + ic * OUT..w_base + (ic + 1) * OUT],
                                    d,
                                    v,
                                );
                            }
                        }
                    }
                    if let Some(di) = dinput.as_deref_mut() {
                        for ic in 0..IN {
                            di[in_base + ic] +=
                                math::dot(&w[w_base + ic * OUT..w_base + (ic + 1) * OUT], d);
                        }
                    }
                }
            }
        }
    }
}

/// Exact parameter gradients for one sample. Consumes the trace; use
/// [`backward_into`] to accumulate into a shared gradient buffer.
pub fn backward_params(params: &NetParams, trace: ForwardTrace, head: &HeadGrad) -> NetGrads {
    let mut grads = NetGrads::zeros();
    backward_into(params, &trace, head, &mut grads);
    grads
}

/// Accumulates exact parameter gradients for one sample into `grads`.
pub fn backward_into(params: &NetParams, trace: &ForwardTrace, head: &HeadGrad, grads: &mut NetGrads) {
    let mut h3 = [0.0f32; TRUNK];
    for (h, &p) in h3.iter_mut().zip(trace.pre3.iter()) {
        *h = relu(p);
    }

    // Heads.
    let aw = params.slice(OFF_AW, LEN_AW);
    let cw = params.slice(OFF_CW, LEN_CW);
    let mut dh3 = [0.0f32; TRUNK];
    {
        let (gaw, rest) = grads.data[OFF_AW..].split_at_mut(LEN_AW);
        let gab = &mut rest[..LEN_AB];
        for i in 0..TRUNK {
            let hv = h3[i];
            if hv != 0.0 {
                fma_row(&mut gaw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], &head.dlogits, hv);
            }
            dh3[i] = math::dot(&aw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], &head.dlogits)
                + cw[i] * head.dvalue;
        }
        for (g, &dl) in gab.iter_mut().zip(head.dlogits.iter()) {
            *g += dl;
        }
    }
    {
        let gcw = &mut grads.data[OFF_CW..OFF_CW + LEN_CW];
        math::axpy(head.dvalue, &h3, gcw);
        grads.data[OFF_CB] += head.dvalue;
    }

    // Trunk.
    let mut dpre3 = [0.0f32; TRUNK];
    for i in 0..TRUNK {
        dpre3[i] = if trace.pre3[i] > 0.0 { dh3[i] } else { 0.0 };
    }
    let tw = params.slice(OFF_TW, LEN_TW);
    let mut dh2 = [0.0f32; FLAT];
    {
        let gtw = &mut grads.data[OFF_TW..OFF_TW + LEN_TW];
        for i in 0..FLAT {
            let v = relu(trace.pre2[i]);
            if v != 0.0 {
                fma_row(&mut gtw[i * TRUNK..(i + 1) * TRUNK], &dpre3, v);
            }
        }
    }
    for i in 0..FLAT {
        if trace.pre2[i] > 0.0 {
            dh2[i] = math::dot(&tw[i * TRUNK..(i + 1) * TRUNK], &dpre3);
        }
    }
    {
        let gtb = &mut grads.data[OFF_TB..OFF_TB + LEN_TB];
        math::axpy(1.0, &dpre3, gtb);
    }

    // conv2 (dh2 already gated by relu(pre2)).
    let mut h1 = [0.0f32; S * S * C1];
    for (h, &p) in h1.iter_mut().zip(trace.pre1.iter()) {
        *h = relu(p);
    }
    let w2 = params.slice(OFF_C2W, LEN_C2W);
    let mut dh1 = [0.0f32; S * S * C1];
    {
        let (gw2, rest) = grads.data[OFF_C2W..].split_at_mut(LEN_C2W);
        let gb2 = &mut rest[..LEN_C2B];
        conv_backward::<C1, C2>(&h1, w2, &dh2, Some(gw2), Some(gb2), Some(&mut dh1));
    }

    // conv1.
    let mut dpre1 = [0.0f32; S * S * C1];
    for i in 0..S * S * C1 {
        dpre1[i] = if trace.pre1[i] > 0.0 { dh1[i] } else { 0.0 };
    }
    let w1 = params.slice(OFF_C1W, LEN_C1W);
    {
        let (gw1, rest) = grads.data[OFF_C1W..].split_at_mut(LEN_C1W);
        let gb1 = &mut rest[..LEN_C1B];
        conv_backward::<C_IN, C1>(&trace.x, w1, &dpre1, Some(gw1), Some(gb1), None);
    }
}

/// Exact gradient of a scalar head loss with respect to the observation.
pub fn input_gradient(params: &NetParams, obs: &Obs, loss: &ScalarLoss) -> [f32; OBS_LEN] {
    let (out, trace) = forward(params, obs);
    let head = head_grad_for(&out, loss);
    input_gradient_from_trace(params, &trace, &head)
}

/// Head gradient vector for a [`ScalarLoss`] at the given output.
pub fn head_grad_for(out: &PolicyOutput, loss: &ScalarLoss) -> HeadGrad {
    let mut dlogits = [0.0f32; NUM_ACTIONS];
    match loss {
        ScalarLoss::CrossEntropy { target } => {
            for a in 0..NUM_ACTIONS {
                dlogits[a] = out.probs[a] - if a == *target { 1.0 } else { 0.0 };
            }
        }
        ScalarLoss::KlFrom { target } => {
            for a in 0..NUM_ACTIONS {
                dlogits[a] = out.probs[a] - target[a];
            }
        }
    }
    HeadGrad { dlogits, dvalue: 0.0 }
}

/// Scalar loss value for a [`ScalarLoss`] at the given output.
pub fn scalar_loss_value(out: &PolicyOutput, loss: &ScalarLoss) -> f32 {
    match loss {
        ScalarLoss::CrossEntropy { target } => -out.log_probs()[*target],
        ScalarLoss::KlFrom { target } => math::kl_div(target, &out.probs),
    }
}

/// Input-side backward pass reusing an existing trace.
pub fn input_gradient_from_trace(
    params: &NetParams,
    trace: &ForwardTrace,
    head: &HeadGrad,
) -> [f32; OBS_LEN] {
    let mut h3 = [0.0f32; TRUNK];
    for (h, &p) in h3.iter_mut().zip(trace.pre3.iter()) {
        *h = relu(p);
    }
    let aw = params.slice(OFF_AW, LEN_AW);
    let cw = params.slice(OFF_CW, LEN_CW);
    let mut dpre3 = [0.0f32; TRUNK];
    for i in 0..TRUNK {
        if trace.pre3[i] > 0.0 {
            dpre3[i] = math::dot(&aw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], &head.dlogits)
                + cw[i] * head.dvalue;
        }
    }

    let tw = params.slice(OFF_TW, LEN_TW);
    let mut dh2 = [0.0f32; FLAT];
    for i in 0..FLAT {
        if trace.pre2[i] > 0.0 {
            dh2[i] = math::dot(&tw[i * TRUNK..(i + 1) * TRUNK], &dpre3);
        }
    }

    let w2 = params.slice(OFF_C2W, LEN_C2W);
    let mut h1 = [0.0f32; S * S * C1];
    for (h, &p) in h1.iter_mut().zip(trace.pre1.iter()) {
        *h = relu(p);
    }
    let mut dh1 = [0.0f32; S * S * C1];
    conv_backward::<C1, C2>(&h1, w2, &dh2, None, None, Some(&mut dh1));

    let mut dpre1 = [0.0f32; S * S * C1];
    for i in 0..S * S * C1 {
        dpre1[i] = if trace.pre1[i] > 0.0 { dh1[i] } else { 0.0 };
    }
    let w1 = params.slice(OFF_C1W, LEN_C1W);
    let mut dx = [0.0f32; S * S * C_IN];
    conv_backward::<C_IN, C1>(&trace.x, w1, &dpre1, None, None, Some(&mut dx));

    // Back to channel-major observation layout.
    let mut grad = [0.0f32; OBS_LEN];
    for y in 0..S {
        for x in 0..S {
            for c in 0..C_IN {
                grad[c * S * S + y * S + x] = dx[(y * S + x) * C_IN + c];
            }
        }
    }
    grad
}

/// Transposed weight copies for repeated backward passes.
///
/// The plain backward computes input-side gradients as dot-product
/// reductions; with the weights transposed the same sums become
/// broadcast FMAs over contiguous rows (with ReLU-zero skipping), which
/// is substantially faster. Building the copies costs about one
/// backward pass, so prepare once per batch of backward work.
pub struct Prepared {
    conv1_t: Vec<f32>, // [ky][kx][C1][C_IN]
    conv2_t: Vec<f32>, // [ky][kx][C2][C1]
    trunk_t: Vec<f32>, // [TRUNK][FLAT]
}

impl Prepared {
    pub fn new(params: &NetParams) -> Prepared {
        let w1 = params.slice(OFF_C1W, LEN_C1W);
        let mut conv1_t = vec![0.0f32; LEN_C1W];
        for k in 0..9 {
            for ic in 0..C_IN {
                for oc in 0..C1 {
                    conv1_t[(k * C1 + oc) * C_IN + ic] = w1[(k * C_IN + ic) * C1 + oc];
                }
            }
        }
        let w2 = params.slice(OFF_C2W, LEN_C2W);
        let mut conv2_t = vec![0.0f32; LEN_C2W];
        for k in 0..9 {
            for ic in 0..C1 {
                for oc in 0..C2 {
                    conv2_t[(k * C2 + oc) * C1 + ic] = w2[(k * C1 + ic) * C2 + oc];
                }
            }
        }
        let tw = params.slice(OFF_TW, LEN_TW);
        let mut trunk_t = vec![0.0f32; LEN_TW];
        for i in 0..FLAT {
            for j in 0..TRUNK {
                trunk_t[j * FLAT + i] = tw[i * TRUNK + j];
            }
        }
        Prepared { conv1_t, conv2_t, trunk_t }
    }
}

/// dinput[..][ic] += sum_oc w[ky][kx][ic][oc] * dout[..][oc], in
/// broadcast form over the transposed weights.
fn conv_dx_broadcast<const IN: usize, const OUT: usize>(
    w_t: &[f32],
    dout: &[f32],
    dinput: &mut [f32],
) {
    for y in 0..S {
        let ky_lo = if y == 0 { 1 } else { 0 };
        let ky_hi = if y == S - 1 { 2 } else { 3 };
        for x in 0..S {
            let kx_lo = if x == 0 { 1 } else { 0 };
            let kx_hi = if x == S - 1 { 2 } else { 3 };
            let d = &dout[(y * S + x) * OUT..(y * S + x + 1) * OUT];
            for (oc, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for ky in ky_lo..ky_hi {
                    let iy = y + ky - 1;
                    for kx in kx_lo..kx_hi {
                        let ix = x + kx - 1;
                        let w_base = ((ky * 3 + kx) * OUT + oc) * IN;
                        fma_row(
                            &mut dinput[(iy * S + ix) * IN..(iy * S + ix + 1) * IN],
                            &w_t[w_base..w_base + IN],
                            dv,
                        );
                    }
                }
            }
        }
    }
}

/// Backward pieces shared by the prepared paths: head gradients down to
/// the (ReLU-gated) conv2 output gradient.
fn backward_to_dh2(
    prep: &Prepared,
    params: &NetParams,
    trace: &ForwardTrace,
    head: &HeadGrad,
    grads: Option<&mut NetGrads>,
) -> [f32; FLAT] {
    let mut h3 = [0.0f32; TRUNK];
    for (h, &p) in h3.iter_mut().zip(trace.pre3.iter()) {
        *h = relu(p);
    }
    let aw = params.slice(OFF_AW, LEN_AW);
    let cw = params.slice(OFF_CW, LEN_CW);
    let mut dpre3 = [0.0f32; TRUNK];
    for i in 0..TRUNK {
        if trace.pre3[i] > 0.0 {
            dpre3[i] = math::dot(&aw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], &head.dlogits)
                + cw[i] * head.dvalue;
        }
    }

    if let Some(grads) = grads {
        // Head and trunk parameter gradients.
        {
            let (gaw, rest) = grads.data[OFF_AW..].split_at_mut(LEN_AW);
            let gab = &mut rest[..LEN_AB];
            for i in 0..TRUNK {
                let hv = h3[i];
                if hv != 0.0 {
                    fma_row(&mut gaw[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS], &head.dlogits, hv);
                }
            }
            for (g, &dl) in gab.iter_mut().zip(head.dlogits.iter()) {
                *g += dl;
            }
        }
        {
            let gcw = &mut grads.data[OFF_CW..OFF_CW + LEN_CW];
            math::axpy(head.dvalue, &h3, gcw);
            grads.data[OFF_CB] += head.dvalue;
        }
        {
            let gtw = &mut grads.data[OFF_TW..OFF_TW + LEN_TW];
            for i in 0..FLAT {
                let v = relu(trace.pre2[i]);
                if v != 0.0 {
                    fma_row(&mut gtw[i * TRUNK..(i + 1) * TRUNK], &dpre3, v);
                }
            }
            let gtb = &mut grads.data[OFF_TB..OFF_TB + LEN_TB];
            math::axpy(1.0, &dpre3, gtb);
        }
    }

    // Trunk input gradient in broadcast form, ReLU-gated afterwards.
    let mut dh2 = [0.0f32; FLAT];
    for (j, &v) in dpre3.iter().enumerate() {
        if v != 0.0 {
            fma_row(&mut dh2, &prep.trunk_t[j * FLAT..(j + 1) * FLAT], v);
        }
    }
    for i in 0..FLAT {
        if trace.pre2[i] <= 0.0 {
            dh2[i] = 0.0;
        }
    }
    dh2
}

/// [`backward_into`] with transposed-weight acceleration.
pub fn backward_into_prepared(
    prep: &Prepared,
    params: &NetParams,
    trace: &ForwardTrace,
    head: &HeadGrad,
    grads: &mut NetGrads,
) {
    let dh2 = backward_to_dh2(prep, params, trace, head, Some(grads));

    let mut h1 = [0.0f32; S * S * C1];
    for (h, &p) in h1.iter_mut().zip(trace.pre1.iter()) {
        *h = relu(p);
    }
    let mut dh1 = [0.0f32; S * S * C1];
    {
        let (gw2, rest) = grads.data[OFF_C2W..].split_at_mut(LEN_C2W);
        let gb2 = &mut rest[..LEN_C2B];
        conv_backward::<C1, C2>(&h1, &[], &dh2, Some(gw2), Some(gb2), None);
    }
    conv_dx_broadcast::<C1, C2>(&prep.conv2_t, &dh2, &mut dh1);

    let mut dpre1 = [0.0f32; S * S * C1];
    for i in 0..S * S * C1 {
        dpre1[i] = if trace.pre1[i] > 0.0 { dh1[i] } else { 0.0 };
    }
    {
        let (gw1, rest) = grads.data[OFF_C1W..].split_at_mut(LEN_C1W);
        let gb1 = &mut rest[..LEN_C1B];
        conv_backward::<C_IN, C1>(&trace.x, &[], &dpre1, Some(gw1), Some(gb1), None);
    }
}

/// [`input_gradient_from_trace`] with transposed-weight acceleration.
pub fn input_gradient_prepared(
    prep: &Prepared,
    params: &NetParams,
    trace: &ForwardTrace,
    head: &HeadGrad,
) -> [f32; OBS_LEN] {
    let dh2 = backward_to_dh2(prep, params, trace, head, None);

    let mut dh1 = [0.0f32; S * S * C1];
    conv_dx_broadcast::<C1, C2>(&prep.conv2_t, &dh2, &mut dh1);
    let mut dpre1 = [0.0f32; S * S * C1];
    for i in 0..S * S * C1 {
        dpre1[i] = if trace.pre1[i] > 0.0 { dh1[i] } else { 0.0 };
    }
    let mut dx = [0.0f32; S * S * C_IN];
    conv_dx_broadcast::<C_IN, C1>(&prep.conv1_t, &dpre1, &mut dx);

    let mut grad = [0.0f32; OBS_LEN];
    for y in 0..S {
        for x in 0..S {
            for c in 0..C_IN {
                grad[c * S * S + y * S + x] = dx[(y * S + x) * C_IN + c];
            }
        }
    }
    grad
}

// --- checkpoint codec -------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Serializes parameters to the `GRPN1` checkpoint byte format.
pub fn encode_checkpoint(params: &NetParams) -> Vec<u8> {
    let mut payload = Vec::with_capacity(PARAM_COUNT * 4 + 256);
    for (name, off, len, dims) in TENSORS {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            payload.extend_from_slice(&d.to_le_bytes());
        }
        for &v in params.slice(off, len) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 13);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let checksum = fnv1a(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a `GRPN1` checkpoint; the byte stream must round-trip exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetParams, NetError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(NetError::Truncated);
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic);
    }
    let payload = &bytes[CHECKPOINT_MAGIC.len()..bytes.len() - 8];
    let mut cur = Cursor { bytes: payload, pos: 0 };
    let mut data = vec![0.0f32; PARAM_COUNT];
    for (name, off, len, dims) in TENSORS {
        let name_len = cur.u32()? as usize;
        let got = cur.take(name_len)?;
        if got != name.as_bytes() {
            return Err(NetError::TensorName {
                expected: name,
                got: String::from_utf8_lossy(got).into_owned(),
            });
        }
        let rank = cur.u32()? as usize;
        if rank != dims.len() {
            return Err(NetError::TensorShape(name));
        }
        let mut product = 1usize;
        for &d in dims {
            let stored_dim = cur.u32()?;
            if stored_dim != d {
                return Err(NetError::TensorShape(name));
            }
            product *= stored_dim as usize;
        }
        debug_assert_eq!(product, len);
        let raw = cur.take(len * 4)?;
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            data[off + i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if cur.pos != payload.len() {
        return Err(NetError::TrailingBytes);
    }
    let tail = &bytes[bytes.len() - 8..];
    let stored = u64::from_le_bytes([
        tail[0], tail[1], tail[2], tail[3], tail[4], tail[5], tail[6], tail[7],
    ]);
    if fnv1a(payload) != stored {
        return Err(NetError::ChecksumMismatch);
    }
    Ok(NetParams { data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_obs(seed: u64) -> Obs {
        let mut rng = rng::stream(&[99, seed]);
        let mut obs = Obs::zeros();
        for v in obs.data.iter_mut() {
            *v = rng::unit_f32(&mut rng);
        }
        obs
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(42);
        let b = init_params(42);
        let c = init_params(43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.flat().len(), PARAM_COUNT);
    }

    #[test]
    fn zero_observation_gives_uniform_policy() {
        let params = init_params(7);
        let (out, _) = forward(&params, &Obs::zeros());
        for &p in out.probs.iter() {
            assert!((p - 0.2).abs() < 0.05, "probs {:?}", out.probs);
        }
        assert!((out.entropy() - 1.6094379).abs() < 1e-4);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(3);
        let obs = random_obs(1);
        let (a, _) = forward(&params, &obs);
        let (b, _) = forward(&params, &obs);
        assert_eq!(a, b);
    }

    #[test]
    fn probabilities_normalize() {
        let params = init_params(11);
        for s in 0..20 {
            let (out, _) = forward(&params, &random_obs(s));
            let sum: f32 = out.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let h = out.entropy();
            assert!((0.0..=1.60944 + 1e-4).contains(&h));
        }
    }

    #[test]
    fn batch_forward_equals_loop() {
        let params = init_params(5);
        let batch: alloc::vec::Vec<Obs> = (0..8).map(random_obs).collect();
        let outs = forward_batch(&params, &batch);
        for (i, obs) in batch.iter().enumerate() {
            let (single, _) = forward(&params, obs);
            assert_eq!(single, outs[i].0);
        }
    }

    #[test]
    fn zero_head_grad_gives_zero_grads() {
        let params = init_params(1);
        let (_, trace) = forward(&params, &random_obs(0));
        let grads = backward_params(&params, trace, &HeadGrad::default());
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn actor_bias_gradient_of_logit_sum_is_ones() {
        let params = init_params(2);
        let (_, trace) = forward(&params, &random_obs(3));
        let head = HeadGrad { dlogits: [1.0; NUM_ACTIONS], dvalue: 0.0 };
        let grads = backward_params(&params, trace, &head);
        let gab = &grads.flat()[OFF_AB..OFF_AB + LEN_AB];
        assert!(gab.iter().all(|&g| (g - 1.0).abs() < 1e-6), "{gab:?}");
    }

    #[test]
    fn kl_gradient_at_identical_distribution_is_zero() {
        let params = init_params(9);
        let obs = random_obs(4);
        let (out, _) = forward(&params, &obs);
        let g = input_gradient(&params, &obs, &ScalarLoss::KlFrom { target: out.probs });
        assert!(g.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        // Zeroing conv1 weights makes the net input-independent.
        let mut params = init_params(6);
        params.flat_mut()[OFF_C1W..OFF_C1W + LEN_C1W].iter_mut().for_each(|w| *w = 0.0);
        let g = input_gradient(&params, &random_obs(8), &ScalarLoss::CrossEntropy { target: 2 });
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let params = init_params(42);
        let bytes = encode_checkpoint(&params);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(params, back);
        let bytes2 = encode_checkpoint(&back);
        assert_eq!(bytes, bytes2);
        // Loaded params reproduce forward outputs exactly.
        let obs = random_obs(12);
        assert_eq!(forward(&params, &obs).0, forward(&back, &obs).0);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let params = init_params(1);
        let bytes = encode_checkpoint(&params);
        assert_eq!(decode_checkpoint(&bytes[..100]), Err(NetError::Truncated));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_checkpoint(&bad_magic), Err(NetError::BadMagic));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert_eq!(decode_checkpoint(&flipped), Err(NetError::ChecksumMismatch));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let params = init_params(8);
        let batch: alloc::vec::Vec<Obs> = (0..6).map(random_obs).collect();
        let fwd: alloc::vec::Vec<PolicyOutput> =
            forward_batch(&params, &batch).into_iter().map(|(o, _)| o).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: alloc::vec::Vec<Obs> = perm.iter().map(|&i| batch[i].clone()).collect();
        let fwd_perm: alloc::vec::Vec<PolicyOutput> =
            forward_batch(&params, &permuted).into_iter().map(|(o, _)| o).collect();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(fwd[i], fwd_perm[j]);
        }
    }
}
