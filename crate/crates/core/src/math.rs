//! Small numeric helpers shared across the crate.
//!
//! Transcendentals go through `libm` so the crate builds without `std`;
//! the wrappers also keep results bit-identical across platforms.

/// Number of discrete actions (WAIT, UP, DOWN, LEFT, RIGHT).
pub const NUM_ACTIONS: usize = 5;

#[inline(always)]
pub fn expf(x: f32) -> f32 {
    libm::expf(x)
}

#[inline(always)]
pub fn lnf(x: f32) -> f32 {
    libm::logf(x)
}

#[inline(always)]
pub fn sqrtf(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline(always)]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

#[inline(always)]
pub fn lgamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[inline(always)]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline(always)]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

/// floor(x) for non-negative inputs used in count arithmetic.
#[inline(always)]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// sign with sign(0) = 0, so zero gradients leave inputs untouched.
#[inline(always)]
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline(always)]
pub fn clampf(x: f32, lo: f32, hi: f32) -> f32 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Log-softmax of a logit vector (max-shifted for stability).
pub fn log_softmax(logits: &[f32; NUM_ACTIONS]) -> [f32; NUM_ACTIONS] {
    let mut max = logits[0];
    for &l in logits.iter().skip(1) {
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0f32;
    for &l in logits.iter() {
        sum += expf(l - max);
    }
    let log_z = max + lnf(sum);
    let mut out = [0.0f32; NUM_ACTIONS];
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        *o = l - log_z;
    }
    out
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f32; NUM_ACTIONS]) -> [f32; NUM_ACTIONS] {
    let ls = log_softmax(logits);
    let mut out = [0.0f32; NUM_ACTIONS];
    for (o, &l) in out.iter_mut().zip(ls.iter()) {
        *o = expf(l);
    }
    out
}

/// Shannon entropy of a probability vector, in nats.
pub fn entropy(probs: &[f32; NUM_ACTIONS]) -> f32 {
    let mut h = 0.0f32;
    for &p in probs.iter() {
        if p > 0.0 {
            h -= p * lnf(p);
        }
    }
    h
}

/// KL(p || q) over the action simplex; terms with p = 0 contribute zero.
pub fn kl_div(p: &[f32; NUM_ACTIONS], q: &[f32; NUM_ACTIONS]) -> f32 {
    let mut kl = 0.0f32;
    for i in 0..NUM_ACTIONS {
        if p[i] > 0.0 {
            let qi = if q[i] > 1e-12 { q[i] } else { 1e-12 };
            kl += p[i] * (lnf(p[i]) - lnf(qi));
        }
    }
    if kl < 0.0 {
        0.0
    } else {
        kl
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Dot product with four accumulators to break the add latency chain.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += alpha * x over equal-length slices.
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}
