//! Observation perturbations under the asymmetric clipped l-infinity ball.
//!
//! Gradient attacks (FGSM, PGD) maximize the cross-entropy of a source
//! network's policy against its own clean argmax action; stochastic
//! attacks (Gaussian, salt-and-pepper, channel dropout) use no gradient
//! information. Because clean observations are {0,1}-valued, the per-pixel
//! interval `[max(0, o - eps), min(1, o + eps)]` is one-sided at both
//! extremes: an occupied pixel can only be attacked downward, an empty
//! one only upward. Every attack output is clipped into that interval
//! (stochastic attacks: into [0, 1]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Obs, OBS_LEN, OBS_SIDE};
use crate::math;
use crate::net::{self, NetParams, ScalarLoss};

/// Attack families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Gaussian,
    SaltPepper,
    ChannelDropout,
}

/// An attack family plus its parameters. Only the fields relevant to
/// `kind` are meaningful; the rest stay at their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// l-infinity budget for gradient attacks.
    pub eps: f32,
    /// PGD step count.
    pub steps: u32,
    /// PGD restarts inside one call (best final loss wins).
    pub restarts: u32,
    /// Gaussian sensor-noise standard deviation.
    pub sigma: f32,
    /// Salt-and-pepper flip rate or channel-dropout rate.
    pub rate: f32,
}

impl AttackSpec {
    pub fn none() -> AttackSpec {
        AttackSpec { kind: AttackKind::None, eps: 0.0, steps: 0, restarts: 1, sigma: 0.0, rate: 0.0 }
    }

    pub fn fgsm(eps: f32) -> AttackSpec {
        AttackSpec { kind: AttackKind::Fgsm, eps, ..AttackSpec::none() }
    }

    pub fn pgd(eps: f32, steps: u32, restarts: u32) -> AttackSpec {
        AttackSpec { kind: AttackKind::Pgd, eps, steps, restarts, ..AttackSpec::none() }
    }

    pub fn gaussian(sigma: f32) -> AttackSpec {
        AttackSpec { kind: AttackKind::Gaussian, sigma, ..AttackSpec::none() }
    }

    pub fn salt_pepper(rate: f32) -> AttackSpec {
        AttackSpec { kind: AttackKind::SaltPepper, rate, ..AttackSpec::none() }
    }

    pub fn channel_dropout(rate: f32) -> AttackSpec {
        AttackSpec { kind: AttackKind::ChannelDropout, rate, ..AttackSpec::none() }
    }

    /// Human-readable label, e.g. `fgsm@0.20`.
    pub fn label(&self) -> alloc::string::String {
        use alloc::format;
        match self.kind {
            AttackKind::None => format!("none"),
            AttackKind::Fgsm => format!("fgsm@{:.2}", self.eps),
            AttackKind::Pgd => format!("pgd{}@{:.2}", self.steps, self.eps),
            AttackKind::Gaussian => format!("gauss@{:.2}", self.sigma),
            AttackKind::SaltPepper => format!("saltpepper@{:.2}", self.rate),
            AttackKind::ChannelDropout => format!("dropout@{:.2}", self.rate),
        }
    }
}

/// Projects `candidate` into the budget ball around the clean `o`.
pub fn clip_to_ball(o: &Obs, candidate: &Obs, eps: f32) -> Obs {
    let mut out = Obs::zeros();
    for i in 0..OBS_LEN {
        let lo = (o.data[i] - eps).max(0.0);
        let hi = (o.data[i] + eps).min(1.0);
        out.data[i] = math::clampf(candidate.data[i], lo, hi);
    }
    out
}

/// The attacker's target: the source policy's own clean argmax action.
pub fn clean_target(source: &NetParams, o: &Obs) -> usize {
    net::forward(source, o).0.greedy()
}

/// One sign-gradient step at full budget, then a clip into the ball.
pub fn fgsm(source: &NetParams, o: &Obs, eps: f32) -> Obs {
    let target = clean_target(source, o);
    let grad = net::input_gradient(source, o, &ScalarLoss::CrossEntropy { target });
    let mut cand = o.clone();
    for i in 0..OBS_LEN {
        cand.data[i] += eps * math::sign(grad[i]);
    }
    clip_to_ball(o, &cand, eps)
}

/// Projected sign-gradient ascent from a uniform random start in the
/// ball: `steps` steps of size `2 * eps / steps`, projected after each
/// step; over `restarts` starts the candidate with the highest final
/// attacker loss wins.
pub fn pgd<R: Rng>(
    source: &NetParams,
    o: &Obs,
    eps: f32,
    steps: u32,
    restarts: u32,
    rng: &mut R,
) -> Obs {
    debug_assert!(steps >= 1);
    let target = clean_target(source, o);
    let loss = ScalarLoss::CrossEntropy { target };
    let alpha = 2.0 * eps / steps as f32;
    let prep = net::Prepared::new(source);

    let mut best: Option<(f32, Obs)> = None;
    for _ in 0..restarts.max(1) {
        let mut x = Obs::zeros();
        for i in 0..OBS_LEN {
            let lo = (o.data[i] - eps).max(0.0);
            let hi = (o.data[i] + eps).min(1.0);
            x.data[i] = crate::rng::uniform_f32(rng, lo, hi);
        }
        for _ in 0..steps {
            let (out, trace) = net::forward(source, &x);
            let head = net::head_grad_for(&out, &loss);
            let grad = net::input_gradient_prepared(&prep, source, &trace, &head);
            for i in 0..OBS_LEN {
                x.data[i] += alpha * math::sign(grad[i]);
            }
            x = clip_to_ball(o, &x, eps);
        }
        let final_loss = net::scalar_loss_value(&net::forward(source, &x).0, &loss);
        if best.as_ref().map_or(true, |(l, _)| final_loss > *l) {
            best = Some((final_loss, x));
        }
    }
    best.expect("at least one restart").1
}

/// Gradient-free sensor noise. Gaussian adds N(0, sigma^2) per pixel and
/// clamps to [0, 1]; salt-and-pepper resets each pixel to 0 or 1 (equal
/// odds) at the given rate; channel dropout zeroes whole channels.
pub fn sensor_noise<R: Rng>(o: &Obs, kind: AttackKind, parameter: f32, rng: &mut R) -> Obs {
    let mut out = o.clone();
    match kind {
        AttackKind::Gaussian => {
            for v in out.data.iter_mut() {
                // Box-Muller on two uniform draws.
                let u1: f32 = 1.0 - crate::rng::unit_f32(rng);
                let u2: f32 = crate::rng::unit_f32(rng);
                let z = math::sqrtf(-2.0 * math::lnf(u1))
                    * (math::cos(2.0 * core::f64::consts::PI * u2 as f64) as f32);
                *v = math::clampf(*v + parameter * z, 0.0, 1.0);
            }
        }
        AttackKind::SaltPepper => {
            for v in out.data.iter_mut() {
                if crate::rng::unit_f32(rng) < parameter {
                    *v = if crate::rng::unit_f32(rng) < 0.5 { 1.0 } else { 0.0 };
                }
            }
        }
        AttackKind::ChannelDropout => {
            let plane = OBS_SIDE * OBS_SIDE;
            for c in 0..crate::env::OBS_CHANNELS {
                if crate::rng::unit_f32(rng) < parameter {
                    out.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        _ => panic!("sensor_noise called with a gradient attack kind"),
    }
    out
}

/// Applies an [`AttackSpec`] to one observation. `source` is the network
/// the attacker differentiates through (the defender at evaluation time,
/// a frozen baseline during training).
pub fn apply<R: Rng>(spec: &AttackSpec, source: &NetParams, o: &Obs, rng: &mut R) -> Obs {
    match spec.kind {
        AttackKind::None => o.clone(),
        AttackKind::Fgsm => fgsm(source, o, spec.eps),
        AttackKind::Pgd => pgd(source, o, spec.eps, spec.steps.max(1), spec.restarts.max(1), rng),
        AttackKind::Gaussian => sensor_noise(o, AttackKind::Gaussian, spec.sigma, rng),
        AttackKind::SaltPepper => sensor_noise(o, AttackKind::SaltPepper, spec.rate, rng),
        AttackKind::ChannelDropout => sensor_noise(o, AttackKind::ChannelDropout, spec.rate, rng),
    }
}
