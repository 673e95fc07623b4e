//! Rollout collection, generalized advantage estimation, and the clipped
//! PPO objective.
//!
//! Rollouts run on clean observations with actions sampled from the
//! policy; each agent's trajectory ends on the step it reaches its goal
//! (parked agents take no further decisions) or at the horizon, with a
//! zero bootstrap value at the cut. Records flatten in (episode, agent,
//! step) order so batches are deterministic for a given seed no matter
//! how episodes were scheduled.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, EnvConfig, EpisodeState, Obs};
use crate::math::{self, NUM_ACTIONS};
use crate::net::{self, HeadGrad, NetGrads, NetParams};
use crate::pool::{self, JobPool};
use crate::rng;

/// PPO hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f32,
    pub discount: f32,
    pub gae_lambda: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub clip: f32,
    pub epochs: usize,
    pub minibatches: usize,
    pub episodes_per_batch: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 3e-4,
            discount: 0.95,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            episodes_per_batch: 16,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PpoError {
    #[error("sequence lengths differ: rewards {rewards}, values {values}, dones {dones}")]
    LengthMismatch { rewards: usize, values: usize, dones: usize },
    #[error("minibatch is empty")]
    EmptyMinibatch,
}

/// One agent-step record collected under the rollout policy.
#[derive(Clone, Debug)]
pub struct Record {
    pub obs: Obs,
    pub action: usize,
    pub logp_old: f32,
    pub value: f32,
    pub adv: f32,
    pub ret: f32,
    pub done: bool,
}

/// Flattened rollout data plus batch-level statistics.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryBatch {
    pub records: Vec<Record>,
    pub episodes: usize,
    pub env_steps: usize,
    pub mean_success: f32,
    pub mean_entropy: f32,
}

/// Standard GAE recursion per agent sequence; values bootstrap to zero
/// at episode cuts. Returns (advantages, returns = advantages + values).
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    discount: f32,
    gae_lambda: f32,
) -> Result<(Vec<f32>, Vec<f32>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PpoError::LengthMismatch {
            rewards: rewards.len(),
            values: values.len(),
            dones: dones.len(),
        });
    }
    let n = rewards.len();
    let mut advs = vec![0.0f32; n];
    let mut rets = vec![0.0f32; n];
    let mut carry = 0.0f64;
    for t in (0..n).rev() {
        let next_value = if dones[t] || t + 1 == n { 0.0 } else { values[t + 1] as f64 };
        let delta = rewards[t] as f64 + discount as f64 * next_value - values[t] as f64;
        let next_carry = if dones[t] { 0.0 } else { carry };
        carry = delta + discount as f64 * gae_lambda as f64 * next_carry;
        advs[t] = carry as f32;
        rets[t] = (carry + values[t] as f64) as f32;
    }
    Ok((advs, rets))
}

/// Samples one action index from a probability vector with a single
/// uniform draw.
pub fn sample_action<R: Rng>(probs: &[f32; NUM_ACTIONS], rng: &mut R) -> usize {
    let u = rng::unit_f32(rng);
    let mut cum = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    NUM_ACTIONS - 1
}

/// Runs one training episode from `state` with sampled actions and
/// returns the per-agent records (GAE already applied) plus the success
/// fraction, the entropy sum, and the number of environment steps taken.
pub fn rollout_episode<R: Rng>(
    params: &NetParams,
    mut state: EpisodeState,
    cfg: &PpoConfig,
    rng: &mut R,
) -> (Vec<Record>, f32, f64, usize) {
    let n = state.agents.len();
    // Per-agent growing sequences.
    let mut seq: Vec<(Vec<Record>, Vec<f32>, Vec<bool>, Vec<f32>)> =
        (0..n).map(|_| (Vec::new(), Vec::new(), Vec::new(), Vec::new())).collect();
    let mut entropy_sum = 0.0f64;
    let mut env_steps = 0usize;

    while !state.is_terminal() {
        let mut actions = vec![Action::Wait; n];
        let mut acted = vec![false; n];
        for i in 0..n {
            if state.agents[i].reached {
                continue;
            }
            let obs = env::observe(&state, i);
            let (out, _) = net::forward(params, &obs);
            let a = sample_action(&out.probs, rng);
            entropy_sum += out.entropy() as f64;
            actions[i] = Action::from_index(a);
            acted[i] = true;
            seq[i].0.push(Record {
                obs,
                action: a,
                logp_old: out.log_probs()[a],
                value: out.value,
                adv: 0.0,
                ret: 0.0,
                done: false,
            });
        }
        let outcome = state.step(&actions).expect("stepped a terminal episode");
        env_steps += 1;
        for i in 0..n {
            if !acted[i] {
                continue;
            }
            let done = state.agents[i].reached || state.is_terminal();
            seq[i].1.push(outcome.rewards[i]);
            seq[i].2.push(done);
            seq[i].3.push(0.0);
        }
    }

    let success = state.success_rate().expect("episode ended terminal");
    let mut records = Vec::new();
    let mut decisions = 0usize;
    for (mut recs, rewards, dones, _) in seq {
        let values: Vec<f32> = recs.iter().map(|r| r.value).collect();
        let (advs, rets) =
            compute_gae(&rewards, &values, &dones, cfg.discount, cfg.gae_lambda).expect("aligned");
        for (i, r) in recs.iter_mut().enumerate() {
            r.adv = advs[i];
            r.ret = rets[i];
            r.done = dones[i];
        }
        decisions += recs.len();
        records.extend(recs);
    }
    let mean_entropy = if decisions > 0 { entropy_sum / decisions as f64 } else { 0.0 };
    (records, success, mean_entropy, env_steps)
}

/// Collects a batch of clean episodes. Instances and action streams are
/// keyed per (seed, episode index), so batches are reproducible and
/// episodes can run on any pool.
pub fn rollout(
    params: &NetParams,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    seed: u64,
    episodes: usize,
    pool: &dyn JobPool,
) -> TrajectoryBatch {
    let per_episode = pool::run_jobs(pool, episodes, |i| {
        let instance_seed = rng::mix(&[seed, i as u64, 0x0e_15]);
        let state = env::generate_instance(instance_seed, env_cfg)
            .expect("rollout instance generation failed");
        let mut action_rng = rng::stream(&[rng::tag::ROLLOUT_ACTIONS, seed, i as u64]);
        rollout_episode(params, state, cfg, &mut action_rng)
    });

    let mut batch = TrajectoryBatch::default();
    batch.episodes = episodes;
    let mut entropy_acc = 0.0f64;
    let mut success_acc = 0.0f64;
    let mut decision_acc = 0usize;
    for (records, success, mean_entropy, env_steps) in per_episode {
        entropy_acc += mean_entropy * records.len() as f64;
        decision_acc += records.len();
        success_acc += success as f64;
        batch.env_steps += env_steps;
        batch.records.extend(records);
    }
    if episodes > 0 {
        batch.mean_success = (success_acc / episodes as f64) as f32;
    }
    if decision_acc > 0 {
        batch.mean_entropy = (entropy_acc / decision_acc as f64) as f32;
    }
    batch
}

/// Per-minibatch advantage normalization (mean 0, population std 1,
/// std floor 1e-8).
pub fn normalize_advantages(advs: &[f32]) -> Vec<f32> {
    let n = advs.len().max(1) as f64;
    let mean: f64 = advs.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var: f64 = advs.iter().map(|&a| (a as f64 - mean) * (a as f64 - mean)).sum::<f64>() / n;
    let std = math::sqrt(var).max(1e-8);
    advs.iter().map(|&a| ((a as f64 - mean) / std) as f32).collect()
}

/// One loss sample: a record view with its minibatch-normalized
/// advantage and the (possibly perturbed) observation to evaluate at.
pub struct LossSample<'a> {
    pub obs: &'a Obs,
    pub action: usize,
    pub logp_old: f32,
    pub ret: f32,
    pub adv_norm: f32,
}

/// Scalar diagnostics of one PPO loss evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub total: f32,
    pub surrogate: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub clip_fraction: f32,
}

/// Per-sample loss pieces and head gradient (scaled by `scale`, normally
/// `1 / minibatch_len`). Returns (surrogate, value sq err, entropy,
/// clipped flag, head grad).
pub fn ppo_sample_terms(
    params: &NetParams,
    s: &LossSample<'_>,
    cfg: &PpoConfig,
    scale: f32,
) -> (f32, f32, f32, bool, HeadGrad) {
    let (out, _) = net::forward(params, s.obs);
    let logp = out.log_probs();
    let ratio = math::expf(logp[s.action] - s.logp_old);
    let unclipped = ratio * s.adv_norm;
    let clipped = math::clampf(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * s.adv_norm;
    let take_unclipped = unclipped <= clipped;
    let surrogate = if take_unclipped { unclipped } else { clipped };
    let verr = out.value - s.ret;
    let entropy = out.entropy();

    let mut head = HeadGrad::default();
    // d(-surrogate)/dlogits: the clipped branch is locally constant.
    if take_unclipped {
        let coef = -ratio * s.adv_norm * scale;
        for j in 0..NUM_ACTIONS {
            let e = if j == s.action { 1.0 } else { 0.0 };
            head.dlogits[j] += coef * (e - out.probs[j]);
        }
    }
    // d(c_v (v - ret)^2)/dv
    head.dvalue = scale * 2.0 * cfg.value_coef * verr;
    // d(-c_H H)/dlogits
    for j in 0..NUM_ACTIONS {
        let p = out.probs[j];
        if p > 0.0 {
            head.dlogits[j] += scale * cfg.entropy_coef * p * (math::lnf(p) + entropy);
        }
    }
    (surrogate, verr * verr, entropy, !take_unclipped, head)
}

/// The clipped PPO loss over one minibatch: `-E[min(r A, clip(r) A)]
/// + c_v E[(v - R)^2] - c_H E[H]`, with advantages normalized per
/// minibatch. Value/diagnostics only; the training loop applies the
/// matching gradients via [`ppo_sample_terms`].
pub fn ppo_loss(
    params: &NetParams,
    samples: &[LossSample<'_>],
    cfg: &PpoConfig,
) -> Result<PpoDiagnostics, PpoError> {
    if samples.is_empty() {
        return Err(PpoError::EmptyMinibatch);
    }
    let scale = 1.0 / samples.len() as f32;
    let mut surr = 0.0f64;
    let mut vloss = 0.0f64;
    let mut ent = 0.0f64;
    let mut clipped = 0usize;
    for s in samples {
        let (sg, ve, h, was_clipped, _) = ppo_sample_terms(params, s, cfg, scale);
        surr += sg as f64;
        vloss += ve as f64;
        ent += h as f64;
        if was_clipped {
            clipped += 1;
        }
    }
    let n = samples.len() as f64;
    let surrogate = (surr / n) as f32;
    let value_loss = (vloss / n) as f32;
    let entropy = (ent / n) as f32;
    Ok(PpoDiagnostics {
        total: -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy,
        surrogate,
        value_loss,
        entropy,
        clip_fraction: clipped as f32 / samples.len() as f32,
    })
}

/// Adam with (0.9, 0.999, 1e-8) moments and bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new() -> Adam {
        Adam { m: vec![0.0; net::PARAM_COUNT], v: vec![0.0; net::PARAM_COUNT], t: 0 }
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &NetGrads, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - math::powf(Self::BETA1, self.t as f64);
        let bc2 = 1.0 - math::powf(Self::BETA2, self.t as f64);
        let b1 = Self::BETA1 as f32;
        let b2 = Self::BETA2 as f32;
        let flat = params.flat_mut();
        let g = grads.flat();
        for i in 0..flat.len() {
            let gi = g[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
            let mhat = self.m[i] as f64 / bc1;
            let vhat = self.v[i] as f64 / bc2;
            flat[i] -= (lr as f64 * mhat / (math::sqrt(vhat) + Self::EPS)) as f32;
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

/// Plain SGD step used by the proximal hinge update.
pub fn sgd_step(params: &mut NetParams, grads: &NetGrads, lr: f32) {
    math::axpy(-lr, grads.flat(), params.flat_mut());
}

/// Accumulates PPO gradients over samples into `grads` and returns the
/// summed (surrogate, value sq err, entropy, clipped count).
pub fn accumulate_ppo_grads(
    params: &NetParams,
    samples: &[LossSample<'_>],
    cfg: &PpoConfig,
    scale: f32,
    grads: &mut NetGrads,
) -> (f64, f64, f64, usize) {
    let prep = net::Prepared::new(params);
    accumulate_ppo_grads_with(&prep, params, samples, cfg, scale, grads)
}

/// [`accumulate_ppo_grads`] against a caller-owned [`net::Prepared`]
/// (share one across the backward work of a shard).
pub fn accumulate_ppo_grads_with(
    prep: &net::Prepared,
    params: &NetParams,
    samples: &[LossSample<'_>],
    cfg: &PpoConfig,
    scale: f32,
    grads: &mut NetGrads,
) -> (f64, f64, f64, usize) {
    let mut surr = 0.0f64;
    let mut vloss = 0.0f64;
    let mut ent = 0.0f64;
    let mut clipped = 0usize;
    for s in samples {
        let (out, trace) = net::forward(params, s.obs);
        let logp = out.log_probs();
        let ratio = math::expf(logp[s.action] - s.logp_old);
        let unclipped = ratio * s.adv_norm;
        let clip_val = math::clampf(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * s.adv_norm;
        let take_unclipped = unclipped <= clip_val;
        surr += if take_unclipped { unclipped } else { clip_val } as f64;
        let verr = out.value - s.ret;
        vloss += (verr * verr) as f64;
        let entropy = out.entropy();
        ent += entropy as f64;
        if !take_unclipped {
            clipped += 1;
        }

        let mut head = HeadGrad::default();
        if take_unclipped {
            let coef = -ratio * s.adv_norm * scale;
            for j in 0..NUM_ACTIONS {
                let e = if j == s.action { 1.0 } else { 0.0 };
                head.dlogits[j] += coef * (e - out.probs[j]);
            }
        }
        head.dvalue = scale * 2.0 * cfg.value_coef * verr;
        for j in 0..NUM_ACTIONS {
            let p = out.probs[j];
            if p > 0.0 {
                head.dlogits[j] += scale * cfg.entropy_coef * p * (math::lnf(p) + entropy);
            }
        }
        net::backward_into_prepared(prep, params, &trace, &head, grads);
    }
    (surr, vloss, ent, clipped)
}
