//! Robust training: adversarial PPO with a state-adversarial KL term, a
//! uniform-noise smoothness term, a scheduled regularizer weight, and a
//! robust checkpoint selector; plus the certified-radius hinge
//! fine-tune applied as a separate proximal step.
//!
//! One trainer drives all three stages. With every robust knob at zero
//! it reduces to plain PPO on the same float path, which the regression
//! suite checks bit-exactly. Minibatch gradients are accumulated over
//! fixed-size shards ([`GRAD_SHARD`]) and reduced in shard order, so
//! results do not depend on the worker pool.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::cert::normal_quantile;
use crate::env::{EnvConfig, Obs, OBS_LEN};
use crate::eval;
use crate::math::{self, NUM_ACTIONS};
use crate::net::{self, HeadGrad, NetGrads, NetParams};
use crate::pool::{self, JobPool};
use crate::ppo::{self, Adam, LossSample, PpoConfig, Record};
use crate::rng;

/// Records per gradient shard; part of the deterministic reduction
/// order, so changing it changes training trajectories.
pub const GRAD_SHARD: usize = 64;

/// PGD step count for training-time attacks (mirrors the evaluation
/// convention).
const TRAIN_PGD_STEPS: u32 = 10;

/// Adversarial training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// Fraction of each minibatch receiving attacked observations.
    pub alpha_adv: f32,
    /// Training-time attack budget.
    pub eps_train: f32,
    /// Weight of the uniform-noise smoothness term.
    pub beta: f32,
    /// Radius of the uniform smoothness noise.
    pub eps_smooth: f32,
    /// Inner sign-PGD steps of the state-adversarial term.
    pub k_inner: usize,
    /// Ceiling of the state-adversarial weight schedule.
    pub kappa_star: f32,
    /// Fraction of training with the state-adversarial weight at zero.
    pub warmup_frac: f32,
    /// Fraction over which the weight ramps linearly to the ceiling.
    pub ramp_frac: f32,
    /// Robust-selector period in outer iterations (0 disables).
    pub eval_period: usize,
    /// Episodes per selector cell.
    pub eval_episodes: usize,
    /// Outer iterations of adversarial training.
    pub total_iters: usize,
    /// Base of the held-out validation seed pool.
    pub val_seed_base: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            alpha_adv: 0.30,
            eps_train: 0.15,
            beta: 0.80,
            eps_smooth: 0.08,
            k_inner: 5,
            kappa_star: 0.80,
            warmup_frac: 0.05,
            ramp_frac: 0.15,
            eval_period: 4,
            eval_episodes: 8,
            total_iters: 600,
            val_seed_base: 60_000,
        }
    }
}

impl AdvConfig {
    /// Every robust term off: the trainer degenerates to plain PPO.
    /// The selector settings stay, reused for clean validation.
    pub fn disabled() -> AdvConfig {
        AdvConfig { alpha_adv: 0.0, beta: 0.0, kappa_star: 0.0, ..AdvConfig::default() }
    }
}

/// Certified-radius hinge fine-tune hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacerConfig {
    /// Hinge weight of the proximal step.
    pub lambda: f32,
    /// Gaussian smoothing width.
    pub sigma: f32,
    /// Target certified margin.
    pub gamma_margin: f32,
    /// Gaussian samples per state.
    pub samples: usize,
    /// Entropy coefficient during fine-tune.
    pub entropy_coef: f32,
    /// Adversarial minibatch fraction during fine-tune.
    pub alpha_adv: f32,
    /// Fine-tune learning rate.
    pub learning_rate: f32,
    /// Fine-tune budget in environment steps.
    pub env_step_budget: usize,
    /// Fraction of the budget with the hinge weight held at zero.
    pub warmup_frac: f32,
}

impl Default for MacerConfig {
    fn default() -> Self {
        MacerConfig {
            lambda: 0.05,
            sigma: 0.10,
            gamma_margin: 0.20,
            samples: 4,
            entropy_coef: 0.05,
            alpha_adv: 0.40,
            learning_rate: 5e-5,
            env_step_budget: 50_000,
            warmup_frac: 0.20,
        }
    }
}

/// Clamp applied to empirical frequencies before the inverse-normal
/// transform (with few samples they hit exactly 0 or 1).
const FREQ_CLAMP: f64 = 1e-4;

/// Warm-up / ramp / plateau schedule for the state-adversarial weight:
/// zero before `warmup_frac`, linear to `kappa_star` over `ramp_frac`,
/// constant after.
pub fn kappa_schedule(
    n: usize,
    total: usize,
    warmup_frac: f32,
    ramp_frac: f32,
    kappa_star: f32,
) -> f32 {
    if total == 0 {
        return kappa_star;
    }
    let x = n as f32 / total as f32;
    if x < warmup_frac {
        return 0.0;
    }
    if ramp_frac <= 0.0 {
        return kappa_star;
    }
    let t = (x - warmup_frac) / ramp_frac;
    if t >= 1.0 {
        kappa_star
    } else {
        kappa_star * t
    }
}

/// Worst-case KL gap inside the training budget ball, approximated by
/// `k_inner` projected sign-PGD steps on the perturbation. The teacher
/// distribution is a stop-gradient copy of the policy at the clean
/// observation; the returned value is the KL at the final perturbation,
/// differentiable through the student side only.
pub fn sa_kl_term(params: &NetParams, obs: &Obs, eps_train: f32, k_inner: usize) -> f32 {
    let prep = net::Prepared::new(params);
    let teacher = net::forward(params, obs).0.probs;
    let adv_obs = sa_inner_max(&prep, params, obs, &teacher, eps_train, k_inner);
    math::kl_div(&teacher, &net::forward(params, &adv_obs).0.probs)
}

/// Inner maximization of the state-adversarial term: projected sign
/// ascent of the KL from a uniform start inside the ball.
///
/// A zero-initialized perturbation sits exactly at the KL minimum,
/// where the gradient vanishes identically and sign steps never move;
/// the start is therefore drawn uniformly from the ball, keyed by the
/// observation bytes so the term stays a pure function of its inputs.
fn sa_inner_max(
    prep: &net::Prepared,
    params: &NetParams,
    obs: &Obs,
    teacher: &[f32; NUM_ACTIONS],
    eps_train: f32,
    k_inner: usize,
) -> Obs {
    let mut x = obs.clone();
    if eps_train <= 0.0 || k_inner == 0 {
        return x;
    }
    let mut init_rng = rng::stream_from_seed(obs_stream_key(obs));
    for i in 0..OBS_LEN {
        let lo = (obs.data[i] - eps_train).max(0.0);
        let hi = (obs.data[i] + eps_train).min(1.0);
        x.data[i] = rng::uniform_f32(&mut init_rng, lo, hi);
    }
    let alpha = 2.0 * eps_train / k_inner as f32;
    for _ in 0..k_inner {
        let (out, trace) = net::forward(params, &x);
        let mut head = HeadGrad::default();
        for a in 0..NUM_ACTIONS {
            head.dlogits[a] = out.probs[a] - teacher[a];
        }
        let grad = net::input_gradient_prepared(prep, params, &trace, &head);
        for i in 0..OBS_LEN {
            x.data[i] += alpha * math::sign(grad[i]);
        }
        x = attacks::clip_to_ball(obs, &x, eps_train);
    }
    x
}

/// Stream key derived from the observation contents.
fn obs_stream_key(obs: &Obs) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in obs.data.iter() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Uniform-noise smoothness term: KL between the policy at the clean
/// observation (stop-gradient) and at one uniformly perturbed copy,
/// clipped to keep the input in [0, 1].
pub fn trades_term<R: Rng>(params: &NetParams, obs: &Obs, eps_smooth: f32, rng: &mut R) -> f32 {
    let teacher = net::forward(params, obs).0.probs;
    let x = trades_sample(obs, eps_smooth, rng);
    math::kl_div(&teacher, &net::forward(params, &x).0.probs)
}

fn trades_sample<R: Rng>(obs: &Obs, eps_smooth: f32, rng: &mut R) -> Obs {
    let mut x = obs.clone();
    for v in x.data.iter_mut() {
        let delta = rng::uniform_f32(rng, -eps_smooth, eps_smooth);
        *v = math::clampf(*v + delta, 0.0, 1.0);
    }
    x
}

/// Hinge on the certified smoothed margin from hard-count frequencies;
/// `mask` is the agreement of the empirical smoothed argmax with the
/// clean argmax. Frequencies are clamped before the inverse-normal
/// transform.
pub fn hinge_from_freqs(pa: f64, pb: f64, mask: bool, sigma: f64, gamma: f64) -> f64 {
    if !mask {
        return 0.0;
    }
    let pa = pa.clamp(FREQ_CLAMP, 1.0 - FREQ_CLAMP);
    let pb = pb.clamp(FREQ_CLAMP, 1.0 - FREQ_CLAMP);
    let margin = 0.5
        * sigma
        * (normal_quantile(pa).expect("clamped inside (0,1)")
            - normal_quantile(pb).expect("clamped inside (0,1)"));
    (gamma - margin).max(0.0)
}

/// Smoothed-sample statistics for one observation.
struct MacerStats {
    clean_argmax: usize,
    runner_up: usize,
    mask: bool,
    hinge: f64,
    pa_soft: f64,
    pb_soft: f64,
}

fn macer_stats(
    params: &NetParams,
    obs: &Obs,
    cfg: &MacerConfig,
    stream: &mut rng::GaussianStream,
    noisy_buf: &mut Vec<Obs>,
) -> MacerStats {
    let clean_argmax = net::forward(params, obs).0.greedy();
    let k = cfg.samples;
    noisy_buf.clear();
    let mut counts = [0usize; NUM_ACTIONS];
    let mut prob_sums = [0.0f64; NUM_ACTIONS];
    for _ in 0..k {
        let mut x = obs.clone();
        for v in x.data.iter_mut() {
            *v += cfg.sigma * stream.next_gaussian_f32();
        }
        let (out, _) = net::forward(params, &x);
        counts[out.greedy()] += 1;
        for a in 0..NUM_ACTIONS {
            prob_sums[a] += out.probs[a] as f64;
        }
        noisy_buf.push(x);
    }
    // Empirical smoothed argmax (ties to the lowest index) and the
    // most-frequent action other than the clean argmax.
    let mut smoothed = 0usize;
    for a in 1..NUM_ACTIONS {
        if counts[a] > counts[smoothed] {
            smoothed = a;
        }
    }
    let mut runner_up = usize::MAX;
    for a in 0..NUM_ACTIONS {
        if a == clean_argmax {
            continue;
        }
        if runner_up == usize::MAX || counts[a] > counts[runner_up] {
            runner_up = a;
        }
    }
    let mask = smoothed == clean_argmax;
    let pa_hard = counts[clean_argmax] as f64 / k as f64;
    let pb_hard = counts[runner_up] as f64 / k as f64;
    let hinge = hinge_from_freqs(pa_hard, pb_hard, mask, cfg.sigma as f64, cfg.gamma_margin as f64);
    MacerStats {
        clean_argmax,
        runner_up,
        mask,
        hinge,
        pa_soft: prob_sums[clean_argmax] / k as f64,
        pb_soft: prob_sums[runner_up] / k as f64,
    }
}

/// Certified-radius hinge at one observation. Hard counts decide the
/// mask and the value; the training gradient flows through soft counts.
pub fn macer_hinge(params: &NetParams, obs: &Obs, cfg: &MacerConfig, stream_key: u64) -> f32 {
    let mut stream = rng::GaussianStream::new(stream_key);
    let mut buf = Vec::new();
    macer_stats(params, obs, cfg, &mut stream, &mut buf).hinge as f32
}

/// d(Phi^-1)/dp = 1 / pdf(Phi^-1(p)), zero outside the frequency clamp.
fn quantile_derivative(p: f64) -> f64 {
    if p <= FREQ_CLAMP || p >= 1.0 - FREQ_CLAMP {
        return 0.0;
    }
    let x = normal_quantile(p).expect("inside (0,1)");
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    1.0 / pdf
}

/// Accumulates the gradient of `scale * hinge(obs)` into `grads` via the
/// soft-count pathway and returns the hard-count hinge value. The hinge
/// must be active (hard value positive, mask on) for any gradient to
/// flow.
fn accumulate_macer_grads(
    prep: &net::Prepared,
    params: &NetParams,
    obs: &Obs,
    cfg: &MacerConfig,
    stream_key: u64,
    scale: f32,
    grads: &mut NetGrads,
) -> f64 {
    let mut stream = rng::GaussianStream::new(stream_key);
    let mut noisy = Vec::new();
    let stats = macer_stats(params, obs, cfg, &mut stream, &mut noisy);
    if !stats.mask || stats.hinge <= 0.0 {
        return stats.hinge;
    }
    // Active hinge: gamma - (sigma/2) (Phi^-1(pa) - Phi^-1(pb)).
    let k = cfg.samples as f64;
    let coef_a = -(0.5 * cfg.sigma as f64) * quantile_derivative(stats.pa_soft) / k;
    let coef_b = (0.5 * cfg.sigma as f64) * quantile_derivative(stats.pb_soft) / k;
    for x in noisy.iter() {
        let (out, trace) = net::forward(params, x);
        let mut dprobs = [0.0f64; NUM_ACTIONS];
        dprobs[stats.clean_argmax] += coef_a;
        dprobs[stats.runner_up] += coef_b;
        // Softmax Jacobian: dlogit_j = p_j (g_j - sum_i p_i g_i).
        let mut dot = 0.0f64;
        for a in 0..NUM_ACTIONS {
            dot += out.probs[a] as f64 * dprobs[a];
        }
        let mut head = HeadGrad::default();
        for a in 0..NUM_ACTIONS {
            head.dlogits[a] = (out.probs[a] as f64 * (dprobs[a] - dot)) as f32 * scale;
        }
        net::backward_into_prepared(prep, params, &trace, &head, grads);
    }
    stats.hinge
}

/// Attacked validation score: mean success over {FGSM, PGD} x
/// {0.10, 0.20} on the held-out pool (episode `k` of cell `c` runs on
/// seed `val_seed_base + 13 k + 7 c`).
pub fn robust_score(
    params: &NetParams,
    env_cfg: &EnvConfig,
    val_seed_base: u64,
    episodes_per_cell: usize,
    pool: &dyn JobPool,
) -> f32 {
    let specs = [
        AttackSpec::fgsm(0.10),
        AttackSpec::fgsm(0.20),
        AttackSpec::pgd(0.10, TRAIN_PGD_STEPS, 1),
        AttackSpec::pgd(0.20, TRAIN_PGD_STEPS, 1),
    ];
    let jobs = specs.len() * episodes_per_cell;
    let successes = pool::run_jobs(pool, jobs, |j| {
        let cell = j / episodes_per_cell;
        let k = j % episodes_per_cell;
        let seed = val_seed_base + 13 * k as u64 + 7 * cell as u64;
        eval::run_attacked_episode(params, &specs[cell], env_cfg, seed, seed)
    });
    let mut acc = 0.0f64;
    for s in successes {
        acc += s as f64;
    }
    (acc / jobs.max(1) as f64) as f32
}

/// Clean argmax success on the held-out validation pool (the
/// deployment protocol: greedy actions, no attack). Uses cell index 4
/// in the seed formula so it never shares seeds with the four attacked
/// score cells.
pub fn clean_validation_success(
    params: &NetParams,
    env_cfg: &EnvConfig,
    val_seed_base: u64,
    episodes: usize,
    pool: &dyn JobPool,
) -> f32 {
    let spec = AttackSpec::none();
    let successes = pool::run_jobs(pool, episodes, |k| {
        let seed = val_seed_base + 13 * k as u64 + 7 * 4;
        eval::run_attacked_episode(params, &spec, env_cfg, seed, seed)
    });
    let mut acc = 0.0f64;
    for s in successes {
        acc += s as f64;
    }
    (acc / episodes.max(1) as f64) as f32
}

/// Checkpoint selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Selector {
    /// Keep the iterate with the best clean argmax validation success.
    CleanSuccess,
    /// Keep the iterate with the best attacked validation score.
    RobustScore,
}

/// Trainer configuration for one stage.
#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub adv: AdvConfig,
    pub macer: Option<MacerConfig>,
    pub selector: Selector,
    pub total_iters: usize,
    /// Stop once this many environment steps were collected.
    pub env_step_budget: Option<usize>,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub clean_success: f32,
    pub rollout_entropy: f32,
    pub entropy: f32,
    pub surrogate: f32,
    pub value_loss: f32,
    pub trades: f32,
    pub sa_kl: f32,
    pub macer_hinge: f32,
    pub kappa: f32,
    pub score: Option<f32>,
    pub env_steps: usize,
    pub records: usize,
}

/// Trainer output: the selected checkpoint, the final iterate, and the
/// per-iteration log.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub best: NetParams,
    pub last: NetParams,
    pub best_iter: usize,
    pub best_metric: f32,
    pub logs: Vec<IterLog>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("adversarial minibatch fraction is set but no attack source network was given")]
    MissingAttackSource,
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}

struct ShardOut {
    grads: NetGrads,
    surrogate: f64,
    value_loss: f64,
    entropy: f64,
    trades: f64,
    sa_kl: f64,
    clipped: usize,
}

impl ShardOut {
    fn new() -> ShardOut {
        ShardOut {
            grads: NetGrads::zeros(),
            surrogate: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            trades: 0.0,
            sa_kl: 0.0,
            clipped: 0,
        }
    }

    fn merge(&mut self, other: &ShardOut) {
        self.grads.add(&other.grads);
        self.surrogate += other.surrogate;
        self.value_loss += other.value_loss;
        self.entropy += other.entropy;
        self.trades += other.trades;
        self.sa_kl += other.sa_kl;
        self.clipped += other.clipped;
    }
}

/// The shared training loop (adversarial PPO when robust terms are on,
/// plain PPO when they are off, hinge fine-tune when `macer` is set).
pub fn train(
    cfg: &TrainerConfig,
    init: NetParams,
    attack_source: Option<&NetParams>,
    pool: &dyn JobPool,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<TrainResult, TrainError> {
    validate(cfg, attack_source)?;
    let mut params = init;
    let mut adam = Adam::new();
    let mut logs: Vec<IterLog> = Vec::new();
    let mut best: Option<(f32, usize, NetParams)> = None;
    let mut env_steps_total = 0usize;
    let macer_warmup_steps = cfg
        .macer
        .map(|m| (m.warmup_frac as f64 * m.env_step_budget as f64) as usize)
        .unwrap_or(0);

    let mut iter = 0usize;
    loop {
        if iter >= cfg.total_iters {
            break;
        }
        if let Some(budget) = cfg.env_step_budget {
            if env_steps_total >= budget {
                break;
            }
        }

        // 1. Clean rollout under the current policy.
        let rollout_seed = rng::mix(&[cfg.seed, iter as u64]);
        let batch = ppo::rollout(
            &params,
            &cfg.env,
            &cfg.ppo,
            rollout_seed,
            cfg.ppo.episodes_per_batch,
            pool,
        );
        let macer_active = cfg
            .macer
            .map(|m| m.lambda > 0.0 && env_steps_total >= macer_warmup_steps)
            .unwrap_or(false);
        env_steps_total += batch.env_steps;
        if batch.records.is_empty() {
            iter += 1;
            continue;
        }

        let theta_old = params.clone();
        let kappa = kappa_schedule(
            iter,
            cfg.total_iters,
            cfg.adv.warmup_frac,
            cfg.adv.ramp_frac,
            cfg.adv.kappa_star,
        );
        let attack_kind_fgsm = iter % 2 == 0;

        let mut sums = ShardOut::new();
        let mut macer_sum = 0.0f64;
        let mut macer_updates = 0usize;
        let mut update_count = 0usize;

        // 2. PPO epochs over shuffled minibatches.
        let n_records = batch.records.len();
        let mut order: Vec<usize> = (0..n_records).collect();
        for epoch in 0..cfg.ppo.epochs {
            let mut shuffle_rng =
                rng::stream(&[rng::tag::SHUFFLE, cfg.seed, iter as u64, epoch as u64]);
            order.shuffle(&mut shuffle_rng);
            for mb in 0..cfg.ppo.minibatches {
                let lo = mb * n_records / cfg.ppo.minibatches;
                let hi = (mb + 1) * n_records / cfg.ppo.minibatches;
                if lo == hi {
                    continue;
                }
                let mb_indices = &order[lo..hi];
                let out = minibatch_update(
                    &mut params,
                    &mut adam,
                    &theta_old,
                    attack_source,
                    &batch.records,
                    mb_indices,
                    cfg,
                    kappa,
                    attack_kind_fgsm,
                    iter,
                    epoch,
                    pool,
                );
                sums.merge(&out);
                update_count += mb_indices.len();

                // 3. Proximal hinge step on the same minibatch.
                if macer_active {
                    let macer = cfg.macer.expect("macer_active implies config");
                    macer_sum += macer_proximal_step(
                        &mut params,
                        &batch.records,
                        mb_indices,
                        &macer,
                        cfg.seed,
                        iter,
                        epoch,
                        pool,
                    );
                    macer_updates += 1;
                }
            }
        }

        // 4. Selector.
        let mut log = IterLog {
            iter,
            clean_success: batch.mean_success,
            rollout_entropy: batch.mean_entropy,
            entropy: (sums.entropy / update_count.max(1) as f64) as f32,
            surrogate: (sums.surrogate / update_count.max(1) as f64) as f32,
            value_loss: (sums.value_loss / update_count.max(1) as f64) as f32,
            trades: (sums.trades / update_count.max(1) as f64) as f32,
            sa_kl: (sums.sa_kl / update_count.max(1) as f64) as f32,
            macer_hinge: (macer_sum / macer_updates.max(1) as f64) as f32,
            kappa,
            score: None,
            env_steps: env_steps_total,
            records: n_records,
        };
        let budget_exhausted = cfg.env_step_budget.map(|b| env_steps_total >= b).unwrap_or(false);
        let last_iter = iter + 1 == cfg.total_iters || budget_exhausted;
        let due = cfg.adv.eval_period > 0 && (iter + 1) % cfg.adv.eval_period == 0;
        if due || last_iter {
            let s = match cfg.selector {
                Selector::CleanSuccess => clean_validation_success(
                    &params,
                    &cfg.env,
                    cfg.adv.val_seed_base,
                    cfg.adv.eval_episodes,
                    pool,
                ),
                Selector::RobustScore => robust_score(
                    &params,
                    &cfg.env,
                    cfg.adv.val_seed_base,
                    cfg.adv.eval_episodes,
                    pool,
                ),
            };
            log.score = Some(s);
            if best.as_ref().map_or(true, |(m, _, _)| s > *m) {
                best = Some((s, iter, params.clone()));
            }
        }
        on_iter(&log);
        logs.push(log);
        iter += 1;
    }

    let (best_metric, best_iter, best) = match best {
        Some((m, i, p)) => (m, i, p),
        None => (f32::NEG_INFINITY, 0, params.clone()),
    };
    Ok(TrainResult { best, last: params, best_iter, best_metric, logs })
}

fn validate(cfg: &TrainerConfig, attack_source: Option<&NetParams>) -> Result<(), TrainError> {
    if cfg.adv.alpha_adv > 0.0 && attack_source.is_none() {
        return Err(TrainError::MissingAttackSource);
    }
    if !(0.0..=1.0).contains(&cfg.adv.alpha_adv) {
        return Err(TrainError::InvalidConfig("alpha_adv must lie in [0, 1]"));
    }
    if cfg.adv.warmup_frac + cfg.adv.ramp_frac > 1.0 + 1e-6 {
        return Err(TrainError::InvalidConfig("warmup_frac + ramp_frac must not exceed 1"));
    }
    if cfg.adv.eps_train > 1.0 || cfg.adv.eps_smooth > 1.0 {
        return Err(TrainError::InvalidConfig("training radii must not exceed 1"));
    }
    if let Some(m) = cfg.macer {
        if m.samples < 2 {
            return Err(TrainError::InvalidConfig("the hinge needs at least 2 samples"));
        }
        if m.sigma <= 0.0 || m.gamma_margin <= 0.0 || m.lambda < 0.0 {
            return Err(TrainError::InvalidConfig("sigma and gamma must be positive"));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn minibatch_update(
    params: &mut NetParams,
    adam: &mut Adam,
    theta_old: &NetParams,
    attack_source: Option<&NetParams>,
    records: &[Record],
    mb_indices: &[usize],
    cfg: &TrainerConfig,
    kappa: f32,
    attack_kind_fgsm: bool,
    iter: usize,
    epoch: usize,
    pool: &dyn JobPool,
) -> ShardOut {
    let mb_len = mb_indices.len();
    let scale = 1.0 / mb_len as f32;

    let advs: Vec<f32> = mb_indices.iter().map(|&i| records[i].adv).collect();
    let norm_advs = ppo::normalize_advantages(&advs);

    let shards = mb_len.div_ceil(GRAD_SHARD);
    let current = &*params;
    let outs = pool::run_jobs(pool, shards, |s| {
        let lo = s * GRAD_SHARD;
        let hi = ((s + 1) * GRAD_SHARD).min(mb_len);
        let mut out = ShardOut::new();
        let prep = net::Prepared::new(current);

        // Possibly attacked observations for this shard. Attacked
        // records get their old log-probability recomputed at the
        // perturbed observation (numerator and denominator of the
        // importance ratio see the same input).
        let mut eff_obs: Vec<Obs> = Vec::with_capacity(hi - lo);
        let mut eff_logp: Vec<f32> = Vec::with_capacity(hi - lo);
        for pos in lo..hi {
            let ridx = mb_indices[pos];
            let rec = &records[ridx];
            let mut obs = rec.obs.clone();
            let mut logp = rec.logp_old;
            if cfg.adv.alpha_adv > 0.0 {
                let mut sel = rng::stream(&[
                    rng::tag::ADV_SELECT,
                    cfg.seed,
                    iter as u64,
                    epoch as u64,
                    ridx as u64,
                ]);
                if rng::unit_f32(&mut sel) < cfg.adv.alpha_adv {
                    let source = attack_source.expect("validated");
                    obs = if attack_kind_fgsm {
                        attacks::fgsm(source, &rec.obs, cfg.adv.eps_train)
                    } else {
                        let mut atk = rng::stream(&[
                            rng::tag::ATTACK,
                            cfg.seed,
                            iter as u64,
                            epoch as u64,
                            ridx as u64,
                        ]);
                        attacks::pgd(
                            source,
                            &rec.obs,
                            cfg.adv.eps_train,
                            TRAIN_PGD_STEPS,
                            1,
                            &mut atk,
                        )
                    };
                    let (old_out, _) = net::forward(theta_old, &obs);
                    logp = old_out.log_probs()[rec.action];
                }
            }
            eff_obs.push(obs);
            eff_logp.push(logp);
        }

        // PPO terms at the effective observations.
        {
            let samples: Vec<LossSample<'_>> = (lo..hi)
                .map(|pos| {
                    let rec = &records[mb_indices[pos]];
                    LossSample {
                        obs: &eff_obs[pos - lo],
                        action: rec.action,
                        logp_old: eff_logp[pos - lo],
                        ret: rec.ret,
                        adv_norm: norm_advs[pos],
                    }
                })
                .collect();
            let (surr, vloss, ent, clipped) = ppo::accumulate_ppo_grads_with(
                &prep,
                current,
                &samples,
                &cfg.ppo,
                scale,
                &mut out.grads,
            );
            out.surrogate += surr;
            out.value_loss += vloss;
            out.entropy += ent;
            out.clipped += clipped;
        }

        // Smoothness and state-adversarial terms on the clean
        // observations of the whole minibatch.
        if cfg.adv.beta > 0.0 || kappa > 0.0 {
            for pos in lo..hi {
                let ridx = mb_indices[pos];
                let rec = &records[ridx];
                let teacher = net::forward(current, &rec.obs).0.probs;

                if cfg.adv.beta > 0.0 {
                    let mut tr = rng::stream(&[
                        rng::tag::TRADES,
                        cfg.seed,
                        iter as u64,
                        epoch as u64,
                        ridx as u64,
                    ]);
                    let x = trades_sample(&rec.obs, cfg.adv.eps_smooth, &mut tr);
                    let (xo, xtrace) = net::forward(current, &x);
                    out.trades += math::kl_div(&teacher, &xo.probs) as f64;
                    let mut head = HeadGrad::default();
                    for a in 0..NUM_ACTIONS {
                        head.dlogits[a] = cfg.adv.beta * scale * (xo.probs[a] - teacher[a]);
                    }
                    net::backward_into_prepared(&prep, current, &xtrace, &head, &mut out.grads);
                }

                if kappa > 0.0 {
                    let adv_obs = sa_inner_max(
                        &prep,
                        current,
                        &rec.obs,
                        &teacher,
                        cfg.adv.eps_train,
                        cfg.adv.k_inner,
                    );
                    let (ao, atrace) = net::forward(current, &adv_obs);
                    out.sa_kl += math::kl_div(&teacher, &ao.probs) as f64;
                    let mut head = HeadGrad::default();
                    for a in 0..NUM_ACTIONS {
                        head.dlogits[a] = kappa * scale * (ao.probs[a] - teacher[a]);
                    }
                    net::backward_into_prepared(&prep, current, &atrace, &head, &mut out.grads);
                }
            }
        }
        out
    });

    // Deterministic reduction in shard order, then clip and step.
    let mut total = ShardOut::new();
    for out in outs {
        total.merge(&out);
    }
    total.grads.clip_global_norm(0.5);
    adam.step(params, &total.grads, cfg.ppo.learning_rate);
    total
}

/// The separate hinge step of the fine-tune: plain SGD on
/// `lambda * mean hinge` over the minibatch's clean observations,
/// applied right after the PPO step on the same minibatch. Returns the
/// mean hinge value.
#[allow(clippy::too_many_arguments)]
fn macer_proximal_step(
    params: &mut NetParams,
    records: &[Record],
    mb_indices: &[usize],
    macer: &MacerConfig,
    seed: u64,
    iter: usize,
    epoch: usize,
    pool: &dyn JobPool,
) -> f64 {
    let mb_len = mb_indices.len();
    let scale = 1.0 / mb_len as f32;
    let shards = mb_len.div_ceil(GRAD_SHARD);
    let current = &*params;
    let outs = pool::run_jobs(pool, shards, |s| {
        let lo = s * GRAD_SHARD;
        let hi = ((s + 1) * GRAD_SHARD).min(mb_len);
        let mut grads = NetGrads::zeros();
        let mut hinge_sum = 0.0f64;
        let prep = net::Prepared::new(current);
        for pos in lo..hi {
            let ridx = mb_indices[pos];
            let key = rng::mix(&[rng::tag::MACER, seed, iter as u64, epoch as u64, ridx as u64]);
            hinge_sum += accumulate_macer_grads(
                &prep,
                current,
                &records[ridx].obs,
                macer,
                key,
                scale,
                &mut grads,
            );
        }
        (grads, hinge_sum)
    });
    let mut grads = NetGrads::zeros();
    let mut hinge_sum = 0.0f64;
    for (g, h) in outs {
        grads.add(&g);
        hinge_sum += h;
    }
    ppo::sgd_step(params, &grads, macer.learning_rate * macer.lambda);
    hinge_sum / mb_len as f64
}

/// Plain PPO from scratch, selecting the iterate with the best clean
/// rollout success.
pub fn train_baseline(
    env: &EnvConfig,
    ppo_cfg: &PpoConfig,
    total_iters: usize,
    seed: u64,
    pool: &dyn JobPool,
    on_iter: impl FnMut(&IterLog),
) -> Result<TrainResult, TrainError> {
    let cfg = TrainerConfig {
        env: *env,
        ppo: *ppo_cfg,
        adv: AdvConfig::disabled(),
        macer: None,
        selector: Selector::CleanSuccess,
        total_iters,
        env_step_budget: None,
        seed,
    };
    train(&cfg, net::init_params(seed), None, pool, on_iter)
}

/// Adversarial PPO: the defender starts from the frozen baseline,
/// training-time attacks come from that baseline (alternating FGSM and
/// PGD by iteration parity), and the released checkpoint is the
/// robust-score argmax.
pub fn train_advppo(
    baseline: &NetParams,
    env: &EnvConfig,
    ppo_cfg: &PpoConfig,
    adv: &AdvConfig,
    seed: u64,
    pool: &dyn JobPool,
    on_iter: impl FnMut(&IterLog),
) -> Result<TrainResult, TrainError> {
    let cfg = TrainerConfig {
        env: *env,
        ppo: *ppo_cfg,
        adv: *adv,
        macer: None,
        selector: Selector::RobustScore,
        total_iters: adv.total_iters,
        env_step_budget: None,
        seed,
    };
    train(&cfg, baseline.clone(), Some(baseline), pool, on_iter)
}

/// Hinge fine-tune: continues adversarial PPO from `start` with the
/// fine-tune overrides (entropy coefficient, adversarial fraction,
/// learning rate) plus the proximal hinge step, for a fixed budget of
/// environment steps. The state-adversarial weight stays at its
/// ceiling; the schedule's warm-up belongs to the upstream run.
pub fn finetune_macer(
    start: &NetParams,
    baseline: &NetParams,
    env: &EnvConfig,
    ppo_cfg: &PpoConfig,
    adv: &AdvConfig,
    macer: &MacerConfig,
    seed: u64,
    pool: &dyn JobPool,
    on_iter: impl FnMut(&IterLog),
) -> Result<TrainResult, TrainError> {
    let ppo_cfg = PpoConfig {
        learning_rate: macer.learning_rate,
        entropy_coef: macer.entropy_coef,
        ..*ppo_cfg
    };
    let adv = AdvConfig { alpha_adv: macer.alpha_adv, warmup_frac: 0.0, ramp_frac: 0.0, ..*adv };
    let cfg = TrainerConfig {
        env: *env,
        ppo: ppo_cfg,
        adv,
        macer: Some(*macer),
        selector: Selector::RobustScore,
        total_iters: usize::MAX,
        env_step_budget: Some(macer.env_step_budget),
        seed,
    };
    train(&cfg, start.clone(), Some(baseline), pool, on_iter)
}
