//! Acceptance suite: ten gate criteria, each printing one PASS/FAIL
//! line. Property criteria run standalone; the end-to-end criteria
//! share one desk-scale training pipeline (baseline -> adversarial PPO
//! -> hinge fine-tune) built once behind a lock.
//!
//! The end-to-end stages here are scaled to finish on a small machine;
//! the outcome thresholds they must meet are fixed, not the budgets.

use std::sync::OnceLock;
use std::time::Instant;

use rmapf_core::attacks::{self, AttackSpec};
use rmapf_core::env::{EnvConfig, Obs, OBS_LEN};
use rmapf_core::eval::{self, EvalConfig, EvalReport};
use rmapf_core::net::{self, NetParams};
use rmapf_core::pool::{run_jobs, SerialPool};
use rmapf_core::ppo::{self, Adam, LossSample, PpoConfig};
use rmapf_core::rng;
use rmapf_core::robust::{self, AdvConfig, IterLog, MacerConfig, Selector, TrainerConfig};

use rmapf::pool::RayonPool;

// Desk-scale budgets for the end-to-end stages.
const BASELINE_ITERS: usize = 600;
const ADVPPO_ITERS: usize = 100;
const MACER_BUDGET: usize = 6_000;
const PIPELINE_SEED: u64 = 1;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!("ACCEPTANCE {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn pool() -> RayonPool {
    RayonPool::new(2)
}

// ----------------------------------------------------------------------
// Criterion 1: gradient correctness against finite differences.
// ----------------------------------------------------------------------

mod fd_oracle {
    use super::*;

    const S: usize = 5;

    /// Naive f64 forward (independent loop structure), returning logits,
    /// value, and the minimum |pre-activation| across all ReLUs.
    pub fn forward(theta: &[f64], obs: &[f64; OBS_LEN]) -> ([f64; 5], f64, f64) {
        let c1w = &theta[0..864];
        let c1b = &theta[864..896];
        let c2w = &theta[896..19328];
        let c2b = &theta[19328..19392];
        let tw = &theta[19392..224192];
        let tb = &theta[224192..224320];
        let aw = &theta[224320..224960];
        let ab = &theta[224960..224965];
        let cw = &theta[224965..225093];
        let cb = theta[225093];

        let input = |c: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= S as isize || x >= S as isize {
                0.0
            } else {
                obs[c * 25 + y as usize * 5 + x as usize]
            }
        };
        let mut min_pre = f64::INFINITY;

        let mut h1 = [[0.0f64; 32]; 25];
        for y in 0..S {
            for x in 0..S {
                for oc in 0..32 {
                    let mut acc = c1b[oc];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            for ic in 0..3 {
                                let v = input(
                                    ic,
                                    y as isize + ky as isize - 1,
                                    x as isize + kx as isize - 1,
                                );
                                acc += v * c1w[((ky * 3 + kx) * 3 + ic) * 32 + oc];
                            }
                        }
                    }
                    min_pre = min_pre.min(acc.abs());
                    h1[y * S + x][oc] = acc.max(0.0);
                }
            }
        }
        let mut h2 = [0.0f64; 1600];
        for y in 0..S {
            for x in 0..S {
                for oc in 0..64 {
                    let mut acc = c2b[oc];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            let ix = x as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= S as isize || ix >= S as isize {
                                continue;
                            }
                            for ic in 0..32 {
                                acc += h1[iy as usize * S + ix as usize][ic]
                                    * c2w[((ky * 3 + kx) * 32 + ic) * 64 + oc];
                            }
                        }
                    }
                    min_pre = min_pre.min(acc.abs());
                    h2[(y * S + x) * 64 + oc] = acc.max(0.0);
                }
            }
        }
        let mut h3 = [0.0f64; 128];
        for j in 0..128 {
            let mut acc = tb[j];
            for i in 0..1600 {
                acc += h2[i] * tw[i * 128 + j];
            }
            min_pre = min_pre.min(acc.abs());
            h3[j] = acc.max(0.0);
        }
        let mut logits = [0.0f64; 5];
        for a in 0..5 {
            let mut acc = ab[a];
            for i in 0..128 {
                acc += h3[i] * aw[i * 5 + a];
            }
            logits[a] = acc;
        }
        let mut value = cb;
        for i in 0..128 {
            value += h3[i] * cw[i];
        }
        (logits, value, min_pre)
    }

    pub fn loss(theta: &[f64], obs: &[f64; OBS_LEN], target: usize, value_weight: f64) -> f64 {
        let (logits, value, _) = forward(theta, obs);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        -(logits[target] - log_z) + value_weight * value
    }

    /// Central difference cross-validated at h/2; `None` flags a ReLU
    /// kink inside the stencil.
    pub fn central(h: f64, mut eval: impl FnMut(f64) -> f64) -> Option<f64> {
        let fd_h = (eval(h) - eval(-h)) / (2.0 * h);
        let fd_half = (eval(h / 2.0) - eval(-h / 2.0)) / h;
        let tol = 5e-7f64.max(2.5e-4 * fd_h.abs().max(fd_half.abs()));
        if (fd_h - fd_half).abs() > tol {
            None
        } else {
            Some(fd_h)
        }
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let h = 1e-3f64;
    let mut pairs = 0usize;
    let mut checked = 0usize;
    let mut seed = 0u64;
    let tensors: [(usize, usize); 10] = [
        (0, 864),
        (864, 32),
        (896, 18432),
        (19328, 64),
        (19392, 204800),
        (224192, 128),
        (224320, 640),
        (224960, 5),
        (224965, 128),
        (225093, 1),
    ];

    while pairs < 100 && seed < 500 {
        seed += 1;
        let params = net::init_params(seed);
        let mut r = rng::stream(&[4100, seed]);
        let mut obs = Obs::zeros();
        for v in obs.data.iter_mut() {
            *v = rng::unit_f32(&mut r);
        }
        let target = (rng::unit_f32(&mut r) * 5.0) as usize % 5;
        let theta: Vec<f64> = params.flat().iter().map(|&v| v as f64).collect();
        let obs64: [f64; OBS_LEN] = core::array::from_fn(|i| obs.data[i] as f64);
        // Skip states where an f32 forward could gate a ReLU differently
        // than the f64 oracle.
        let (_, _, min_pre) = fd_oracle::forward(&theta, &obs64);
        if min_pre < 1e-5 {
            continue;
        }

        let (out, trace) = net::forward(&params, &obs);
        let mut head = net::head_grad_for(&out, &net::ScalarLoss::CrossEntropy { target });
        head.dvalue = 0.7;
        let grads = net::backward_params(&params, trace, &head);
        let input_grad =
            net::input_gradient(&params, &obs, &net::ScalarLoss::CrossEntropy { target });

        let mut scratch = theta.clone();
        let mut coord_rng = rng::stream(&[4200, seed]);
        // One random coordinate per tensor plus four input pixels.
        for (off, len) in tensors {
            let idx = off + (rng::unit_f32(&mut coord_rng) as f64 * len as f64) as usize % len;
            let fd = fd_oracle::central(h, |t| {
                scratch[idx] = theta[idx] + t;
                let l = fd_oracle::loss(&scratch, &obs64, target, 0.7);
                scratch[idx] = theta[idx];
                l
            });
            if let Some(fd) = fd {
                let an = grads.flat()[idx] as f64;
                let err = (fd - an).abs();
                let rel = err / fd.abs().max(an.abs()).max(1e-12);
                assert!(
                    err < 1e-6 || rel < 1e-3,
                    "param {idx} seed {seed}: fd {fd:.5e} vs {an:.5e}"
                );
                checked += 1;
            }
        }
        let mut obs_scratch = obs64;
        for _ in 0..4 {
            let idx = (rng::unit_f32(&mut coord_rng) as f64 * OBS_LEN as f64) as usize % OBS_LEN;
            let fd = fd_oracle::central(h, |t| {
                obs_scratch[idx] = obs64[idx] + t;
                let l = fd_oracle::loss(&theta, &obs_scratch, target, 0.0);
                obs_scratch[idx] = obs64[idx];
                l
            });
            if let Some(fd) = fd {
                let an = input_grad[idx] as f64;
                let err = (fd - an).abs();
                let rel = err / fd.abs().max(an.abs()).max(1e-12);
                assert!(
                    err < 1e-6 || rel < 1e-3,
                    "input {idx} seed {seed}: fd {fd:.5e} vs {an:.5e}"
                );
                checked += 1;
            }
        }
        pairs += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "1 (gradient correctness)",
        pairs >= 100 && secs < 60.0,
        &format!("{pairs} pairs, {checked} coordinates, rel err < 1e-3, {secs:.1}s"),
    );
}

// ----------------------------------------------------------------------
// Criterion 2: attack-ball invariants on 1e5 randomized calls.
// ----------------------------------------------------------------------

#[test]
fn criterion_2_attack_ball_invariants() {
    let started = Instant::now();
    let nets: Vec<NetParams> = (0..4).map(net::init_params).collect();
    let total_calls = 100_000usize;
    let fgsm_calls = 70_000usize;
    let pool = pool();

    let violations: usize = run_jobs(&pool, 100, |job| {
        let mut bad = 0usize;
        let mut r = rng::stream(&[4300, job as u64]);
        let calls = total_calls / 100;
        for c in 0..calls {
            let global = job * calls + c;
            let params = &nets[global % nets.len()];
            let mut obs = Obs::zeros();
            for v in obs.data.iter_mut() {
                // Mix of binary and real-valued pixels so both clamp
                // sides of the asymmetric ball are exercised.
                *v = if rng::unit_f32(&mut r) < 0.7 {
                    if rng::unit_f32(&mut r) < 0.3 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    rng::unit_f32(&mut r)
                };
            }
            let eps = rng::unit_f32(&mut r);
            let adv = if global < fgsm_calls {
                attacks::fgsm(params, &obs, eps)
            } else {
                let steps = 1 + (global % 3) as u32;
                attacks::pgd(params, &obs, eps, steps, 1, &mut r)
            };
            for i in 0..OBS_LEN {
                let lo = (obs.data[i] - eps).max(0.0);
                let hi = (obs.data[i] + eps).min(1.0);
                if !(adv.data[i] >= lo && adv.data[i] <= hi) {
                    bad += 1;
                }
                if obs.data[i] == 1.0 && (adv.data[i] > 1.0 || adv.data[i] < 1.0 - eps) {
                    bad += 1;
                }
                if obs.data[i] == 0.0 && adv.data[i] > eps {
                    bad += 1;
                }
            }
        }
        bad
    })
    .into_iter()
    .sum();

    let secs = started.elapsed().as_secs_f64();
    verdict(
        "2 (attack-ball invariants)",
        violations == 0 && secs < 60.0,
        &format!("{total_calls} FGSM/PGD calls, {violations} violations, {secs:.1}s"),
    );
}

// ----------------------------------------------------------------------
// Criterion 3: GAE oracle equivalence on all lengths <= 10.
// ----------------------------------------------------------------------

#[test]
fn criterion_3_gae_oracle() {
    let mut r = rng::stream(&[4400]);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for n in 1..=10usize {
        for _ in 0..200 {
            let rewards: Vec<f32> = (0..n).map(|_| rng::uniform_f32(&mut r, -2.0, 2.0)).collect();
            let values: Vec<f32> = (0..n).map(|_| rng::uniform_f32(&mut r, -2.0, 2.0)).collect();
            let mut dones: Vec<bool> = (0..n).map(|_| rng::unit_f32(&mut r) < 0.3).collect();
            dones[n - 1] = true;
            let gamma = rng::uniform_f32(&mut r, 0.5, 1.0);
            let lam = rng::uniform_f32(&mut r, 0.0, 1.0);
            let (adv, ret) = ppo::compute_gae(&rewards, &values, &dones, gamma, lam).unwrap();
            for t in 0..n {
                // Double-loop oracle over discounted TD residuals.
                let mut expect = 0.0f64;
                let mut weight = 1.0f64;
                for k in t..n {
                    let next_v =
                        if dones[k] || k + 1 == n { 0.0 } else { values[k + 1] as f64 };
                    let delta =
                        rewards[k] as f64 + gamma as f64 * next_v - values[k] as f64;
                    expect += weight * delta;
                    if dones[k] {
                        break;
                    }
                    weight *= (gamma * lam) as f64;
                }
                worst = worst.max((adv[t] as f64 - expect).abs());
                worst = worst.max((ret[t] - (adv[t] + values[t])).abs() as f64);
            }
            cases += 1;
        }
    }
    verdict(
        "3 (GAE oracle equivalence)",
        worst < 1e-6,
        &format!("{cases} sequences, lengths 1..=10, worst abs err {worst:.2e}"),
    );
}

// ----------------------------------------------------------------------
// Criterion 4: certification oracles.
// ----------------------------------------------------------------------

fn binom_tail_geq(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (ln_p, ln_q) = (p.ln(), (1.0 - p).ln());
    let mut ln_choose = 0.0f64;
    let mut tail = 0.0f64;
    for j in 0..=n {
        if j > 0 {
            ln_choose += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            tail += (ln_choose + j as f64 * ln_p + (n - j) as f64 * ln_q).exp();
        }
    }
    tail.min(1.0)
}

fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
        if term.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn criterion_4_certification_oracles() {
    // Clopper-Pearson vs direct binomial-tail bisection.
    let mut r = rng::stream(&[4500]);
    let mut worst_cp = 0.0f64;
    for case in 0..1000 {
        let n = 1 + (rng::unit_f32(&mut r) as f64 * 600.0) as usize;
        let k = (rng::unit_f32(&mut r) as f64 * (n + 1) as f64) as usize % (n + 1);
        let alpha = [1e-3, 0.01, 0.05][case % 3];
        let got = rmapf_core::cert::clopper_pearson_lower(k, n, alpha);
        let want = if k == 0 {
            0.0
        } else {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if binom_tail_geq(k, n, mid) < alpha {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        worst_cp = worst_cp.max((got - want).abs());
    }

    // k = n boundary, exact closed form.
    let boundary = (rmapf_core::cert::clopper_pearson_lower(500, 500, 1e-3)
        - 1e-3f64.powf(1.0 / 500.0))
    .abs();

    // Quantile vs erf-series bisection.
    let mut worst_q = 0.0f64;
    for _ in 0..400 {
        let p = 1e-5 + (1.0 - 2e-5) * rng::unit_f32(&mut r) as f64;
        let got = rmapf_core::cert::normal_quantile(p).unwrap();
        let (mut lo, mut hi) = (-9.0f64, 9.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let cdf = 0.5 * (1.0 + erf_series(mid / std::f64::consts::SQRT_2));
            if cdf < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        worst_q = worst_q.max((got - 0.5 * (lo + hi)).abs());
    }

    // Constant-logit network certifies the closed-form radius.
    let mut params = net::init_params(4600);
    params.flat_mut()[..864].iter_mut().for_each(|w| *w = 0.0);
    let ab_off = net::PARAM_COUNT - 1 - 128 - 5;
    params.flat_mut()[ab_off + 1] = 4.0;
    let cert = rmapf_core::cert::certify(
        &params,
        &Obs::zeros(),
        &rmapf_core::cert::CertConfig::default(),
        0,
        77,
    );
    let radius_err = (cert.radius - 0.2205).abs();

    let pass = worst_cp < 1e-6 && boundary < 1e-9 && worst_q < 1e-8 && radius_err < 1e-3;
    verdict(
        "4 (certification oracles)",
        pass,
        &format!(
            "CP err {worst_cp:.2e}, k=n err {boundary:.2e}, quantile err {worst_q:.2e}, \
             constant-net radius {:.4} (expect 0.2205)",
            cert.radius
        ),
    );
}

// ----------------------------------------------------------------------
// Criterion 5: degenerate-config bit-exact regressions.
// ----------------------------------------------------------------------

/// Plain PPO reference loop built from the public primitives, mirroring
/// the trainer's deterministic structure (keyed streams, fixed shards).
fn plain_ppo_reference(
    env: &EnvConfig,
    cfg: &PpoConfig,
    iters: usize,
    seed: u64,
) -> NetParams {
    use rand::seq::SliceRandom;
    let mut params = net::init_params(seed);
    let mut adam = Adam::new();
    for iter in 0..iters {
        let rollout_seed = rng::mix(&[seed, iter as u64]);
        let batch =
            ppo::rollout(&params, env, cfg, rollout_seed, cfg.episodes_per_batch, &SerialPool);
        if batch.records.is_empty() {
            continue;
        }
        let n = batch.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            let mut shuffle_rng =
                rng::stream(&[rng::tag::SHUFFLE, seed, iter as u64, epoch as u64]);
            order.shuffle(&mut shuffle_rng);
            for mb in 0..cfg.minibatches {
                let lo = mb * n / cfg.minibatches;
                let hi = (mb + 1) * n / cfg.minibatches;
                if lo == hi {
                    continue;
                }
                let idx = &order[lo..hi];
                let advs: Vec<f32> = idx.iter().map(|&i| batch.records[i].adv).collect();
                let norm = ppo::normalize_advantages(&advs);
                let scale = 1.0 / idx.len() as f32;
                let mut grads = net::NetGrads::zeros();
                for (s, chunk) in idx.chunks(robust::GRAD_SHARD).enumerate() {
                    let base = s * robust::GRAD_SHARD;
                    let samples: Vec<LossSample<'_>> = chunk
                        .iter()
                        .enumerate()
                        .map(|(j, &ri)| {
                            let rec = &batch.records[ri];
                            LossSample {
                                obs: &rec.obs,
                                action: rec.action,
                                logp_old: rec.logp_old,
                                ret: rec.ret,
                                adv_norm: norm[base + j],
                            }
                        })
                        .collect();
                    let mut sg = net::NetGrads::zeros();
                    ppo::accumulate_ppo_grads(&params, &samples, cfg, scale, &mut sg);
                    grads.add(&sg);
                }
                grads.clip_global_norm(0.5);
                adam.step(&mut params, &grads, cfg.learning_rate);
            }
        }
    }
    params
}

#[test]
fn criterion_5_degenerate_regressions() {
    let env = EnvConfig::default();
    let ppo_cfg = PpoConfig { episodes_per_batch: 4, ..PpoConfig::default() };
    let seed = 11u64;
    let iters = 3usize;

    // (a) Adversarial trainer with every robust knob at zero vs the
    // plain PPO reference, bit for bit.
    let zeroed = TrainerConfig {
        env,
        ppo: ppo_cfg,
        adv: AdvConfig { eval_period: 0, ..AdvConfig::disabled() },
        macer: None,
        selector: Selector::RobustScore,
        total_iters: iters,
        env_step_budget: None,
        seed,
    };
    let engine = robust::train(&zeroed, net::init_params(seed), None, &SerialPool, |_| {})
        .unwrap();
    let reference = plain_ppo_reference(&env, &ppo_cfg, iters, seed);
    let ppo_identical = engine
        .last
        .flat()
        .iter()
        .zip(reference.flat().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // (b) Hinge fine-tune with lambda = 0 vs continued adversarial PPO
    // under the same overrides and seed.
    let base = net::init_params(77);
    let start = net::init_params(78);
    let macer0 = MacerConfig { lambda: 0.0, env_step_budget: 600, ..MacerConfig::default() };
    let adv = AdvConfig { eval_period: 0, ..AdvConfig::default() };
    let ft = robust::finetune_macer(
        &start,
        &base,
        &env,
        &ppo_cfg,
        &adv,
        &macer0,
        seed,
        &SerialPool,
        |_| {},
    )
    .unwrap();
    let continued_cfg = TrainerConfig {
        env,
        ppo: PpoConfig {
            learning_rate: macer0.learning_rate,
            entropy_coef: macer0.entropy_coef,
            ..ppo_cfg
        },
        adv: AdvConfig {
            alpha_adv: macer0.alpha_adv,
            warmup_frac: 0.0,
            ramp_frac: 0.0,
            ..adv
        },
        macer: None,
        selector: Selector::RobustScore,
        total_iters: usize::MAX,
        env_step_budget: Some(macer0.env_step_budget),
        seed,
    };
    let continued =
        robust::train(&continued_cfg, start.clone(), Some(&base), &SerialPool, |_| {}).unwrap();
    let macer_identical = ft
        .last
        .flat()
        .iter()
        .zip(continued.last.flat().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    verdict(
        "5 (degenerate-config regressions)",
        ppo_identical && macer_identical,
        &format!(
            "robust-terms-off == plain PPO: {ppo_identical}; lambda=0 fine-tune == continued \
             adversarial PPO: {macer_identical}"
        ),
    );
}

// ----------------------------------------------------------------------
// Shared desk-scale pipeline for the end-to-end criteria.
// ----------------------------------------------------------------------

struct Artifacts {
    env: EnvConfig,
    eval_cfg: EvalConfig,
    baseline: NetParams,
    advppo: NetParams,
    macer: NetParams,
    macer_logs: Vec<IterLog>,
    baseline_report: EvalReport,
    advppo_report: EvalReport,
    macer_report: EvalReport,
    dir: std::path::PathBuf,
}

static ARTIFACTS: OnceLock<Artifacts> = OnceLock::new();

fn artifacts() -> &'static Artifacts {
    ARTIFACTS.get_or_init(|| {
        let t0 = Instant::now();
        let pool = pool();
        let env = EnvConfig::default();
        let ppo_cfg = PpoConfig::default();
        let eval_cfg = EvalConfig::default();
        let dir = std::env::temp_dir().join(format!("rmapf-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        eprintln!("[pipeline] training baseline ({BASELINE_ITERS} iters)");
        let baseline_cfg = TrainerConfig {
            env,
            ppo: ppo_cfg,
            adv: AdvConfig { eval_period: 8, eval_episodes: 32, ..AdvConfig::disabled() },
            macer: None,
            selector: Selector::CleanSuccess,
            total_iters: BASELINE_ITERS,
            env_step_budget: None,
            seed: PIPELINE_SEED,
        };
        let baseline = robust::train(
            &baseline_cfg,
            net::init_params(PIPELINE_SEED),
            None,
            &pool,
            |_| {},
        )
        .unwrap();

        eprintln!(
            "[pipeline] baseline done ({:.0}s); adversarial PPO ({ADVPPO_ITERS} iters)",
            t0.elapsed().as_secs_f64()
        );
        let adv = AdvConfig { total_iters: ADVPPO_ITERS, ..AdvConfig::default() };
        let advppo = robust::train_advppo(
            &baseline.best,
            &env,
            &ppo_cfg,
            &adv,
            PIPELINE_SEED + 1,
            &pool,
            |_| {},
        )
        .unwrap();

        eprintln!(
            "[pipeline] adversarial PPO done ({:.0}s); hinge fine-tune ({MACER_BUDGET} steps)",
            t0.elapsed().as_secs_f64()
        );
        let macer_cfg =
            MacerConfig { env_step_budget: MACER_BUDGET, ..MacerConfig::default() };
        let mut macer_logs = Vec::new();
        let macer = robust::finetune_macer(
            &advppo.best,
            &baseline.best,
            &env,
            &ppo_cfg,
            &adv,
            &macer_cfg,
            PIPELINE_SEED + 2,
            &pool,
            |l| macer_logs.push(l.clone()),
        )
        .unwrap();

        eprintln!(
            "[pipeline] fine-tune done ({:.0}s); evaluation grids",
            t0.elapsed().as_secs_f64()
        );
        let baseline_report = eval::run_grid(&baseline.best, &env, &eval_cfg, &pool);
        let advppo_report = eval::run_grid(&advppo.best, &env, &eval_cfg, &pool);
        let macer_report = eval::run_grid(&macer.best, &env, &eval_cfg, &pool);

        // Checkpoints on disk for the binary-level determinism check.
        std::fs::write(dir.join("baseline.ckpt"), net::encode_checkpoint(&baseline.best))
            .unwrap();
        eprintln!("[pipeline] artifacts ready ({:.0}s total)", t0.elapsed().as_secs_f64());

        Artifacts {
            env,
            eval_cfg,
            baseline: baseline.best,
            advppo: advppo.best,
            macer: macer.best,
            macer_logs,
            baseline_report,
            advppo_report,
            macer_report,
            dir,
        }
    })
}

// ----------------------------------------------------------------------
// Criterion 6: fragility of the plain baseline.
// ----------------------------------------------------------------------

#[test]
fn criterion_6_baseline_fragility() {
    let a = artifacts();
    let clean = a.baseline_report.clean.mean;
    let fgsm_02 = cell_mean(&a.baseline_report, "fgsm@0.20");
    let pgd_02 = cell_mean(&a.baseline_report, "pgd10@0.20");
    let worst_grad = fgsm_02.min(pgd_02);
    let pass = clean >= 0.90 && worst_grad < 0.50 && (clean - worst_grad) >= 0.40;
    verdict(
        "6 (baseline fragility)",
        pass,
        &format!(
            "clean {clean:.3}, fgsm@0.20 {fgsm_02:.3}, pgd@0.20 {pgd_02:.3} \
             (drop {:.1} points)",
            100.0 * (clean - worst_grad)
        ),
    );
}

fn cell_mean(report: &EvalReport, label: &str) -> f64 {
    report
        .cells
        .iter()
        .find(|c| c.label == label)
        .unwrap_or_else(|| panic!("missing cell {label}"))
        .mean
}

// ----------------------------------------------------------------------
// Criterion 7: defense ordering.
// ----------------------------------------------------------------------

#[test]
fn criterion_7_defense_ordering() {
    let a = artifacts();
    let b = &a.baseline_report;
    let v = &a.advppo_report;
    let m = &a.macer_report;

    let ordering = m.worst_adv >= v.worst_adv && v.worst_adv >= b.worst_adv + 0.20;
    let clean_ok =
        v.clean.mean >= b.clean.mean - 0.03 && m.clean.mean >= b.clean.mean - 0.03;

    // Paired bootstrap of the hinge fine-tune over adversarial PPO;
    // reported, sign not enforced at desk scale.
    let cells_m: Vec<f64> = m.cells.iter().map(|c| c.mean).collect();
    let cells_v: Vec<f64> = v.cells.iter().map(|c| c.mean).collect();
    let boot = eval::paired_bootstrap(&cells_m, &cells_v, 10_000, 7).unwrap();

    verdict(
        "7 (defense ordering)",
        ordering && clean_ok,
        &format!(
            "worst-adv: baseline {:.3} -> advppo {:.3} -> macer {:.3}; clean: {:.3} / {:.3} / \
             {:.3}; macer-vs-advppo gap {:+.2}pp CI [{:+.2}, {:+.2}]",
            b.worst_adv,
            v.worst_adv,
            m.worst_adv,
            b.clean.mean,
            v.clean.mean,
            m.clean.mean,
            100.0 * boot.mean_gap,
            100.0 * boot.ci_lo,
            100.0 * boot.ci_hi
        ),
    );
}

// ----------------------------------------------------------------------
// Criterion 8: multi-restart PGD sanity.
// ----------------------------------------------------------------------

#[test]
fn criterion_8_multi_restart_pgd() {
    let a = artifacts();
    let pool = pool();
    let mut singles = Vec::new();
    let mut worsts = Vec::new();
    let mut min_property = true;
    for params in [&a.baseline, &a.advppo, &a.macer] {
        let cells =
            eval::multi_restart_pgd(params, &[0.20], 5, &a.env, &a.eval_cfg, &pool).unwrap();
        let cell = &cells[0];
        // Restart 0 shares the attack streams of the standard grid cell.
        singles.push(cell.restart_means[0]);
        worsts.push(cell.worst);
        for &m in &cell.restart_means {
            if cell.worst > m + 1e-12 {
                min_property = false;
            }
        }
    }
    // Pairwise ranking agreement between single-restart and worst-of-5.
    let mut ranking_ok = true;
    for i in 0..3 {
        for j in 0..3 {
            if singles[i] < singles[j] - 1e-9 && worsts[i] > worsts[j] + 1e-9 {
                ranking_ok = false;
            }
        }
    }
    verdict(
        "8 (multi-restart PGD sanity)",
        min_property && ranking_ok,
        &format!(
            "single-restart {:?} vs worst-of-5 {:?} (baseline/advppo/macer)",
            singles
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>(),
            worsts.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    );
}

// ----------------------------------------------------------------------
// Criterion 9: bit-identical evaluation across runs and worker counts.
// ----------------------------------------------------------------------

#[test]
fn criterion_9_eval_grid_determinism() {
    let a = artifacts();
    let ckpt = a.dir.join("baseline.ckpt");
    let run = |out: &std::path::Path, jobs: usize| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_rmapf"))
            .args([
                "eval-grid",
                "--checkpoint",
                &ckpt.display().to_string(),
                "--out",
                &out.display().to_string(),
                "--jobs",
                &jobs.to_string(),
                "--quiet",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out.join("report.json")).unwrap()
    };
    let r1 = run(&a.dir.join("det1"), 2);
    let r2 = run(&a.dir.join("det2"), 2);
    let r3 = run(&a.dir.join("det3"), 1);
    verdict(
        "9 (eval-grid determinism)",
        r1 == r2 && r1 == r3,
        &format!(
            "two --jobs 2 runs identical: {}, --jobs 1 identical: {} ({} bytes)",
            r1 == r2,
            r1 == r3,
            r1.len()
        ),
    );
}

// ----------------------------------------------------------------------
// Criterion 10: entropy-collapse guard.
// ----------------------------------------------------------------------

#[test]
fn criterion_10_entropy_collapse_guard() {
    let a = artifacts();
    let pool = pool();
    // The lambda = 0.05 run of the shared pipeline must never dip below
    // 0.2 nats.
    let min_ok = a
        .macer_logs
        .iter()
        .map(|l| l.entropy)
        .fold(f32::INFINITY, f32::min);

    // A lambda = 0.30 fine-tune must trigger the monitor within the run.
    let heavy = MacerConfig {
        lambda: 0.30,
        env_step_budget: MACER_BUDGET,
        ..MacerConfig::default()
    };
    let adv = AdvConfig { total_iters: ADVPPO_ITERS, ..AdvConfig::default() };
    let mut min_heavy = f32::INFINITY;
    robust::finetune_macer(
        &a.advppo,
        &a.baseline,
        &a.env,
        &PpoConfig::default(),
        &adv,
        &heavy,
        PIPELINE_SEED + 2,
        &pool,
        |l| min_heavy = min_heavy.min(l.entropy),
    )
    .unwrap();

    verdict(
        "10 (entropy-collapse guard)",
        min_ok > 0.2 && min_heavy < 0.2,
        &format!(
            "lambda=0.05 min entropy {min_ok:.3} (> 0.2), lambda=0.30 min entropy \
             {min_heavy:.3} (< 0.2)"
        ),
    );
}

// ----------------------------------------------------------------------
// Trained-policy spot checks from the operation contracts.
// ----------------------------------------------------------------------

#[test]
fn trained_fgsm_increases_attacker_loss() {
    let a = artifacts();
    let params = &a.baseline;
    let mut r = rng::stream(&[4700]);
    let mut states = Vec::new();
    let mut ep = 0u64;
    while states.len() < 1000 {
        let state =
            rmapf_core::env::generate_instance(rng::mix(&[4800, ep]), &a.env).unwrap();
        for i in 0..state.agents.len() {
            states.push(rmapf_core::env::observe(&state, i));
        }
        ep += 1;
    }
    states.truncate(1000);
    let mut fgsm_wins = 0usize;
    let mut pgd_wins = 0usize;
    for obs in &states {
        let target = attacks::clean_target(params, obs);
        let loss = net::ScalarLoss::CrossEntropy { target };
        let clean_ce = net::scalar_loss_value(&net::forward(params, obs).0, &loss);
        let adv = attacks::fgsm(params, obs, 0.2);
        let adv_ce = net::scalar_loss_value(&net::forward(params, &adv).0, &loss);
        if adv_ce >= clean_ce {
            fgsm_wins += 1;
        }
        let pgd = attacks::pgd(params, obs, 0.2, 10, 1, &mut r);
        let pgd_ce = net::scalar_loss_value(&net::forward(params, &pgd).0, &loss);
        if pgd_ce >= adv_ce {
            pgd_wins += 1;
        }
    }
    println!("fgsm raises CE on {fgsm_wins}/1000, pgd >= fgsm on {pgd_wins}/1000");
    assert!(fgsm_wins >= 950, "FGSM raised CE on only {fgsm_wins}/1000");
    assert!(pgd_wins >= 800, "PGD beat FGSM on only {pgd_wins}/1000");
}

#[test]
fn storyboard_defended_policy_flips_less() {
    let a = artifacts();
    let doc = eval::storyboard_capture(
        &[
            ("baseline".to_string(), &a.baseline),
            ("advppo".to_string(), &a.advppo),
            ("macer".to_string(), &a.macer),
        ],
        2000,
        &AttackSpec::fgsm(0.20),
        &a.env,
    );
    let flips: Vec<usize> = doc.policies.iter().map(|p| p.flip_count).collect();
    println!(
        "storyboard flips on seed 2000: baseline {} advppo {} macer {}",
        flips[0], flips[1], flips[2]
    );
    assert!(flips[1] <= flips[0], "defended policy flipped more than the baseline");
    assert!(flips[2] <= flips[0], "fine-tuned policy flipped more than the baseline");
}

#[test]
fn trained_robust_score_improves_over_baseline() {
    let a = artifacts();
    let pool = pool();
    let base = robust::robust_score(&a.baseline, &a.env, 60_000, 8, &pool);
    let adv = robust::robust_score(&a.advppo, &a.env, 60_000, 8, &pool);
    println!("robust score: baseline {base:.3} advppo {adv:.3}");
    assert!(adv > base, "adversarial training did not raise the robust score");
}

#[test]
fn constant_policy_pool_certifies_uniform_radius() {
    // A constant-argmax network certifies the closed-form radius at
    // every pooled state.
    let mut params = net::init_params(4900);
    params.flat_mut()[..864].iter_mut().for_each(|w| *w = 0.0);
    let ab_off = net::PARAM_COUNT - 1 - 128 - 5;
    params.flat_mut()[ab_off] = 4.0;
    let cfg = rmapf_core::cert::CertConfig { pool_size: 10, ..Default::default() };
    let report = rmapf_core::cert::radius_pool(
        &params,
        &EnvConfig::default(),
        &cfg,
        3,
        &SerialPool,
    )
    .unwrap();
    assert!((report.mean_radius - 0.2205).abs() < 1e-3, "{}", report.mean_radius);
    assert_eq!(report.abstain_fraction, 0.0);
}
