//! Randomized-smoothing certification of action stability.
//!
//! For a policy smoothed with isotropic Gaussian noise of width `sigma`,
//! a lower confidence bound `p_lower > 1/2` on the smoothed top-action
//! probability certifies that the smoothed argmax cannot change within
//! an l2 ball of radius `sigma * Phi^-1(p_lower)`. The certificate
//! describes the smoothed wrapper, not the deployed argmax policy; it is
//! reported as a smoothness diagnostic.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{self, Action, EnvConfig, Obs, OBS_LEN};
use crate::math::{self, NUM_ACTIONS};
use crate::net::{self, NetParams};
use crate::pool::{self, JobPool};
use crate::rng::{self, GaussianStream};

/// Certification parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    /// Gaussian smoothing standard deviation.
    pub sigma: f64,
    /// Selection samples (candidate vote).
    pub n0: usize,
    /// Estimation samples (confidence bound).
    pub n: usize,
    /// One-sided confidence level.
    pub alpha: f64,
    /// Trajectory states to certify in [`radius_pool`].
    pub pool_size: usize,
}

impl Default for CertConfig {
    fn default() -> Self {
        CertConfig { sigma: 0.10, n0: 32, n: 500, alpha: 1e-3, pool_size: 1500 }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CertError {
    #[error("quantile argument must lie strictly inside (0, 1), got {0}")]
    QuantileDomain(f64),
    #[error("invalid certification config: {0}")]
    InvalidConfig(&'static str),
    #[error("certification pool is empty")]
    EmptyPool,
}

impl CertConfig {
    pub fn validate(&self) -> Result<(), CertError> {
        if self.n0 < 1 {
            return Err(CertError::InvalidConfig("n0 must be at least 1"));
        }
        if self.n < self.n0 {
            return Err(CertError::InvalidConfig("n must be at least n0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CertError::InvalidConfig("alpha must lie in (0, 1)"));
        }
        if self.sigma <= 0.0 {
            return Err(CertError::InvalidConfig("sigma must be positive"));
        }
        Ok(())
    }
}

/// Certified action stability at one state. `action` is `None` on
/// ABSTAIN, in which case the radius is zero by convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub state_id: usize,
    pub action: Option<Action>,
    pub radius: f64,
    pub p_lower: f64,
}

/// Pool-level certification report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertReport {
    pub sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub pool_size: usize,
    pub mean_radius: f64,
    /// Ascending per-state radii (ABSTAIN counted as zero).
    pub radii: Vec<f64>,
    pub abstain_fraction: f64,
}

/// Inverse standard-normal CDF: a rational approximation refined by one
/// Newton step on the exact CDF. Absolute error stays well below 1e-8.
pub fn normal_quantile(p: f64) -> Result<f64, CertError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CertError::QuantileDomain(p));
    }
    let x = acklam_approx(p);
    // One Newton step: x <- x - (Phi(x) - p) / phi(x).
    let err = normal_cdf(x) - p;
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    Ok(x - err / pdf)
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * math::erfc(-x / math::sqrt(2.0))
}

fn acklam_approx(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = math::sqrt(-2.0 * math::ln(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = math::sqrt(-2.0 * math::ln(1.0 - p));
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Regularized incomplete beta function I_x(a, b) via the continued
/// fraction expansion (Lentz's algorithm).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = math::lgamma(a + b) - math::lgamma(a) - math::lgamma(b)
        + a * math::ln(x)
        + b * math::ln(1.0 - x);
    let bt = math::exp(ln_bt);
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Exact one-sided lower Clopper-Pearson bound on a binomial proportion:
/// the `p` solving `P(X >= k | p) = alpha`, found by bisection on the
/// regularized incomplete beta function. `k = 0` maps to 0 and `k = n`
/// to `alpha^(1/n)`.
pub fn clopper_pearson_lower(k: usize, n: usize, alpha: f64) -> f64 {
    debug_assert!(k <= n && n > 0);
    if k == 0 {
        return 0.0;
    }
    if k == n {
        return math::exp(math::ln(alpha) / n as f64);
    }
    // P(X >= k | p) = I_p(k, n - k + 1), increasing in p.
    let a = k as f64;
    let b = (n - k + 1) as f64;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if inc_beta(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One Cohen certification round at a single observation.
///
/// `n0` noisy forwards vote for the candidate action, `n` further
/// forwards estimate its smoothed probability, and the Clopper-Pearson
/// lower bound either certifies a radius or abstains. The Gaussian draws
/// come from a counter-based stream under `stream_key`, so certificates
/// for distinct states are independent and reproducible.
pub fn certify(
    params: &NetParams,
    obs: &Obs,
    cfg: &CertConfig,
    state_id: usize,
    stream_key: u64,
) -> Certificate {
    let mut stream = GaussianStream::new(stream_key);
    let mut noisy = Obs::zeros();

    let mut votes = [0usize; NUM_ACTIONS];
    for _ in 0..cfg.n0 {
        sample_noisy(obs, cfg.sigma, &mut stream, &mut noisy);
        votes[net::forward(params, &noisy).0.greedy()] += 1;
    }
    let candidate = argmax_count(&votes);

    let mut hits = 0usize;
    for _ in 0..cfg.n {
        sample_noisy(obs, cfg.sigma, &mut stream, &mut noisy);
        if net::forward(params, &noisy).0.greedy() == candidate {
            hits += 1;
        }
    }
    let p_lower = clopper_pearson_lower(hits, cfg.n, cfg.alpha);
    if p_lower > 0.5 {
        let radius = cfg.sigma * normal_quantile(p_lower).expect("p_lower inside (0,1)");
        Certificate { state_id, action: Some(Action::from_index(candidate)), radius, p_lower }
    } else {
        Certificate { state_id, action: None, radius: 0.0, p_lower }
    }
}

fn sample_noisy(obs: &Obs, sigma: f64, stream: &mut GaussianStream, out: &mut Obs) {
    for i in 0..OBS_LEN {
        out.data[i] = obs.data[i] + (sigma * stream.next_gaussian()) as f32;
    }
}

fn argmax_count(votes: &[usize; NUM_ACTIONS]) -> usize {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    best
}

/// Collects `pool_size` observations from clean greedy rollouts of the
/// certified policy itself (argmax actions, fresh instance per seed) in
/// deterministic (episode, step, agent) order.
pub fn collect_state_pool(
    params: &NetParams,
    env_cfg: &EnvConfig,
    pool_size: usize,
    seed: u64,
) -> Vec<Obs> {
    let mut states = Vec::with_capacity(pool_size);
    let mut episode = 0u64;
    while states.len() < pool_size {
        let instance_seed = rng::mix(&[rng::tag::CERT, seed, episode]);
        let mut state = env::generate_instance(instance_seed, env_cfg)
            .expect("certification pool instance generation failed");
        while !state.is_terminal() && states.len() < pool_size {
            let n = state.agents.len();
            let mut actions = alloc::vec![Action::Wait; n];
            for i in 0..n {
                if state.agents[i].reached {
                    continue;
                }
                let obs = env::observe(&state, i);
                let (out, _) = net::forward(params, &obs);
                actions[i] = Action::from_index(out.greedy());
                states.push(obs);
                if states.len() == pool_size {
                    break;
                }
            }
            if states.len() == pool_size {
                break;
            }
            state.step(&actions).expect("non-terminal episode");
        }
        episode += 1;
    }
    states
}

/// Certifies a pool of trajectory states and aggregates the radii,
/// counting ABSTAIN as zero.
pub fn radius_pool(
    params: &NetParams,
    env_cfg: &EnvConfig,
    cfg: &CertConfig,
    seed: u64,
    pool: &dyn JobPool,
) -> Result<CertReport, CertError> {
    cfg.validate()?;
    if cfg.pool_size == 0 {
        return Err(CertError::EmptyPool);
    }
    let states = collect_state_pool(params, env_cfg, cfg.pool_size, seed);
    let certs = pool::run_jobs(pool, states.len(), |idx| {
        let key = rng::mix(&[rng::tag::CERT, seed, 0xcafe, idx as u64]);
        certify(params, &states[idx], cfg, idx, key)
    });

    let mut radii: Vec<f64> = certs.iter().map(|c| c.radius).collect();
    let abstain = certs.iter().filter(|c| c.action.is_none()).count();
    let mean_radius = radii.iter().sum::<f64>() / radii.len() as f64;
    radii.sort_by(|a, b| a.partial_cmp(b).expect("radii are finite"));
    Ok(CertReport {
        sigma: cfg.sigma,
        n0: cfg.n0,
        n: cfg.n,
        alpha: cfg.alpha,
        pool_size: cfg.pool_size,
        mean_radius,
        radii,
        abstain_fraction: abstain as f64 / certs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    #[test]
    fn quantile_center_and_symmetry() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        let mut rng = rng::stream(&[60]);
        for _ in 0..100 {
            let p = 1e-6 + (1.0 - 2e-6) * rng::unit_f32(&mut rng) as f64;
            let a = normal_quantile(p).unwrap();
            let b = normal_quantile(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-9, "p={p} a={a} b={b}");
        }
    }

    #[test]
    fn quantile_known_point() {
        // Phi(1) = 0.8413447460685429
        let x = normal_quantile(0.8413447460685429).unwrap();
        assert!((x - 1.0).abs() < 1e-9, "{x}");
    }

    #[test]
    fn quantile_rejects_out_of_domain() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(-0.25).is_err());
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        for &p in &[1e-4, 0.01, 0.3, 0.6, 0.9, 0.9999] {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn clopper_pearson_boundaries() {
        assert_eq!(clopper_pearson_lower(0, 500, 1e-3), 0.0);
        assert_eq!(clopper_pearson_lower(0, 7, 0.05), 0.0);
        let kn = clopper_pearson_lower(500, 500, 1e-3);
        let expect = math::exp(math::ln(1e-3) / 500.0);
        assert!((kn - expect).abs() < 1e-9);
        assert!((kn - 0.98629).abs() < 1e-4);
    }

    #[test]
    fn clopper_pearson_is_monotone_in_k() {
        let mut prev = 0.0;
        for k in 0..=50 {
            let p = clopper_pearson_lower(k, 50, 1e-3);
            assert!(p >= prev, "k={k}: {p} < {prev}");
            prev = p;
        }
    }

    #[test]
    fn clopper_pearson_known_interval() {
        let p = clopper_pearson_lower(400, 500, 1e-3);
        assert!(p > 0.73 && p < 0.78, "{p}");
    }

    #[test]
    fn constant_unique_argmax_network_certifies_fixed_radius() {
        // Zeroed conv1 weights make the net input-independent; a single
        // large actor bias entry gives a unique constant argmax.
        let mut params = init_params(31);
        params.flat_mut()[..864].iter_mut().for_each(|w| *w = 0.0);
        let ab_off = crate::net::PARAM_COUNT - 1 - 128 - 5;
        params.flat_mut()[ab_off + 2] = 5.0;
        let cfg = CertConfig::default();
        let cert = certify(&params, &Obs::zeros(), &cfg, 0, 99);
        assert_eq!(cert.action, Some(Action::Down));
        let expect = 0.1 * normal_quantile(math::exp(math::ln(1e-3) / 500.0)).unwrap();
        assert!((cert.radius - expect).abs() < 1e-12);
        assert!((cert.radius - 0.2205).abs() < 1e-3);
    }

    #[test]
    fn certificates_are_reproducible() {
        let params = init_params(32);
        let cfg = CertConfig { n0: 8, n: 40, ..CertConfig::default() };
        let mut obs = Obs::zeros();
        obs.data[10] = 1.0;
        let a = certify(&params, &obs, &cfg, 3, 1234);
        let b = certify(&params, &obs, &cfg, 3, 1234);
        assert_eq!(a, b);
    }

    #[test]
    fn abstain_certificates_have_zero_radius() {
        // p_lower <= 1/2 must abstain; force it with a tiny sample count
        // and a noise-dominated policy.
        let params = init_params(33);
        let cfg = CertConfig { n0: 4, n: 8, alpha: 0.5, ..CertConfig::default() };
        let mut any_abstain = false;
        for key in 0..20 {
            let mut obs = Obs::zeros();
            obs.data[(key % 75) as usize] = 0.5;
            let cert = certify(&params, &obs, &cfg, 0, key);
            if cert.action.is_none() {
                assert_eq!(cert.radius, 0.0);
                any_abstain = true;
            }
        }
        assert!(any_abstain, "expected at least one ABSTAIN across keys");
    }

    #[test]
    fn empty_pool_is_an_error() {
        let params = init_params(34);
        let cfg = CertConfig { pool_size: 0, ..CertConfig::default() };
        let err = radius_pool(&params, &EnvConfig::default(), &cfg, 1, &crate::pool::SerialPool);
        assert!(matches!(err, Err(CertError::EmptyPool)));
    }
}
