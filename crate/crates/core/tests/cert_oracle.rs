//! Independent oracles for the certification math.
//!
//! The lower confidence bound is re-derived by bisecting the explicit
//! binomial tail sum (no incomplete beta function), and the normal
//! quantile by bisecting a Taylor-series erf. Both share nothing with
//! the production implementations beyond f64 arithmetic.

use rmapf_core::cert::{clopper_pearson_lower, normal_quantile};
use rmapf_core::rng;

/// P(X >= k) for X ~ Binomial(n, p), by direct summation of the PMF
/// (log-space binomial coefficients for stability).
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
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    // ln C(n, k) accumulated incrementally.
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

/// Oracle lower bound: bisection of p on P(X >= k | p) = alpha.
fn oracle_cp_lower(k: usize, n: usize, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if binom_tail_geq(k, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Taylor-series erf (converges fast for |x| <= 6).
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

fn oracle_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Oracle quantile: bisection of the series-based CDF.
fn oracle_quantile(p: f64) -> f64 {
    let mut lo = -9.0f64;
    let mut hi = 9.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if oracle_normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn clopper_pearson_matches_binomial_tail_oracle() {
    let mut r = rng::stream(&[9000]);
    for case in 0..1000 {
        let n = 1 + (rng::unit_f32(&mut r) as f64 * 600.0) as usize;
        let k = (rng::unit_f32(&mut r) as f64 * (n + 1) as f64) as usize % (n + 1);
        let alpha = [1e-3, 0.01, 0.05][case % 3];
        let got = clopper_pearson_lower(k, n, alpha);
        let want = oracle_cp_lower(k, n, alpha);
        assert!(
            (got - want).abs() < 1e-6,
            "k={k} n={n} alpha={alpha}: got {got}, oracle {want}"
        );
    }
}

#[test]
fn clopper_pearson_k_equals_n_closed_form() {
    for (n, alpha) in [(500usize, 1e-3f64), (100, 0.05), (7, 0.01), (1, 0.5)] {
        let got = clopper_pearson_lower(n, n, alpha);
        let want = alpha.powf(1.0 / n as f64);
        assert!((got - want).abs() < 1e-9, "n={n} alpha={alpha}");
    }
}

#[test]
fn normal_quantile_matches_erf_bisection_oracle() {
    let mut r = rng::stream(&[9001]);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let p = 1e-5 + (1.0 - 2e-5) * rng::unit_f32(&mut r) as f64;
        let got = normal_quantile(p).unwrap();
        let want = oracle_quantile(p);
        worst = worst.max((got - want).abs());
    }
    // Known anchor: Phi(1) from the series oracle.
    let got = normal_quantile(0.8413447460685429).unwrap();
    assert!((got - 1.0).abs() < 1e-8);
    assert!(worst < 1e-8, "worst abs error {worst}");
}

#[test]
fn coverage_sanity_at_p09() {
    // Over simulated binomials with true p = 0.9 the lower bound may
    // exceed 0.9 in at most ~alpha of cases (3 binomial stds of slack).
    let n = 500usize;
    let alpha = 1e-3f64;
    let trials = 10_000usize;
    let mut r = rng::stream(&[9002]);
    let mut exceed = 0usize;
    for _ in 0..trials {
        let mut k = 0usize;
        for _ in 0..n {
            if rng::unit_f32(&mut r) < 0.9 {
                k += 1;
            }
        }
        if clopper_pearson_lower(k, n, alpha) > 0.9 {
            exceed += 1;
        }
    }
    let expected = alpha * trials as f64;
    let slack = 3.0 * (trials as f64 * alpha * (1.0 - alpha)).sqrt();
    assert!(
        (exceed as f64) <= expected + slack,
        "exceedances {exceed} vs bound {}",
        expected + slack
    );
}
