//! Normal quantiles and exact binomial bounds.

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Absolute tolerance of the Clopper–Pearson bisection.
pub const BOUND_TOLERANCE: f64 = 1e-10;

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

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

fn rational_quantile(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Inverse standard normal CDF, Φ⁻¹(p).
///
/// A piecewise rational approximation (relative error ~1e-9) followed by one
/// Newton step on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let x = rational_quantile(p);
    let density = normal_pdf(x);
    if density > 0.0 {
        Ok(x - (normal_cdf(x) - p) / density)
    } else {
        Ok(x)
    }
}

/// P(X ≥ k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    beta_reg(k as f64, (n - k + 1) as f64, p)
}

/// One-sided `(1 - alpha)` lower confidence bound on a binomial proportion
/// after observing `k` successes in `n` trials (Clopper–Pearson).
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("clopper_pearson_lower needs n >= 1".into()));
    }
    if k > n {
        return Err(Error::Domain(format!("k = {k} exceeds n = {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    // The bound is the p at which P(X >= k | p) = alpha; that tail grows with p.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > BOUND_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if binomial_upper_tail(k, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Exact two-sided binomial test of `k` successes in `n` trials against
/// p = 0.5; returns the p-value.
pub fn binomial_test_half(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let larger = k.max(n - k);
    if 2 * larger <= n + 1 {
        // the observed split is as balanced as possible
        return 1.0;
    }
    (2.0 * binomial_upper_tail(larger, n, 0.5)).min(1.0)
}

/// Two-sided certified radius `σ/2 · (Φ⁻¹(pa) − Φ⁻¹(pb))`.
pub fn two_sided_radius(pa: f64, pb: f64, sigma: f64) -> Result<f64> {
    for (name, v) in [("pa", pa), ("pb", pb)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("{name} must be in (0, 1), got {v}")));
        }
    }
    if pa < pb {
        return Err(Error::Domain(format!("pa = {pa} is below pb = {pb}")));
    }
    if pa == pb {
        return Ok(0.0);
    }
    Ok((sigma / 2.0 * (normal_quantile(pa)? - normal_quantile(pb)?)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent CDF: Taylor series of erf near zero, Lentz continued
    /// fraction for erfc in the tails.
    fn oracle_cdf(x: f64) -> f64 {
        let z = x.abs() / std::f64::consts::SQRT_2;
        let erfc_z = if z < 2.5 {
            let mut term = z;
            let mut sum = z;
            let mut n = 0.0;
            loop {
                n += 1.0;
                term *= -z * z / n;
                let add = term / (2.0 * n + 1.0);
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
            }
            1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            // erfc(z) = exp(-z²)/√π · 1/(z + 1/2/(z + 1/(z + 3/2/(z + ...))))
            let mut f = z;
            let tiny = 1e-300;
            let mut c = f;
            let mut d = 0.0;
            for i in 1..300 {
                let a = i as f64 / 2.0;
                d = z + a * d;
                d = if d.abs() < tiny { tiny } else { d };
                c = z + a / c;
                c = if c.abs() < tiny { tiny } else { c };
                d = 1.0 / d;
                let delta = c * d;
                f *= delta;
                if (delta - 1.0).abs() < 1e-16 {
                    break;
                }
            }
            (-z * z).exp() / std::f64::consts::PI.sqrt() / f
        };
        if x >= 0.0 {
            1.0 - 0.5 * erfc_z
        } else {
            0.5 * erfc_z
        }
    }

    fn oracle_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if oracle_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn ln_choose(n: u64, k: u64) -> f64 {
        statrs::function::factorial::ln_binomial(n, k)
    }

    /// P(X >= k) by direct summation of the pmf.
    fn oracle_tail(k: u64, n: u64, p: f64) -> f64 {
        (k..=n)
            .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
            .sum()
    }

    fn oracle_cp_lower(k: u64, n: u64, alpha: f64) -> f64 {
        let (mut lo, mut hi) = (1e-12, 1.0 - 1e-15);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if oracle_tail(k, n, mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn oracle_cdf_is_sane() {
        assert!((oracle_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((oracle_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((oracle_cdf(-5.0) - 2.866515718791939e-7).abs() < 1e-18);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        // Frozen from oracle_quantile: 0.6744897501960817, 3.090232306167813.
        let q75 = oracle_quantile(0.75);
        let q999 = oracle_quantile(0.999);
        assert!((q75 - 0.674490).abs() < 1e-6);
        assert!((q999 - 3.090232).abs() < 1e-6);
        assert!((normal_quantile(0.75).unwrap() - q75).abs() < 1e-9);
        assert!((normal_quantile(0.999).unwrap() - q999).abs() < 1e-9);
    }

    #[test]
    fn quantile_matches_oracle_across_range() {
        for &p in &[1e-6, 1e-4, 0.01, 0.02425, 0.1, 0.3, 0.6, 0.9, 0.97575, 0.999, 1.0 - 1e-6] {
            let q = normal_quantile(p).unwrap();
            let o = oracle_quantile(p);
            assert!((q - o).abs() < 1e-8, "p = {p}: {q} vs {o}");
            assert!((oracle_cdf(q) - p).abs() < 1e-12, "p = {p}: cdf {}", oracle_cdf(q));
        }
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(normal_quantile(p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn clopper_pearson_examples() {
        assert_eq!(clopper_pearson_lower(0, 1000, 0.001).unwrap(), 0.0);

        let all = clopper_pearson_lower(1000, 1000, 0.001).unwrap();
        let closed = 0.001_f64.powf(1.0 / 1000.0);
        assert!((all - closed).abs() < 1e-9);
        assert!((all - 0.993116).abs() < 1e-6);
        assert!((oracle_cp_lower(1000, 1000, 0.001) - closed).abs() < 1e-9);

        let mid = clopper_pearson_lower(990, 1000, 0.001).unwrap();
        let oracle = oracle_cp_lower(990, 1000, 0.001);
        assert!(mid > 0.97 && mid < 0.99, "{mid}");
        assert!((mid - oracle).abs() < 1e-8, "{mid} vs {oracle}");
    }

    #[test]
    fn clopper_pearson_agrees_with_pmf_oracle() {
        for &(k, n, alpha) in &[(1, 10, 0.05), (7, 10, 0.05), (50, 100, 0.001), (180, 200, 0.001)] {
            let got = clopper_pearson_lower(k, n, alpha).unwrap();
            let want = oracle_cp_lower(k, n, alpha);
            assert!((got - want).abs() < 1e-8, "({k},{n},{alpha}): {got} vs {want}");
        }
    }

    #[test]
    fn clopper_pearson_domain_errors() {
        assert!(clopper_pearson_lower(11, 10, 0.01).is_err());
        assert!(clopper_pearson_lower(1, 0, 0.01).is_err());
        assert!(clopper_pearson_lower(1, 10, 0.0).is_err());
        assert!(clopper_pearson_lower(1, 10, 1.0).is_err());
    }

    #[test]
    fn binomial_test_single_sample_never_rejects() {
        assert_eq!(binomial_test_half(1, 1), 1.0);
        assert_eq!(binomial_test_half(5, 10), 1.0);
        assert!(binomial_test_half(1000, 1000) < 1e-100);
        // 9 of 10: 2 * (10 + 1) / 1024
        assert!((binomial_test_half(9, 10) - 22.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn two_sided_radius_examples() {
        assert_eq!(two_sided_radius(0.5, 0.5, 0.3).unwrap(), 0.0);
        let r = two_sided_radius(0.999, 0.001, 0.5).unwrap();
        let want = 0.25 * 2.0 * oracle_quantile(0.999);
        assert!((r - want).abs() < 1e-9);
        assert!((r - 1.545116).abs() < 1e-6);
        for &p in &[0.51, 0.7, 0.95, 0.9999] {
            let sigma = 0.37;
            let r = two_sided_radius(p, 1.0 - p, sigma).unwrap();
            assert!((r - sigma * normal_quantile(p).unwrap()).abs() < 1e-12);
        }
        assert!(two_sided_radius(0.4, 0.6, 1.0).is_err());
        assert!(two_sided_radius(1.0, 0.1, 1.0).is_err());
        assert!(two_sided_radius(0.5, 0.0, 1.0).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bound_monotone_in_k(n in 1u64..400, a in 0u64..400, b in 0u64..400, alpha in 1e-4f64..0.5) {
                let (k1, k2) = (a.min(b) % (n + 1), a.max(b) % (n + 1));
                let (k1, k2) = (k1.min(k2), k1.max(k2));
                let lo = clopper_pearson_lower(k1, n, alpha).unwrap();
                let hi = clopper_pearson_lower(k2, n, alpha).unwrap();
                prop_assert!(lo <= hi + BOUND_TOLERANCE);
            }

            #[test]
            fn bound_non_increasing_in_alpha(n in 1u64..400, k in 0u64..400, a1 in 1e-4f64..0.5, a2 in 1e-4f64..0.5) {
                let k = k % (n + 1);
                let (small, large) = (a1.min(a2), a1.max(a2));
                let strict = clopper_pearson_lower(k, n, small).unwrap();
                let loose = clopper_pearson_lower(k, n, large).unwrap();
                prop_assert!(strict <= loose + BOUND_TOLERANCE);
            }

            #[test]
            fn quantile_roundtrip(p in 1e-6f64..(1.0 - 1e-6)) {
                let q = normal_quantile(p).unwrap();
                prop_assert!((normal_cdf(q) - p).abs() <= 1e-9);
            }
        }
    }
}
