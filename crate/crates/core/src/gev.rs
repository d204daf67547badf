//! Generalised extreme value distribution.
//!
//! `G(z) = exp[-(1 + xi (z - mu) / psi)^(-1/xi)]` on `1 + xi (z - mu) / psi > 0`,
//! with the Gumbel limit `exp[-exp(-(z - mu) / psi)]` at `xi = 0`.
//!
//! Evaluation goes through `ln_1p`/`exp_m1` so that the `xi != 0` branch stays
//! accurate down to `|xi| = XI_SWITCH`, below which the Gumbel form is used.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Below this `|xi|` the Gumbel branch is evaluated.
pub const XI_SWITCH: f64 = 1e-6;

/// Below this `|xi|` the derivative in `xi` is evaluated by its power series.
const XI_SERIES: f64 = 1e-4;

/// Below this `|xi|` the variance is evaluated from the log-gamma series.
const XI_VARIANCE_SERIES: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    mu: f64,
    psi: f64,
    xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, psi: f64, xi: f64) -> Result<Self> {
        if !(psi > 0.0) || !psi.is_finite() {
            return Err(Error::Domain(format!("GEV scale must be positive, got {psi}")));
        }
        if !mu.is_finite() || !xi.is_finite() {
            return Err(Error::Domain(format!(
                "GEV location and shape must be finite, got mu={mu}, xi={xi}"
            )));
        }
        Ok(Self { mu, psi, xi })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    fn is_gumbel(&self) -> bool {
        self.xi.abs() < XI_SWITCH
    }

    /// `1 + xi (z - mu) / psi > 0`, or always true in the Gumbel case.
    pub fn in_support(&self, z: f64) -> bool {
        self.is_gumbel() || 1.0 + self.xi * (z - self.mu) / self.psi > 0.0
    }

    /// Finite support endpoints `(lower, upper)`; infinite where unbounded.
    pub fn support(&self) -> (f64, f64) {
        if self.is_gumbel() {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if self.xi > 0.0 {
            (self.mu - self.psi / self.xi, f64::INFINITY)
        } else {
            (f64::NEG_INFINITY, self.mu - self.psi / self.xi)
        }
    }

    /// `t(z) = (1 + xi z)^(-1/xi)` in log form: returns `-ln t`, or `None`
    /// off support.
    fn neg_log_t(&self, z: f64) -> Option<f64> {
        if self.is_gumbel() {
            Some(z)
        } else {
            let u = self.xi * z;
            if u <= -1.0 {
                None
            } else {
                Some(u.ln_1p() / self.xi)
            }
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        let std = (z - self.mu) / self.psi;
        match self.neg_log_t(std) {
            Some(h) => (-(-h).exp()).exp(),
            None if self.xi > 0.0 => 0.0,
            None => 1.0,
        }
    }

    /// Log density; `-inf` off support.
    pub fn log_density(&self, z: f64) -> f64 {
        standard_log_density((z - self.mu) / self.psi, self.xi) - self.psi.ln()
    }

    pub fn quantile(&self, prob: f64) -> Result<f64> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::Domain(format!("quantile probability must lie in (0,1), got {prob}")));
        }
        Ok(self.quantile_unchecked(prob))
    }

    pub(crate) fn quantile_unchecked(&self, prob: f64) -> f64 {
        let log_y = (-prob.ln()).ln();
        if self.is_gumbel() {
            self.mu - self.psi * log_y
        } else {
            self.mu + self.psi * (-self.xi * log_y).exp_m1() / self.xi
        }
    }

    /// Level exceeded on average once every `p_years` blocks.
    pub fn return_level(&self, p_years: f64) -> Result<f64> {
        let spec = ReturnLevelSpec::new(p_years)?;
        self.quantile(spec.probability())
    }

    /// Variance, or `None` when `xi >= 0.5` and the variance is infinite.
    pub fn variance(&self) -> Option<f64> {
        gev_standard_variance(self.xi).map(|v| v * self.psi * self.psi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Domain("sample size must be at least 1".into()));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    pub(crate) fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile_unchecked(u)
    }

    /// Gradient of the log density in `(ln psi, xi)`; `None` off support.
    pub fn score_log_scale_shape(&self, z: f64) -> Option<[f64; 2]> {
        standard_terms((z - self.mu) / self.psi, self.xi).map(|(_, g)| g)
    }
}

/// Log density of GEV(0, 1, xi) at `std` (without the `-ln psi` term) and
/// its gradient in `(ln psi, xi)`; `None` off support.
#[inline]
pub(crate) fn standard_terms(std: f64, xi: f64) -> Option<(f64, [f64; 2])> {
    if xi.abs() < XI_SWITCH {
        let t = (-std).exp();
        let d_lnpsi = -1.0 + std - std * t;
        let d_xi = (1.0 - t) * 0.5 * std * std - std;
        return Some((-std - t, [d_lnpsi, d_xi]));
    }
    let u = xi * std;
    if u <= -1.0 {
        return None;
    }
    let h = u.ln_1p() / xi;
    let t = (-h).exp();
    let w = 1.0 + u;
    let d_lnpsi = -1.0 + (1.0 + xi) * std / w - std * t / w;
    let bracket = if xi.abs() < XI_SERIES {
        xi_series_term(xi, std)
    } else {
        h / xi - std / (xi * w)
    };
    let d_xi = (1.0 - t) * bracket - std / w;
    Some((-(1.0 + xi) * h - t, [d_lnpsi, d_xi]))
}

/// Log density of GEV(0, 1, xi) at `std`; `-inf` off support.
#[inline]
pub(crate) fn standard_log_density(std: f64, xi: f64) -> f64 {
    if xi.abs() < XI_SWITCH {
        -std - (-std).exp()
    } else {
        let u = xi * std;
        if u <= -1.0 {
            return f64::NEG_INFINITY;
        }
        let h = u.ln_1p() / xi;
        -(1.0 + xi) * h - (-h).exp()
    }
}

/// `ln(1 + xi z) / xi^2 - z / (xi (1 + xi z))` by its series in `xi`.
fn xi_series_term(xi: f64, z: f64) -> f64 {
    let mut sum = 0.0;
    let mut xi_pow = 1.0;
    let mut z_pow = z * z;
    for k in 1..=8 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += sign * (k as f64) / (k as f64 + 1.0) * xi_pow * z_pow;
        xi_pow *= xi;
        z_pow *= z;
    }
    sum
}

// zeta(2..=13)
const ZETA: [f64; 12] = [
    1.644_934_066_848_226_4,
    1.202_056_903_159_594_3,
    1.082_323_233_711_138_2,
    1.036_927_755_143_369_9,
    1.017_343_061_984_449_1,
    1.008_349_277_381_922_8,
    1.004_077_356_197_944_3,
    1.002_008_392_826_082_2,
    1.000_994_575_127_818_1,
    1.000_494_188_604_119_5,
    1.000_246_086_553_308_1,
    1.000_122_713_347_578_5,
];

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Variance of GEV(0, 1, xi).
fn gev_standard_variance(xi: f64) -> Option<f64> {
    if xi >= 0.5 {
        return None;
    }
    if xi.abs() < XI_VARIANCE_SERIES {
        // ln Gamma(1 - x) = gamma x + sum_k zeta(k) x^k / k
        let mut b = 0.0; // 2 sum zeta(k) xi^k / k
        let mut diff_over_xi2 = 0.0; // sum zeta(k) xi^(k-2) (2^k - 2) / k
        let mut xi_pow = xi * xi;
        let mut xi_pow_m2 = 1.0;
        for (idx, zeta) in ZETA.iter().enumerate() {
            let k = (idx + 2) as f64;
            b += 2.0 * zeta * xi_pow / k;
            diff_over_xi2 += zeta * xi_pow_m2 * (2f64.powf(k) - 2.0) / k;
            xi_pow *= xi;
            xi_pow_m2 *= xi;
        }
        let a_minus_b = diff_over_xi2 * xi * xi;
        let expm1_ratio = if a_minus_b == 0.0 { 1.0 } else { a_minus_b.exp_m1() / a_minus_b };
        return Some((2.0 * EULER_GAMMA * xi + b).exp() * expm1_ratio * diff_over_xi2);
    }
    let g1 = gamma(1.0 - xi);
    Some((gamma(1.0 - 2.0 * xi) - g1 * g1) / (xi * xi))
}

/// A return period and its quantile transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnLevelSpec {
    p: f64,
    y_p: f64,
}

impl ReturnLevelSpec {
    pub fn new(p_years: f64) -> Result<Self> {
        if !(p_years > 1.0) || !p_years.is_finite() {
            return Err(Error::Domain(format!("return period must exceed 1, got {p_years}")));
        }
        Ok(Self {
            p: p_years,
            y_p: -(-1.0 / p_years).ln_1p(),
        })
    }

    pub fn period(&self) -> f64 {
        self.p
    }

    /// `y_p = -ln(1 - 1/p)`.
    pub fn y_p(&self) -> f64 {
        self.y_p
    }

    /// Non-exceedance probability `1 - 1/p`.
    pub fn probability(&self) -> f64 {
        1.0 - 1.0 / self.p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gev(mu: f64, psi: f64, xi: f64) -> GevParams {
        GevParams::new(mu, psi, xi).unwrap()
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(GevParams::new(0.0, 0.0, 0.1).is_err());
        assert!(GevParams::new(0.0, -1.0, 0.1).is_err());
        assert!(GevParams::new(0.0, f64::NAN, 0.1).is_err());
    }

    #[test]
    fn cdf_at_location_is_exp_minus_one() {
        assert_relative_eq!(gev(0.0, 1.0, 0.5).cdf(0.0), (-1f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(gev(0.0, 1.0, 0.0).cdf(0.0), (-1f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn cdf_matches_high_precision_reference() {
        // exp(-1.5^-10), 50-digit evaluation
        let reference = 0.982_807_968_986_776_664_973_526_868_089_774_7;
        assert!((gev(10.0, 2.0, 0.1).cdf(20.0) - reference).abs() < 1e-12);
    }

    #[test]
    fn cdf_outside_support() {
        let frechet = gev(0.0, 1.0, 0.5);
        assert_eq!(frechet.cdf(-3.0), 0.0);
        let weibull = gev(0.0, 1.0, -0.5);
        assert_eq!(weibull.cdf(3.0), 1.0);
        assert_eq!(weibull.support(), (f64::NEG_INFINITY, 2.0));
    }

    #[test]
    fn log_density_examples() {
        assert_eq!(gev(0.0, 1.0, 0.5).log_density(-3.0), f64::NEG_INFINITY);
        assert_relative_eq!(gev(0.0, 1.0, 0.0).log_density(0.0), -1.0, max_relative = 1e-15);
    }

    #[test]
    fn log_density_is_derivative_of_cdf() {
        let p = gev(10.0, 2.0, 0.1);
        let h = 1e-5;
        let fd = (p.cdf(15.0 + h) - p.cdf(15.0 - h)) / (2.0 * h);
        assert!((p.log_density(15.0) - fd.ln()).abs() < 1e-8);
        // 50-digit reference for the same point
        assert!((p.log_density(15.0) - (-3.255_100_427_416_252_6)).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        assert!(gev(0.0, 1.0, 0.0).quantile((-1f64).exp()).unwrap().abs() < 1e-15);
        assert!(gev(0.0, 1.0, 0.1).quantile(0.0).is_err());
        assert!(gev(0.0, 1.0, 0.1).quantile(1.0).is_err());
    }

    /// Bisection on the CDF, independent of the closed-form quantile.
    fn bisect_quantile(p: &GevParams, prob: f64) -> f64 {
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p.cdf(mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gumbel_99_percent_quantile_matches_bisection() {
        let p = gev(0.0, 1.0, 0.0);
        let oracle = bisect_quantile(&p, 0.99);
        assert!((oracle - 4.600_149_226_776_58).abs() < 1e-10);
        assert!((p.quantile(0.99).unwrap() - oracle).abs() < 1e-10);
        assert!((p.return_level(100.0).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn return_level_is_quantile_at_one_minus_inverse_period() {
        let p = gev(30.0, 7.0, 0.1);
        assert_eq!(p.return_level(100.0).unwrap(), p.quantile(0.99).unwrap());
        assert!(p.return_level(1.0).is_err());
        let spec = ReturnLevelSpec::new(100.0).unwrap();
        assert_relative_eq!(spec.y_p(), -(0.99f64).ln(), max_relative = 1e-14);
        let mut last = f64::NEG_INFINITY;
        for period in [1.5, 2.0, 5.0, 10.0, 50.0, 100.0, 1000.0] {
            let level = p.return_level(period).unwrap();
            assert!(level > last);
            last = level;
        }
    }

    #[test]
    fn variance_closed_forms() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert_relative_eq!(gev(0.0, 1.0, 0.0).variance().unwrap(), pi2_6, max_relative = 1e-14);
        assert_relative_eq!(gev(0.0, 2.0, 0.0).variance().unwrap(), 4.0 * pi2_6, max_relative = 1e-14);
        assert_eq!(gev(0.0, 1.0, 0.5).variance(), None);
        assert_eq!(gev(0.0, 1.0, 0.7).variance(), None);
        // 50-digit references
        let cases = [
            (-0.2, 1.105_749_449_577_933_3),
            (0.1, 2.226_241_073_208_239_5),
            (0.3, 5.924_576_634_921_403_6),
            (0.001, 1.649_248_889_005_169),
            (-0.001, 1.640_642_681_484_991),
            (0.00001, 1.644_977_098_792_372_4),
        ];
        for (xi, reference) in cases {
            assert_relative_eq!(gev(0.0, 1.0, xi).variance().unwrap(), reference, max_relative = 1e-12);
        }
    }

    #[test]
    fn variance_continuous_across_series_switch() {
        let below = gev(0.0, 1.0, XI_VARIANCE_SERIES * (1.0 - 1e-9)).variance().unwrap();
        let above = gev(0.0, 1.0, XI_VARIANCE_SERIES * (1.0 + 1e-9)).variance().unwrap();
        assert!((below - above).abs() < 1e-9);
    }

    #[test]
    fn sample_contract() {
        let p = gev(0.0, 1.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(p.sample(0, &mut rng).is_err());
        let one = p.sample(1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(p.in_support(one[0]));
        let a = p.sample(20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = p.sample(20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_passes_kolmogorov_smirnov() {
        let p = gev(5.0, 2.0, 0.15);
        let n = 100_000;
        let mut xs = p.sample(n, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = p.cdf(x);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn score_matches_finite_differences_across_zero_shape() {
        for xi in [-0.3, -1e-5, -1e-7, 0.0, 1e-7, 1e-5, 2e-4, 0.25] {
            for z in [-1.5, 0.0, 0.7, 3.0] {
                let p = gev(1.0, 2.0, xi);
                let x = 1.0 + 2.0 * z;
                let Some([d_lnpsi, d_xi]) = p.score_log_scale_shape(x) else {
                    continue;
                };
                let h = 1e-6;
                let ll = |lnpsi: f64, s: f64| gev(1.0, lnpsi.exp(), s).log_density(x);
                let fd_lnpsi = (ll(2f64.ln() + h, xi) - ll(2f64.ln() - h, xi)) / (2.0 * h);
                assert!((d_lnpsi - fd_lnpsi).abs() < 1e-6 * (1.0 + fd_lnpsi.abs()), "xi={xi} z={z}");
                // straddling zero mixes branches; use a one-sided step away from the switch
                if xi.abs() > 1e-4 {
                    let fd_xi = (ll(2f64.ln(), xi + h) - ll(2f64.ln(), xi - h)) / (2.0 * h);
                    assert!((d_xi - fd_xi).abs() < 1e-5 * (1.0 + fd_xi.abs()), "xi={xi} z={z}");
                }
            }
        }
    }

    #[test]
    fn shape_score_continuous_at_zero() {
        for x in [-2.0, 0.5, 4.0] {
            let plus = gev(0.0, 1.0, 1e-6).score_log_scale_shape(x).unwrap();
            let minus = gev(0.0, 1.0, -1e-6).score_log_scale_shape(x).unwrap();
            let zero = gev(0.0, 1.0, 0.0).score_log_scale_shape(x).unwrap();
            let tol = 1e-4 * (1.0 + zero[1].abs());
            assert!((plus[1] - minus[1]).abs() < tol);
            assert!((plus[1] - zero[1]).abs() < tol);
        }
    }
}
