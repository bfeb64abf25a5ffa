//! Variate generation for the three distributions the sampler needs:
//! the nonnegative truncated normal, the inverse gamma and the exponential.
//!
//! Truncated normals are parameterized by the *parent* mean and variance of
//! the untruncated normal. A parent precision `τ` corresponds to a parent
//! variance of `1/τ`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Standardized lower bounds above this use the continued fraction for the
/// inverse Mills ratio; below it the direct `φ/Q` quotient is exact enough.
const MILLS_CF_CUTOFF: f64 = 5.0;
const MILLS_CF_TERMS: u32 = 120;

/// Parent mean and variance of a normal truncated to `[0, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncNormParams {
    parent_mean: f64,
    parent_var: f64,
}

impl TruncNormParams {
    pub fn new(parent_mean: f64, parent_var: f64) -> Result<Self> {
        if !parent_mean.is_finite() {
            return Err(Error::Numerical(format!(
                "truncated normal parent mean is not finite ({parent_mean})"
            )));
        }
        if !(parent_var.is_finite() && parent_var > 0.0) {
            return Err(Error::Numerical(format!(
                "truncated normal parent variance must be positive and finite ({parent_var})"
            )));
        }
        Ok(Self {
            parent_mean,
            parent_var,
        })
    }

    /// Builds the parameters from a parent precision `τ = 1/σ²`.
    pub fn from_precision(parent_mean: f64, precision: f64) -> Result<Self> {
        Self::new(parent_mean, 1.0 / precision)
    }

    pub fn parent_mean(&self) -> f64 {
        self.parent_mean
    }

    pub fn parent_var(&self) -> f64 {
        self.parent_var
    }

    pub fn parent_sd(&self) -> f64 {
        self.parent_var.sqrt()
    }

    /// The truncation point in standard units, `-μ/σ`.
    pub fn standardized_lower(&self) -> f64 {
        -self.parent_mean / self.parent_sd()
    }
}

/// Shape `α` and scale `β` of an inverse-gamma distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvGammaParams {
    shape: f64,
    scale: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inverse-gamma shape must be positive, got {shape}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inverse-gamma scale must be positive, got {scale}"
            )));
        }
        Ok(Self { shape, scale })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `β/(α-1)`, defined for `α > 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal upper tail `Q(x) = 1 - Φ(x)`, through `erfc` so that it
/// keeps full relative precision for large positive `x`.
#[inline]
pub fn std_normal_upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Inverse Mills ratio `φ(a) / (1 - Φ(a))`.
pub fn inverse_mills_ratio(a: f64) -> f64 {
    if a < MILLS_CF_CUTOFF {
        std_normal_pdf(a) / std_normal_upper_tail(a)
    } else {
        a + mills_excess(a)
    }
}

/// `λ(a) - a` for large `a`, from the Laplace continued fraction
/// `Q(a)/φ(a) = 1/(a + 1/(a + 2/(a + 3/(a + ...))))`.
fn mills_excess(a: f64) -> f64 {
    let mut t = a;
    for n in (2..=MILLS_CF_TERMS).rev() {
        t = a + f64::from(n) / t;
    }
    1.0 / t
}

/// Mean of the truncated normal: `μ + σ φ(α)/(1 - Φ(α))` with `α = -μ/σ`.
pub fn truncated_normal_mean(p: &TruncNormParams) -> f64 {
    let sd = p.parent_sd();
    let a = p.standardized_lower();
    if a < MILLS_CF_CUTOFF {
        p.parent_mean + sd * inverse_mills_ratio(a)
    } else {
        // μ + σα cancels exactly, leaving only the continued-fraction tail.
        sd * mills_excess(a)
    }
}

/// One draw from the parent normal restricted to `[0, ∞)`.
///
/// Lower bounds at or below the parent mean use plain rejection from the
/// normal (acceptance at least 1/2). Bounds above it use exponential
/// rejection with the optimal rate `(a + sqrt(a² + 4))/2`, whose acceptance
/// stays above 0.75 arbitrarily far into the tail.
pub fn sample_truncated_normal<R: Rng + ?Sized>(p: &TruncNormParams, rng: &mut R) -> f64 {
    let a = p.standardized_lower();
    let z = if a <= 0.0 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a {
                break z;
            }
        }
    } else {
        let rate = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = a + e / rate;
            let log_accept = -0.5 * (z - rate) * (z - rate);
            let u: f64 = rng.random();
            if u.ln() <= log_accept {
                break z;
            }
        }
    };
    // μ + σz can dip a rounding error below zero when z sits on the bound.
    (p.parent_mean + p.parent_sd() * z).max(0.0)
}

/// One draw from the inverse gamma, as the reciprocal of a Gamma(α, rate β) draw.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(p: &InvGammaParams, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(p.shape, 1.0 / p.scale)
        .map_err(|e| Error::InvalidParameter(format!("gamma: {e}")))?;
    let g: f64 = gamma.sample(rng);
    let x = 1.0 / g;
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(Error::Numerical(format!(
            "inverse-gamma draw is not positive and finite (shape {}, scale {})",
            p.shape, p.scale
        )))
    }
}

pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "exponential rate must be positive, got {rate}"
        )));
    }
    let exp = Exp::new(rate).map_err(|e| Error::InvalidParameter(format!("exponential: {e}")))?;
    Ok(exp.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: TN mean by composite Simpson quadrature of x·φ
    /// and φ over a window wide enough to hold all the mass.
    fn quadrature_mean(mu: f64, sd: f64) -> f64 {
        let lo = 0.0f64.max(mu - 40.0 * sd);
        let hi = 0.0f64.max(mu) + 40.0 * sd;
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        // Density in log space, shifted by its value at the mode of the window.
        let mode = mu.max(lo);
        let log_d = |x: f64| -0.5 * ((x - mu) / sd).powi(2) + 0.5 * ((mode - mu) / sd).powi(2);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let d = log_d(x).exp();
            num += w * x * d;
            den += w * d;
        }
        num / den
    }

    #[test]
    fn truncated_mean_half_normal() {
        let p = TruncNormParams::new(0.0, 1.0).unwrap();
        assert_relative_eq!(truncated_normal_mean(&p), (2.0 / PI).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(truncated_normal_mean(&p), 0.7978845608, epsilon = 1e-10);
    }

    #[test]
    fn truncated_mean_far_above_zero() {
        let p = TruncNormParams::new(100.0, 1.0).unwrap();
        assert!((truncated_normal_mean(&p) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn truncated_mean_deep_tail_matches_quadrature() {
        for (mu, sd) in [(-30.0, 1.0), (-10.0, 1.0), (-4.0, 0.5), (-200.0, 2.0), (1.5, 3.0)] {
            let p = TruncNormParams::new(mu, sd * sd).unwrap();
            let got = truncated_normal_mean(&p);
            let want = quadrature_mean(mu, sd);
            assert!(got.is_finite() && got > 0.0);
            assert_relative_eq!(got, want, max_relative = 1e-7);
        }
        // Mills asymptotics: mean ≈ 1/a - 2/a³ for a = 30.
        let p = TruncNormParams::new(-30.0, 1.0).unwrap();
        assert_relative_eq!(truncated_normal_mean(&p), 1.0 / 30.0, max_relative = 1e-2);
        assert_relative_eq!(truncated_normal_mean(&p), 1.0 / 30.0 - 2.0 / 27_000.0, max_relative = 1e-4);
    }

    #[test]
    fn inverse_mills_is_continuous_across_cutoff() {
        let below = std_normal_pdf(MILLS_CF_CUTOFF) / std_normal_upper_tail(MILLS_CF_CUTOFF);
        let above = MILLS_CF_CUTOFF + mills_excess(MILLS_CF_CUTOFF);
        assert_relative_eq!(below, above, max_relative = 1e-12);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(TruncNormParams::new(0.0, 0.0).is_err());
        assert!(TruncNormParams::new(0.0, f64::INFINITY).is_err());
        assert!(TruncNormParams::new(f64::NAN, 1.0).is_err());
        assert!(InvGammaParams::new(0.0, 1.0).is_err());
        assert!(InvGammaParams::new(1.0, -1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_exponential(0.0, &mut rng).is_err());
        assert!(sample_exponential(-1.0, &mut rng).is_err());
    }

    #[test]
    fn precision_parameterization() {
        let p = TruncNormParams::from_precision(1.0, 4.0).unwrap();
        assert_eq!(p.parent_var(), 0.25);
    }

    #[test]
    fn deep_tail_draws_are_positive_and_fast() {
        let p = TruncNormParams::new(-1e4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x = sample_truncated_normal(&p, &mut rng);
            assert!(x.is_finite() && x >= 0.0);
        }
    }

    #[test]
    fn exponential_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16)
                .map(|_| sample_exponential(1.0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn exponential_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_exponential(0.1, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|&x| x >= 0.0));
        let mean = draws.iter().sum::<f64>() / n as f64;
        // sd of an exponential equals its mean.
        let se = 10.0 / (n as f64).sqrt();
        assert!((mean - 10.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn inverse_gamma_means() {
        for (shape, scale, seed) in [(3.0, 2.0, 1u64), (10.0, 9.0, 2)] {
            let p = InvGammaParams::new(shape, scale).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(&p, &mut rng).unwrap()).collect();
            assert!(draws.iter().all(|&x| x > 0.0));
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - p.mean().unwrap()).abs() < 3.0 * se, "mean {mean}");
        }
    }

    proptest::proptest! {
        #[test]
        fn truncated_mean_is_monotone(mu in -60.0f64..60.0, step in 1e-3f64..5.0, var in 0.01f64..25.0) {
            let lo = truncated_normal_mean(&TruncNormParams::new(mu, var).unwrap());
            let hi = truncated_normal_mean(&TruncNormParams::new(mu + step, var).unwrap());
            proptest::prop_assert!(hi > lo);
            proptest::prop_assert!(lo > 0.0 && lo >= mu);
        }
    }
}
