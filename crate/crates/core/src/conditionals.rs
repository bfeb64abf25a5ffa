//! Full-conditional parameters for the factor entries and the noise variance.
//!
//! Every factor entry has a truncated-normal conditional. With
//! `s = Σ_j o_mj z_kj²` and `r = Σ_j o_mj z_kj (a_mj - Σ_{i≠k} w_mi z_ij)`
//! (sums over observed cells only), the five priors give
//!
//! | model   | parent variance     | parent mean × variance⁻¹     |
//! |---------|---------------------|------------------------------|
//! | GEE     | σ²/s                | -λ + r/σ²                    |
//! | GL1²    | σ²/(s + σ²λ)        | -λ Σ_{j≠k} w_mj + r/σ²       |
//! | GL2²    | σ²/(s + σ²λ)        | r/σ²                         |
//! | GL∞     | σ²/s                | -λ·1(w_mk) + r/σ²            |
//! | GL2,∞²  | σ²/(s + σ²λ)        | -λ·1(w_mk) + r/σ²            |
//!
//! where `1(w_mk)` flags the row maximum. Conditionals for `z_kn` are the
//! transpose: sums run over observed rows of column `n` and the indicator
//! looks at column `n` of `Z`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    sample_exponential, sample_truncated_normal, InvGammaParams, TruncNormParams,
};
use crate::error::{Error, Result};
use crate::matrix::{FactorPair, ObservedMatrix};

/// The five factor priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Independent exponential priors on every entry.
    Gee,
    /// Squared-L1 penalty on each row of `W` (column of `Z`).
    Gl12,
    /// Squared-L2 penalty, i.e. a half-Gaussian prior.
    Gl22,
    /// Max-entry penalty.
    GlInf,
    /// Squared-L2 plus max-entry penalty.
    Gl2Inf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Gee,
        ModelKind::Gl12,
        ModelKind::Gl22,
        ModelKind::GlInf,
        ModelKind::Gl2Inf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gee => "gee",
            ModelKind::Gl12 => "gl12",
            ModelKind::Gl22 => "gl22",
            ModelKind::GlInf => "glinf",
            ModelKind::Gl2Inf => "gl2inf",
        }
    }

    /// Whether the prior adds `σ²λ` to the precision denominator.
    pub fn has_quadratic_penalty(self) -> bool {
        matches!(self, ModelKind::Gl12 | ModelKind::Gl22 | ModelKind::Gl2Inf)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model {s:?} (expected gee, gl12, gl22, glinf or gl2inf)"
                ))
            })
    }
}

/// Prior hyperparameters shared by all entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_w: f64,
    pub lambda_z: f64,
    pub alpha_sigma: f64,
    pub beta_sigma: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_w: 0.1,
            lambda_z: 0.1,
            alpha_sigma: 1.0,
            beta_sigma: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_z", self.lambda_z),
            ("alpha_sigma", self.alpha_sigma),
            ("beta_sigma", self.beta_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Conditional distribution of a single factor entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FactorConditional {
    TruncatedNormal(TruncNormParams),
    /// No observed cell informs the entry and the prior carries no
    /// quadratic term; the conditional falls back to the exponential prior.
    PriorExponential { rate: f64 },
}

impl FactorConditional {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match self {
            FactorConditional::TruncatedNormal(p) => Ok(sample_truncated_normal(p, rng)),
            FactorConditional::PriorExponential { rate } => sample_exponential(*rate, rng),
        }
    }

    pub fn trunc_normal(&self) -> Option<&TruncNormParams> {
        match self {
            FactorConditional::TruncatedNormal(p) => Some(p),
            FactorConditional::PriorExponential { .. } => None,
        }
    }
}

/// Sufficient statistics of one coordinate update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateStats {
    /// `Σ o z_kj (a_mj - Σ_{i≠k} w_mi z_ij)`
    pub cross: f64,
    /// `Σ o z_kj²`
    pub energy: f64,
    /// Sum of the other entries in the same row of `W` (column of `Z`).
    pub others_sum: f64,
    /// Whether the entry is currently the row (column) maximum.
    pub is_max: bool,
}

/// Maps the statistics of one coordinate to its conditional under `model`.
pub fn conditional_from_stats(
    model: ModelKind,
    stats: &CoordinateStats,
    sigma2: f64,
    lambda: f64,
) -> Result<FactorConditional> {
    let precision_scaled = if model.has_quadratic_penalty() {
        stats.energy + sigma2 * lambda
    } else {
        stats.energy
    };
    if precision_scaled <= 0.0 {
        return Ok(FactorConditional::PriorExponential { rate: lambda });
    }
    let var = sigma2 / precision_scaled;
    let penalty = match model {
        ModelKind::Gee => lambda,
        ModelKind::Gl12 => lambda * stats.others_sum,
        ModelKind::Gl22 => 0.0,
        ModelKind::GlInf | ModelKind::Gl2Inf => {
            if stats.is_max {
                lambda
            } else {
                0.0
            }
        }
    };
    let mean = (-penalty + stats.cross / sigma2) * var;
    TruncNormParams::new(mean, var).map(FactorConditional::TruncatedNormal)
}

/// `true` iff `values[k]` is the maximum, ties going to the lowest index.
fn is_leading_max(values: impl Iterator<Item = f64>, k: usize) -> bool {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0 == k
}

fn check_shapes(factors: &FactorPair, data: &ObservedMatrix) -> Result<()> {
    if factors.output_dim() != data.dim() {
        return Err(Error::dims(data.dim(), factors.output_dim()));
    }
    Ok(())
}

/// Statistics for `w_mk`, computed directly from the current factors.
pub fn w_stats(factors: &FactorPair, data: &ObservedMatrix, m: usize, k: usize) -> CoordinateStats {
    let (w, z) = (factors.w(), factors.z());
    let w_row = w.row(m);
    let mut cross = 0.0;
    let mut energy = 0.0;
    for j in 0..data.cols() {
        if !data.is_observed(m, j) {
            continue;
        }
        let z_kj = z[[k, j]];
        let mut excl = 0.0;
        for (i, &w_mi) in w_row.iter().enumerate() {
            if i != k {
                excl += w_mi * z[[i, j]];
            }
        }
        cross += z_kj * (data.value(m, j) - excl);
        energy += z_kj * z_kj;
    }
    let others_sum = w_row.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, v)| v).sum();
    CoordinateStats {
        cross,
        energy,
        others_sum,
        is_max: is_leading_max(w_row.iter().copied(), k),
    }
}

/// Statistics for `z_kn`, computed directly from the current factors.
pub fn z_stats(factors: &FactorPair, data: &ObservedMatrix, k: usize, n: usize) -> CoordinateStats {
    let (w, z) = (factors.w(), factors.z());
    let z_col = z.column(n);
    let mut cross = 0.0;
    let mut energy = 0.0;
    for i in 0..data.rows() {
        if !data.is_observed(i, n) {
            continue;
        }
        let w_ik = w[[i, k]];
        let mut excl = 0.0;
        for (j, &z_jn) in z_col.iter().enumerate() {
            if j != k {
                excl += w[[i, j]] * z_jn;
            }
        }
        cross += w_ik * (data.value(i, n) - excl);
        energy += w_ik * w_ik;
    }
    let others_sum = z_col.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
    CoordinateStats {
        cross,
        energy,
        others_sum,
        is_max: is_leading_max(z_col.iter().copied(), k),
    }
}

/// Conditional of `w_mk` given everything else.
pub fn w_conditional_params(
    model: ModelKind,
    m: usize,
    k: usize,
    factors: &FactorPair,
    sigma2: f64,
    data: &ObservedMatrix,
    h: &HyperParams,
) -> Result<FactorConditional> {
    check_shapes(factors, data)?;
    if m >= data.rows() || k >= factors.rank() {
        return Err(Error::InvalidParameter(format!("index ({m}, {k}) out of range")));
    }
    conditional_from_stats(model, &w_stats(factors, data, m, k), sigma2, h.lambda_w)
}

/// Conditional of `z_kn` given everything else.
pub fn z_conditional_params(
    model: ModelKind,
    k: usize,
    n: usize,
    factors: &FactorPair,
    sigma2: f64,
    data: &ObservedMatrix,
    h: &HyperParams,
) -> Result<FactorConditional> {
    check_shapes(factors, data)?;
    if n >= data.cols() || k >= factors.rank() {
        return Err(Error::InvalidParameter(format!("index ({k}, {n}) out of range")));
    }
    conditional_from_stats(model, &z_stats(factors, data, k, n), sigma2, h.lambda_z)
}

/// Inverse-gamma conditional of `σ²` from the observed sum of squares.
pub fn sigma2_from_sse(observed: usize, sse: f64, h: &HyperParams) -> Result<InvGammaParams> {
    InvGammaParams::new(observed as f64 / 2.0 + h.alpha_sigma, 0.5 * sse + h.beta_sigma)
}

pub fn sigma2_conditional_params(
    factors: &FactorPair,
    data: &ObservedMatrix,
    h: &HyperParams,
) -> Result<InvGammaParams> {
    check_shapes(factors, data)?;
    let sse = crate::matrix::masked_sse(data, &crate::matrix::reconstruct(factors))?;
    sigma2_from_sse(data.observed_count(), sse, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Row m=0 of a 1x2 problem with K=2 where the k=0 column of Z is [1, 1]
    /// and the other factor contributes nothing, so the residuals are the
    /// data values [2, 2].
    fn hand_case(w_other: f64) -> (FactorPair, ObservedMatrix) {
        let w = array![[0.5, w_other]];
        let z = array![[1.0, 1.0], [0.0, 0.0]];
        let data = ObservedMatrix::fully_observed(array![[2.0, 2.0]]).unwrap();
        (FactorPair::new(w, z).unwrap(), data)
    }

    fn tn(c: FactorConditional) -> (f64, f64) {
        let p = c.trunc_normal().copied().unwrap();
        (p.parent_mean(), p.parent_var())
    }

    #[test]
    fn gee_and_gl22_hand_values() {
        let (f, data) = hand_case(0.0);
        let h = HyperParams::default();
        let (mu, var) = tn(w_conditional_params(ModelKind::Gee, 0, 0, &f, 1.0, &data, &h).unwrap());
        assert_relative_eq!(var, 0.5, epsilon = 1e-15);
        assert_relative_eq!(mu, 1.95, epsilon = 1e-15);

        let (mu, var) = tn(w_conditional_params(ModelKind::Gl22, 0, 0, &f, 1.0, &data, &h).unwrap());
        assert_relative_eq!(var, 1.0 / 2.1, epsilon = 1e-15);
        assert_relative_eq!(mu, 4.0 / 2.1, epsilon = 1e-15);
        assert_relative_eq!(mu, 1.90476, epsilon = 1e-5);
    }

    #[test]
    fn glinf_drops_penalty_off_the_max() {
        // w_m0 = 0.5 < w_m1 = 3.0, so the indicator is off for k = 0.
        let (f, data) = hand_case(3.0);
        let h = HyperParams::default();
        let (mu, var) = tn(w_conditional_params(ModelKind::GlInf, 0, 0, &f, 1.0, &data, &h).unwrap());
        assert_eq!(var, 0.5);
        assert_eq!(mu, 2.0);
    }

    #[test]
    fn zero_lambda_collapses_gee_and_gl22() {
        let (f, data) = hand_case(0.3);
        let h = HyperParams {
            lambda_w: 0.0,
            ..HyperParams::default()
        };
        let gee = w_conditional_params(ModelKind::Gee, 0, 0, &f, 1.0, &data, &h).unwrap();
        let gl22 = w_conditional_params(ModelKind::Gl22, 0, 0, &f, 1.0, &data, &h).unwrap();
        assert_eq!(gee, gl22);
    }

    #[test]
    fn z_conditional_mirrors_w() {
        // Transpose of the GEE hand case: column n=0 of a 2x1 problem.
        let w = array![[1.0, 0.0], [1.0, 0.0]];
        let z = array![[0.5], [0.0]];
        let data = ObservedMatrix::fully_observed(array![[2.0], [2.0]]).unwrap();
        let f = FactorPair::new(w, z).unwrap();
        let h = HyperParams::default();
        let (mu, var) = tn(z_conditional_params(ModelKind::Gee, 0, 0, &f, 1.0, &data, &h).unwrap());
        assert_relative_eq!(var, 0.5, epsilon = 1e-15);
        assert_relative_eq!(mu, 1.95, epsilon = 1e-15);
    }

    #[test]
    fn gl12_z_hand_value() {
        // Column n=0: w[:,0] = [1, 1], residuals [2, 2], other z sum = 3.
        // The other factor's W column is zero so it leaves the residual intact.
        let w = array![[1.0, 0.0], [1.0, 0.0]];
        let z = array![[0.5], [3.0]];
        let data = ObservedMatrix::fully_observed(array![[2.0], [2.0]]).unwrap();
        let f = FactorPair::new(w, z).unwrap();
        let h = HyperParams::default();
        let (mu, var) = tn(z_conditional_params(ModelKind::Gl12, 0, 0, &f, 1.0, &data, &h).unwrap());
        assert_relative_eq!(var, 1.0 / 2.1, epsilon = 1e-15);
        assert_relative_eq!(mu, 3.7 / 2.1, epsilon = 1e-14);
        assert_relative_eq!(mu, 1.76190, epsilon = 1e-5);

        let h0 = HyperParams {
            lambda_z: 0.0,
            ..h
        };
        let gl12 = z_conditional_params(ModelKind::Gl12, 0, 0, &f, 1.0, &data, &h0).unwrap();
        let gee = z_conditional_params(ModelKind::Gee, 0, 0, &f, 1.0, &data, &h0).unwrap();
        assert_eq!(gl12, gee);
    }

    #[test]
    fn sigma2_examples() {
        let h = HyperParams::default();
        let f = FactorPair::new(Array2::eye(2), array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let exact = ObservedMatrix::fully_observed(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = sigma2_conditional_params(&f, &exact, &h).unwrap();
        assert_eq!((p.shape(), p.scale()), (3.0, 1.0));

        let off = ObservedMatrix::fully_observed(array![[2.0, 3.0], [4.0, 5.0]]).unwrap();
        let p = sigma2_conditional_params(&f, &off, &h).unwrap();
        assert_eq!((p.shape(), p.scale()), (3.0, 3.0));

        let masked = off.with_mask(array![[true, true], [true, false]]).unwrap();
        let p = sigma2_conditional_params(&f, &masked, &h).unwrap();
        assert_eq!((p.shape(), p.scale()), (2.5, 2.5));
    }

    #[test]
    fn unobserved_coordinate_falls_back_to_prior() {
        let w = array![[1.0], [1.0]];
        let z = array![[1.0, 1.0]];
        let data = ObservedMatrix::new(array![[1.0, 1.0], [1.0, 1.0]], array![[true, true], [false, false]]).unwrap();
        let f = FactorPair::new(w, z).unwrap();
        let h = HyperParams::default();
        for model in [ModelKind::Gee, ModelKind::GlInf] {
            let c = w_conditional_params(model, 1, 0, &f, 1.0, &data, &h).unwrap();
            assert_eq!(c, FactorConditional::PriorExponential { rate: 0.1 });
        }
        // The quadratic prior keeps the conditional proper: TN(0, 1/λ).
        let (mu, var) = tn(w_conditional_params(ModelKind::Gl22, 1, 0, &f, 1.0, &data, &h).unwrap());
        assert_eq!(mu, 0.0);
        assert_relative_eq!(var, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert!(is_leading_max([2.0, 2.0, 1.0].into_iter(), 0));
        assert!(!is_leading_max([2.0, 2.0, 1.0].into_iter(), 1));
        assert!(is_leading_max([0.0, 0.0].into_iter(), 0));
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelKind::ALL {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        assert!("gl33".parse::<ModelKind>().is_err());
    }

    fn arb_problem() -> impl Strategy<Value = (FactorPair, ObservedMatrix, f64)> {
        (
            proptest::collection::vec(0.0f64..3.0, 6),
            proptest::collection::vec(0.0f64..3.0, 8),
            proptest::collection::vec(0.0f64..10.0, 12),
            proptest::collection::vec(any::<bool>(), 12),
            0.05f64..5.0,
        )
            .prop_map(|(w, z, a, mask, sigma2)| {
                let mut mask = Array2::from_shape_vec((3, 4), mask).unwrap();
                mask[[0, 0]] = true;
                (
                    FactorPair::new(
                        Array2::from_shape_vec((3, 2), w).unwrap(),
                        Array2::from_shape_vec((2, 4), z).unwrap(),
                    )
                    .unwrap(),
                    ObservedMatrix::new(Array2::from_shape_vec((3, 4), a).unwrap(), mask).unwrap(),
                    sigma2,
                )
            })
    }

    proptest! {
        #[test]
        fn masked_cells_never_influence_conditionals(
            (f, data, sigma2) in arb_problem(),
            junk in -100.0f64..100.0,
        ) {
            let h = HyperParams::default();
            let mut values = data.values().clone();
            for ((r, c), v) in values.indexed_iter_mut() {
                if !data.is_observed(r, c) {
                    *v = junk;
                }
            }
            let other = ObservedMatrix::new(values, data.mask().clone()).unwrap();
            for model in ModelKind::ALL {
                for m in 0..3 {
                    for k in 0..2 {
                        prop_assert_eq!(
                            w_conditional_params(model, m, k, &f, sigma2, &data, &h).unwrap(),
                            w_conditional_params(model, m, k, &f, sigma2, &other, &h).unwrap()
                        );
                    }
                }
                for k in 0..2 {
                    for n in 0..4 {
                        prop_assert_eq!(
                            z_conditional_params(model, k, n, &f, sigma2, &data, &h).unwrap(),
                            z_conditional_params(model, k, n, &f, sigma2, &other, &h).unwrap()
                        );
                    }
                }
            }
            prop_assert_eq!(
                sigma2_conditional_params(&f, &data, &h).unwrap(),
                sigma2_conditional_params(&f, &other, &h).unwrap()
            );
        }
    }
}
