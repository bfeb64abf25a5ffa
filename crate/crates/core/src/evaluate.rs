//! Holdout prediction, factor statistics and the noise-sensitivity protocol.

use ndarray::Array2;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditionals::{HyperParams, ModelKind};
use crate::error::{Error, Result};
use crate::gibbs::{GibbsSampler, ResidualStrategy, RunSchedule, Trace};
use crate::matrix::{masked_mse, ObservedMatrix};
use crate::rng::{derive_seed, ChainRng};

/// Default threshold below which a factor entry counts as sparse.
pub const SPARSITY_THRESHOLD: f64 = 0.1;

const TAG_SPLIT: u64 = 1;
const TAG_CHAIN: u64 = 2;
const TAG_NOISE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub unobserved_fraction: f64,
    pub seed: u64,
}

/// Training data plus the mask of held-out cells.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutSplit {
    pub train: ObservedMatrix,
    pub test_mask: Array2<bool>,
    pub test_count: usize,
}

impl HoldoutSplit {
    /// The held-out cells as an observed matrix; fails when none were held out.
    pub fn test(&self) -> Result<ObservedMatrix> {
        if self.test_count == 0 {
            return Err(Error::EmptyMask);
        }
        self.train.with_mask(self.test_mask.clone())
    }
}

/// Moves `⌊fraction·|observed|⌋` uniformly chosen observed cells to a test mask.
pub fn holdout_split(data: &ObservedMatrix, spec: &SplitSpec) -> Result<HoldoutSplit> {
    let f = spec.unobserved_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Config(format!("unobserved fraction must lie in [0, 1), got {f}")));
    }
    let cells: Vec<(usize, usize)> = data.observed_entries().map(|(r, c, _)| (r, c)).collect();
    let test_count = (f * cells.len() as f64).floor() as usize;
    if test_count >= cells.len() {
        return Err(Error::Config(format!(
            "holding out {test_count} of {} observed entries leaves no training data",
            cells.len()
        )));
    }
    let mut rng = ChainRng::new(spec.seed, TAG_SPLIT);
    let mut train_mask = data.mask().clone();
    let mut test_mask = Array2::from_elem(data.dim(), false);
    for i in index::sample(&mut rng, cells.len(), test_count) {
        let cell = cells[i];
        train_mask[cell] = false;
        test_mask[cell] = true;
    }
    Ok(HoldoutSplit {
        train: data.with_mask(train_mask)?,
        test_mask,
        test_count,
    })
}

/// Masked MSE of the trace's posterior-mean prediction on the test cells.
pub fn evaluate_prediction(trace: &Trace, test: &ObservedMatrix) -> Result<f64> {
    masked_mse(test, &trace.posterior_mean)
}

/// Fraction of entries strictly below `threshold`.
pub fn factor_sparsity(w: &Array2<f64>, threshold: f64) -> f64 {
    w.iter().filter(|&&v| v < threshold).count() as f64 / w.len() as f64
}

pub fn factor_mean(w: &Array2<f64>) -> f64 {
    w.sum() / w.len() as f64
}

fn snapshot_average(trace: &Trace, stat: impl Fn(&Array2<f64>) -> f64) -> f64 {
    if trace.snapshots.is_empty() {
        return stat(trace.final_state.factors.w());
    }
    trace.snapshots.iter().map(|(_, f)| stat(f.w())).sum::<f64>() / trace.snapshots.len() as f64
}

/// [`factor_sparsity`] of `W` averaged over the trace's snapshot window.
pub fn trace_w_sparsity(trace: &Trace, threshold: f64) -> f64 {
    snapshot_average(trace, |w| factor_sparsity(w, threshold))
}

/// [`factor_mean`] of `W` averaged over the trace's snapshot window.
pub fn trace_w_mean(trace: &Trace) -> f64 {
    snapshot_average(trace, factor_mean)
}

/// Adds `N(0, ratio·Var(observed))` noise to every observed cell and clamps
/// the result at zero. Noise is drawn in row-major order from stream 3 of
/// `seed`, so different ratios with the same seed share the same standard
/// normal draws.
pub fn add_noise(data: &ObservedMatrix, noise_to_signal: f64, seed: u64) -> Result<ObservedMatrix> {
    if !(noise_to_signal.is_finite() && noise_to_signal >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise-to-signal ratio must be >= 0, got {noise_to_signal}"
        )));
    }
    if noise_to_signal == 0.0 {
        return Ok(data.clone());
    }
    let sd = (noise_to_signal * data.observed_variance()).sqrt();
    let mut rng = ChainRng::new(seed, TAG_NOISE);
    let mut values = data.values().clone();
    for ((r, c), v) in values.indexed_iter_mut() {
        if data.is_observed(r, c) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + sd * eps).max(0.0);
        }
    }
    ObservedMatrix::new(values, data.mask().clone())
}

/// Median of a nonempty sample; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn variance_to_mse(data_variance: f64, test_mse: f64) -> Result<f64> {
    if !(test_mse > 0.0) {
        return Err(Error::InfinityGuard(format!(
            "test MSE must be positive to form a variance ratio, got {test_mse}"
        )));
    }
    Ok(data_variance / test_mse)
}

/// Seeds for one repeat of an experiment cell.
///
/// The split seed depends on the fraction, the chain and noise seeds only on
/// the repeat, so every model and noise level within a repeat sees the same
/// split and the same chain stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub split: u64,
    pub chain: u64,
    pub noise: u64,
}

impl RepeatSeeds {
    pub fn derive(base: u64, repeat: u64, fraction: f64) -> Self {
        Self {
            split: derive_seed(base, &[TAG_SPLIT, repeat, fraction.to_bits()]),
            chain: derive_seed(base, &[TAG_CHAIN, repeat]),
            noise: derive_seed(base, &[TAG_NOISE, repeat]),
        }
    }
}

/// Sampler settings shared by every cell of an experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub hyper: HyperParams,
    pub schedule: RunSchedule,
    pub strategy: ResidualStrategy,
    pub sparsity_threshold: f64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            schedule: RunSchedule::default(),
            strategy: ResidualStrategy::default(),
            sparsity_threshold: SPARSITY_THRESHOLD,
        }
    }
}

impl ExperimentSettings {
    pub fn run(&self, data: &ObservedMatrix, model: ModelKind, k: usize, seed: u64) -> Result<Trace> {
        GibbsSampler::new(data, model, self.hyper)?
            .with_strategy(self.strategy)
            .run(k, &self.schedule, seed)
    }
}

/// Metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: ModelKind,
    pub k: usize,
    pub unobserved_fraction: f64,
    pub test_mse: f64,
    pub train_mse_final: f64,
    pub w_mean: f64,
    pub w_sparsity: f64,
    pub noise_ratio: Option<f64>,
    pub variance_to_mse: Option<f64>,
}

/// Splits, fits on the training cells and scores the held-out cells.
pub fn holdout_experiment(
    data: &ObservedMatrix,
    model: ModelKind,
    k: usize,
    fraction: f64,
    seeds: &RepeatSeeds,
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    let split = holdout_split(
        data,
        &SplitSpec {
            unobserved_fraction: fraction,
            seed: seeds.split,
        },
    )?;
    let test = split.test()?;
    let trace = settings.run(&split.train, model, k, seeds.chain)?;
    Ok(ExperimentReport {
        model,
        k,
        unobserved_fraction: fraction,
        test_mse: evaluate_prediction(&trace, &test)?,
        train_mse_final: trace.final_train_mse(),
        w_mean: trace_w_mean(&trace),
        w_sparsity: trace_w_sparsity(&trace, settings.sparsity_threshold),
        noise_ratio: None,
        variance_to_mse: None,
    })
}

/// Adds noise at `ratio`, then runs [`holdout_experiment`] on the noisy data.
/// The variance ratio uses the variance of the clean observed data.
pub fn noise_experiment(
    data: &ObservedMatrix,
    model: ModelKind,
    k: usize,
    fraction: f64,
    ratio: f64,
    seeds: &RepeatSeeds,
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    let noisy = add_noise(data, ratio, seeds.noise)?;
    let mut report = holdout_experiment(&noisy, model, k, fraction, seeds, settings)?;
    report.noise_ratio = Some(ratio);
    report.variance_to_mse = Some(variance_to_mse(data.observed_variance(), report.test_mse)?);
    Ok(report)
}
