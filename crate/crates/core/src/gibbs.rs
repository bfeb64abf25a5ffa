//! Systematic-scan Gibbs sampler.
//!
//! One sweep visits, for each latent dimension `k`, every `w_mk` and then
//! every `z_kn`, and finally redraws `σ²`. Each draw conditions on the most
//! recent value of everything else.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditionals::{
    conditional_from_stats, sigma2_from_sse, w_stats, z_stats, CoordinateStats, HyperParams,
    ModelKind,
};
use crate::distributions::{sample_exponential, sample_inverse_gamma, InvGammaParams};
use crate::error::{Error, Result};
use crate::matrix::{masked_mse, masked_sse, reconstruct, FactorPair, ObservedMatrix};
use crate::rng::ChainRng;

/// Lower bound applied to every `σ²` draw.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// How the per-coordinate residual sums are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualStrategy {
    /// Recompute `Σ_{i≠k} w_mi z_ij` for every coordinate, as written in the
    /// sampling algorithm. O(|observed|·K²) per sweep.
    #[default]
    Direct,
    /// Keep a running residual `A - WZ` and patch it after each draw.
    /// O(|observed|·K) per sweep; rebuilt from scratch at the start of
    /// every sweep so rounding drift cannot accumulate.
    Incremental,
}

/// Iteration schedule of a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSchedule {
    pub iterations: usize,
    pub burn_in: usize,
    pub snapshot_window: usize,
}

impl Default for RunSchedule {
    fn default() -> Self {
        Self {
            iterations: 500,
            burn_in: 300,
            snapshot_window: 20,
        }
    }
}

impl RunSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.snapshot_window > self.iterations {
            return Err(Error::Config(format!(
                "snapshot window ({}) exceeds iterations ({})",
                self.snapshot_window, self.iterations
            )));
        }
        Ok(())
    }
}

/// Current position of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub factors: FactorPair,
    pub sigma2: f64,
    pub iteration: usize,
    pub rng: ChainRng,
}

impl ChainState {
    pub fn rng_seed(&self) -> u64 {
        self.rng.seed()
    }

    pub fn rng_position(&self) -> u128 {
        self.rng.position()
    }
}

/// Per-iteration record of a chain plus its posterior-mean prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub model: ModelKind,
    pub schedule: RunSchedule,
    /// Masked training MSE after each sweep.
    pub train_mse: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `(iteration, factors)` for the last `snapshot_window` iterations.
    pub snapshots: Vec<(usize, FactorPair)>,
    /// Mean of `WZ` over iterations `burn_in + 1 ..= iterations`.
    pub posterior_mean: Array2<f64>,
    pub final_state: ChainState,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.train_mse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_mse.is_empty()
    }

    /// Mean of the post-burn-in `σ²` draws.
    pub fn posterior_sigma2(&self) -> f64 {
        let tail = &self.sigma2[self.schedule.burn_in..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn final_train_mse(&self) -> f64 {
        self.train_mse.last().copied().unwrap_or(f64::NAN)
    }
}

/// A sampler bound to one data matrix and model.
#[derive(Clone, Copy, Debug)]
pub struct GibbsSampler<'a> {
    data: &'a ObservedMatrix,
    model: ModelKind,
    hyper: HyperParams,
    strategy: ResidualStrategy,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(data: &'a ObservedMatrix, model: ModelKind, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            data,
            model,
            hyper,
            strategy: ResidualStrategy::default(),
        })
    }

    pub fn with_strategy(mut self, strategy: ResidualStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn model(&self) -> ModelKind {
        self.model
    }

    /// Draws `W`, `Z` entrywise from their exponential priors (row-major,
    /// `W` first) and then `σ²` from its inverse-gamma prior, all from
    /// stream 0 of `seed`.
    pub fn initialize(&self, k: usize, seed: u64) -> Result<ChainState> {
        self.initialize_stream(k, seed, 0)
    }

    pub fn initialize_stream(&self, k: usize, seed: u64, stream: u64) -> Result<ChainState> {
        if k == 0 {
            return Err(Error::Config("latent dimension K must be >= 1".into()));
        }
        let (m, n) = self.data.dim();
        let mut rng = ChainRng::new(seed, stream);
        let mut w = Array2::zeros((m, k));
        for v in w.iter_mut() {
            *v = sample_exponential(self.hyper.lambda_w, &mut rng)?;
        }
        let mut z = Array2::zeros((k, n));
        for v in z.iter_mut() {
            *v = sample_exponential(self.hyper.lambda_z, &mut rng)?;
        }
        let prior = InvGammaParams::new(self.hyper.alpha_sigma, self.hyper.beta_sigma)?;
        let sigma2 = sample_inverse_gamma(&prior, &mut rng)?.max(SIGMA2_FLOOR);
        Ok(ChainState {
            factors: FactorPair::new(w, z)?,
            sigma2,
            iteration: 0,
            rng,
        })
    }

    fn check_state(&self, state: &ChainState) -> Result<()> {
        if state.factors.output_dim() != self.data.dim() {
            return Err(Error::dims(self.data.dim(), state.factors.output_dim()));
        }
        if !(state.sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {}", state.sigma2)));
        }
        Ok(())
    }

    /// One full Gibbs iteration, in place.
    pub fn sweep(&self, state: &mut ChainState) -> Result<()> {
        self.check_state(state)?;
        match self.strategy {
            ResidualStrategy::Direct => self.sweep_factors_direct(state)?,
            ResidualStrategy::Incremental => self.sweep_factors_incremental(state)?,
        }
        let sse = masked_sse(self.data, &reconstruct(&state.factors))?;
        let post = sigma2_from_sse(self.data.observed_count(), sse, &self.hyper)?;
        state.sigma2 = sample_inverse_gamma(&post, &mut state.rng)?.max(SIGMA2_FLOOR);
        state.iteration += 1;
        Ok(())
    }

    fn sweep_factors_direct(&self, state: &mut ChainState) -> Result<()> {
        let (m_dim, n_dim) = self.data.dim();
        let sigma2 = state.sigma2;
        for k in 0..state.factors.rank() {
            for m in 0..m_dim {
                let stats = w_stats(&state.factors, self.data, m, k);
                let draw = self.draw(&stats, sigma2, self.hyper.lambda_w, &mut state.rng)?;
                state.factors.parts_mut().0[[m, k]] = draw;
            }
            for n in 0..n_dim {
                let stats = z_stats(&state.factors, self.data, k, n);
                let draw = self.draw(&stats, sigma2, self.hyper.lambda_z, &mut state.rng)?;
                state.factors.parts_mut().1[[k, n]] = draw;
            }
        }
        Ok(())
    }

    fn sweep_factors_incremental(&self, state: &mut ChainState) -> Result<()> {
        let (m_dim, n_dim) = self.data.dim();
        let sigma2 = state.sigma2;
        let rank = state.factors.rank();
        let mut residual = reconstruct(&state.factors);
        for ((r, c), v) in residual.indexed_iter_mut() {
            *v = if self.data.is_observed(r, c) {
                self.data.value(r, c) - *v
            } else {
                0.0
            };
        }
        let (w, z) = state.factors.parts_mut();
        for k in 0..rank {
            for m in 0..m_dim {
                let old = w[[m, k]];
                let (mut cross, mut energy) = (0.0, 0.0);
                for n in 0..n_dim {
                    if self.data.is_observed(m, n) {
                        let z_kn = z[[k, n]];
                        cross += z_kn * (residual[[m, n]] + old * z_kn);
                        energy += z_kn * z_kn;
                    }
                }
                let row = w.row(m);
                let stats = CoordinateStats {
                    cross,
                    energy,
                    others_sum: row.sum() - old,
                    is_max: leading_max(row.iter().copied()) == k,
                };
                let new = self.draw(&stats, sigma2, self.hyper.lambda_w, &mut state.rng)?;
                w[[m, k]] = new;
                let delta = new - old;
                if delta != 0.0 {
                    for n in 0..n_dim {
                        if self.data.is_observed(m, n) {
                            residual[[m, n]] -= delta * z[[k, n]];
                        }
                    }
                }
            }
            for n in 0..n_dim {
                let old = z[[k, n]];
                let (mut cross, mut energy) = (0.0, 0.0);
                for m in 0..m_dim {
                    if self.data.is_observed(m, n) {
                        let w_mk = w[[m, k]];
                        cross += w_mk * (residual[[m, n]] + old * w_mk);
                        energy += w_mk * w_mk;
                    }
                }
                let col = z.column(n);
                let stats = CoordinateStats {
                    cross,
                    energy,
                    others_sum: col.sum() - old,
                    is_max: leading_max(col.iter().copied()) == k,
                };
                let new = self.draw(&stats, sigma2, self.hyper.lambda_z, &mut state.rng)?;
                z[[k, n]] = new;
                let delta = new - old;
                if delta != 0.0 {
                    for m in 0..m_dim {
                        if self.data.is_observed(m, n) {
                            residual[[m, n]] -= delta * w[[m, k]];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn draw(&self, stats: &CoordinateStats, sigma2: f64, lambda: f64, rng: &mut ChainRng) -> Result<f64> {
        conditional_from_stats(self.model, stats, sigma2, lambda)?.sample(rng)
    }

    /// Initializes and runs a full chain on stream 0 of `seed`.
    pub fn run(&self, k: usize, schedule: &RunSchedule, seed: u64) -> Result<Trace> {
        schedule.validate()?;
        let state = self.initialize(k, seed)?;
        self.run_from(state, schedule)
    }

    /// Runs `schedule.iterations` sweeps starting from `state`.
    pub fn run_from(&self, mut state: ChainState, schedule: &RunSchedule) -> Result<Trace> {
        schedule.validate()?;
        let total = schedule.iterations;
        let mut train_mse = Vec::with_capacity(total);
        let mut sigma2 = Vec::with_capacity(total);
        let mut snapshots = Vec::with_capacity(schedule.snapshot_window);
        let mut pred_sum = Array2::<f64>::zeros(self.data.dim());
        for t in 1..=total {
            self.sweep(&mut state)?;
            let pred = reconstruct(&state.factors);
            train_mse.push(masked_mse(self.data, &pred)?);
            sigma2.push(state.sigma2);
            if t > schedule.burn_in {
                pred_sum += &pred;
            }
            if t + schedule.snapshot_window > total {
                snapshots.push((t, state.factors.clone()));
            }
        }
        let kept = (total - schedule.burn_in) as f64;
        Ok(Trace {
            model: self.model,
            schedule: *schedule,
            train_mse,
            sigma2,
            snapshots,
            posterior_mean: pred_sum / kept,
            final_state: state,
        })
    }
}

fn leading_max(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn initialize(
    data: &ObservedMatrix,
    k: usize,
    model: ModelKind,
    h: &HyperParams,
    seed: u64,
) -> Result<ChainState> {
    GibbsSampler::new(data, model, *h)?.initialize(k, seed)
}

/// Returns the state after one sweep, leaving the input untouched.
pub fn sweep(
    state: &ChainState,
    data: &ObservedMatrix,
    model: ModelKind,
    h: &HyperParams,
) -> Result<ChainState> {
    let mut next = state.clone();
    GibbsSampler::new(data, model, *h)?.sweep(&mut next)?;
    Ok(next)
}

pub fn run_chain(
    data: &ObservedMatrix,
    k: usize,
    model: ModelKind,
    h: &HyperParams,
    schedule: &RunSchedule,
    seed: u64,
) -> Result<Trace> {
    GibbsSampler::new(data, model, *h)?.run(k, schedule, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditionals::{w_conditional_params, z_conditional_params};
    use ndarray::array;

    fn rank_one_5x5() -> ObservedMatrix {
        let u = [1.0, 2.0, 3.0, 4.0, 5.0];
        let v = [2.0, 1.0, 3.0, 0.5, 4.0];
        ObservedMatrix::fully_observed(Array2::from_shape_fn((5, 5), |(i, j)| u[i] * v[j])).unwrap()
    }

    #[test]
    fn initialization_is_deterministic_and_nonnegative() {
        let data = rank_one_5x5();
        let h = HyperParams::default();
        let a = initialize(&data, 3, ModelKind::Gee, &h, 9).unwrap();
        let b = initialize(&data, 3, ModelKind::Gee, &h, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.factors.w().iter().chain(a.factors.z()).all(|&v| v >= 0.0));
        assert!(a.sigma2 > 0.0);
        assert_ne!(a, initialize(&data, 3, ModelKind::Gee, &h, 10).unwrap());
    }

    #[test]
    fn initialization_mean_matches_prior() {
        let data = ObservedMatrix::fully_observed(Array2::ones((100, 100))).unwrap();
        let state = initialize(&data, 50, ModelKind::Gl22, &HyperParams::default(), 1).unwrap();
        let w = state.factors.w();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        // Exponential(0.1): mean 10, sd 10.
        assert!((mean - 10.0).abs() < 3.0 * 10.0 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn zero_rank_is_rejected() {
        let data = rank_one_5x5();
        assert!(initialize(&data, 0, ModelKind::Gee, &HyperParams::default(), 0).is_err());
    }

    #[test]
    fn sweep_preserves_support_and_is_deterministic() {
        let data = rank_one_5x5();
        let h = HyperParams::default();
        for model in ModelKind::ALL {
            let s0 = initialize(&data, 2, model, &h, 4).unwrap();
            let s1 = sweep(&s0, &data, model, &h).unwrap();
            let s1b = sweep(&s0, &data, model, &h).unwrap();
            assert_eq!(s1, s1b);
            assert_eq!(s1.iteration, 1);
            assert!(s1.factors.w().iter().chain(s1.factors.z()).all(|&v| v >= 0.0));
            assert!(s1.sigma2 > 0.0);
            assert!(s1.rng_position() > s0.rng_position());
        }
    }

    #[test]
    fn chain_can_resume_from_recorded_rng_position() {
        let data = rank_one_5x5();
        let h = HyperParams::default();
        let sampler = GibbsSampler::new(&data, ModelKind::Gl2Inf, h).unwrap();
        let mut a = sampler.initialize(2, 5).unwrap();
        sampler.sweep(&mut a).unwrap();
        let mut b = ChainState {
            factors: a.factors.clone(),
            sigma2: a.sigma2,
            iteration: a.iteration,
            rng: ChainRng::at_position(a.rng_seed(), 0, a.rng_position()),
        };
        sampler.sweep(&mut a).unwrap();
        sampler.sweep(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_rank_one_is_recovered() {
        let data = rank_one_5x5();
        let values = data.values();
        let n = values.len() as f64;
        let mean = values.sum() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let schedule = RunSchedule {
            iterations: 200,
            burn_in: 100,
            snapshot_window: 20,
        };
        for model in ModelKind::ALL {
            let trace = run_chain(&data, 1, model, &HyperParams::default(), &schedule, 17).unwrap();
            assert!(
                trace.final_train_mse() < 1e-2 * variance,
                "{model}: mse {} vs variance {variance}",
                trace.final_train_mse()
            );
        }
    }

    #[test]
    fn trace_layout() {
        let data = rank_one_5x5();
        let h = HyperParams::default();
        let schedule = RunSchedule {
            iterations: 30,
            burn_in: 10,
            snapshot_window: 5,
        };
        let trace = run_chain(&data, 2, ModelKind::Gl22, &h, &schedule, 3).unwrap();
        assert_eq!(trace.train_mse.len(), 30);
        assert_eq!(trace.sigma2.len(), 30);
        let iters: Vec<usize> = trace.snapshots.iter().map(|(t, _)| *t).collect();
        assert_eq!(iters, vec![26, 27, 28, 29, 30]);
        assert_eq!(trace.final_state.iteration, 30);
        assert_eq!(trace, run_chain(&data, 2, ModelKind::Gl22, &h, &schedule, 3).unwrap());
    }

    #[test]
    fn single_post_burn_in_sample_is_the_final_reconstruction() {
        let data = rank_one_5x5();
        let schedule = RunSchedule {
            iterations: 8,
            burn_in: 7,
            snapshot_window: 1,
        };
        let trace = run_chain(&data, 2, ModelKind::Gee, &HyperParams::default(), &schedule, 1).unwrap();
        assert_eq!(trace.posterior_mean, reconstruct(&trace.final_state.factors));
    }

    #[test]
    fn invalid_schedules() {
        let bad = [
            RunSchedule { iterations: 10, burn_in: 10, snapshot_window: 1 },
            RunSchedule { iterations: 10, burn_in: 2, snapshot_window: 11 },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))));
        }
        assert_eq!(RunSchedule::default().iterations, 500);
        assert_eq!(RunSchedule::default().burn_in, 300);
    }

    #[test]
    fn incremental_residuals_match_direct_statistics() {
        // After a few sweeps, rebuild the incremental statistics for one
        // coordinate and compare with the direct conditional.
        let data = ObservedMatrix::new(
            Array2::from_shape_fn((6, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64),
            Array2::from_shape_fn((6, 5), |(i, j)| (i + 2 * j) % 4 != 0),
        )
        .unwrap();
        let h = HyperParams::default();
        for model in ModelKind::ALL {
            let sampler = GibbsSampler::new(&data, model, h).unwrap().with_strategy(ResidualStrategy::Incremental);
            let mut state = sampler.initialize(3, 2).unwrap();
            for _ in 0..3 {
                sampler.sweep(&mut state).unwrap();
            }
            let f = &state.factors;
            let pred = reconstruct(f);
            for (m, k) in [(0, 0), (3, 2), (5, 1)] {
                let direct = w_conditional_params(model, m, k, f, state.sigma2, &data, &h).unwrap();
                let mut cross = 0.0;
                let mut energy = 0.0;
                for n in 0..5 {
                    if data.is_observed(m, n) {
                        let z = f.z()[[k, n]];
                        cross += z * (data.value(m, n) - pred[[m, n]] + f.w()[[m, k]] * z);
                        energy += z * z;
                    }
                }
                let row = f.w().row(m);
                let stats = CoordinateStats {
                    cross,
                    energy,
                    others_sum: row.sum() - row[k],
                    is_max: leading_max(row.iter().copied()) == k,
                };
                let inc = conditional_from_stats(model, &stats, state.sigma2, h.lambda_w).unwrap();
                let (a, b) = (direct.trunc_normal().unwrap(), inc.trunc_normal().unwrap());
                assert!((a.parent_mean() - b.parent_mean()).abs() < 1e-9 * (1.0 + a.parent_mean().abs()));
                assert!((a.parent_var() - b.parent_var()).abs() < 1e-12 * (1.0 + a.parent_var()));
            }
            let _ = z_conditional_params(model, 0, 0, f, state.sigma2, &data, &h).unwrap();
        }
    }

    #[test]
    fn incremental_strategy_also_recovers_rank_one() {
        let data = rank_one_5x5();
        let sampler = GibbsSampler::new(&data, ModelKind::Gl22, HyperParams::default())
            .unwrap()
            .with_strategy(ResidualStrategy::Incremental);
        let schedule = RunSchedule { iterations: 200, burn_in: 100, snapshot_window: 1 };
        let trace = sampler.run(1, &schedule, 17).unwrap();
        assert!(trace.final_train_mse() < 1.0, "{}", trace.final_train_mse());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = rank_one_5x5();
        let other = ObservedMatrix::fully_observed(array![[1.0, 2.0]]).unwrap();
        let state = initialize(&other, 1, ModelKind::Gee, &HyperParams::default(), 0).unwrap();
        assert!(sweep(&state, &data, ModelKind::Gee, &HyperParams::default()).is_err());
    }
}
