use bnmf::conditionals::{HyperParams, ModelKind};
use bnmf::evaluate::{median, trace_w_mean, ExperimentSettings};
use bnmf::gibbs::{ChainState, GibbsSampler, RunSchedule};
use bnmf::ingest::{synth_gee, SynthSpec, SyntheticData};
use bnmf::matrix::{FactorPair, ObservedMatrix};
use bnmf::rng::{derive_seed, ChainRng};
use ndarray::array;

fn synth(rows: usize, cols: usize, rank: usize, lambda: f64, noise_var: f64, seed: u64) -> SyntheticData {
    synth_gee(&SynthSpec {
        rows,
        cols,
        rank,
        lambda,
        noise_var,
        observed_fraction: 1.0,
        seed,
    })
    .unwrap()
}

#[test]
fn factor_mean_averages_snapshots() {
    let data = ObservedMatrix::fully_observed(array![[1.0]]).unwrap();
    let schedule = RunSchedule { iterations: 4, burn_in: 2, snapshot_window: 2 };
    let mut trace = GibbsSampler::new(&data, ModelKind::Gee, HyperParams::default())
        .unwrap()
        .run(1, &schedule, 3)
        .unwrap();
    trace.snapshots = vec![
        (3, FactorPair::new(array![[0.0]], array![[1.0]]).unwrap()),
        (4, FactorPair::new(array![[2.0]], array![[1.0]]).unwrap()),
    ];
    assert_eq!(trace_w_mean(&trace), 1.0);
}

#[test]
fn truth_is_stationary_for_every_model() {
    let s = synth(20, 20, 3, 0.1, 1.0, 17);
    let schedule = RunSchedule { iterations: 200, burn_in: 100, snapshot_window: 10 };
    for model in ModelKind::ALL {
        let sampler = GibbsSampler::new(&s.data, model, HyperParams::default()).unwrap();
        let state = ChainState {
            factors: s.truth.clone(),
            sigma2: s.true_sigma2,
            iteration: 0,
            rng: ChainRng::new(5, 0),
        };
        let trace = sampler.run_from(state, &schedule).unwrap();
        let s2 = trace.posterior_sigma2();
        assert!((s2 - 1.0).abs() < 0.35, "{model}: posterior sigma2 {s2}");
    }
}

#[test]
fn training_fit_improves_for_every_model() {
    let s = synth(30, 20, 3, 1.0, 0.5, 23);
    let schedule = RunSchedule { iterations: 300, burn_in: 150, snapshot_window: 10 };
    for model in ModelKind::ALL {
        let trace = GibbsSampler::new(&s.data, model, HyperParams::default())
            .unwrap()
            .run(5, &schedule, 41)
            .unwrap();
        let first = median(&trace.train_mse[..50]);
        let last = median(&trace.train_mse[trace.len() - 50..]);
        assert!(last < first, "{model}: first {first} last {last}");
    }
}

#[test]
fn quadratic_penalty_factor_mean_tracks_scale() {
    let settings = ExperimentSettings::default();
    let mut ratio_l1 = Vec::new();
    let mut ratio_l2 = Vec::new();
    for run in 0..5 {
        let data = synth(50, 40, 5, 1.0, 0.5, derive_seed(71, &[run])).data;
        let scaled = data.scaled(100.0).unwrap();
        let seed = derive_seed(72, &[run]);
        let ratio = |model| {
            let a = trace_w_mean(&settings.run(&data, model, 10, seed).unwrap());
            let b = trace_w_mean(&settings.run(&scaled, model, 10, seed).unwrap());
            b / a
        };
        ratio_l1.push(ratio(ModelKind::Gl12));
        ratio_l2.push(ratio(ModelKind::Gl22));
    }
    let (l1, l2) = (median(&ratio_l1), median(&ratio_l2));
    assert!(l1 < 10.0, "GL1 factor mean grew by {l1}");
    assert!((5.0..=20.0).contains(&l2), "GL2 factor mean grew by {l2}");
}
