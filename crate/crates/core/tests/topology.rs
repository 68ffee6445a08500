mod common;

use std::collections::BTreeSet;

use common::*;
use gridsnoop::network::build_admittance;
use gridsnoop::topology::*;
use gridsnoop::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

fn exact_linear_buffer(n: usize, seed: u64) -> (SampleBuffer, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = 2 * n;
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0));
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-20.0..20.0));
    let v = DMatrix::from_fn(n, t, |_, _| rng.random_range(0.9..1.1));
    let p = (&g * &v).component_mul(&v);
    let q = -(&b * &v).component_mul(&v);
    let ones = DMatrix::from_element(n, t, 0.01);
    let buf = SampleBuffer {
        p,
        q,
        v,
        sigma_p: ones.clone(),
        sigma_q: ones.clone(),
        sigma_v: ones,
        t: (0..t).map(|k| k as f64).collect(),
        bus_ids: (1..=n as u32).collect(),
    };
    (buf, g, b)
}

#[test]
fn coarse_regression_recovers_exact_linear_data() {
    for seed in 0..3 {
        let (buf, g, b) = exact_linear_buffer(14, seed);
        let est = coarse_identify(
            &buf,
            &CoarseConfig {
                ridge: Ridge::Absolute(0.0),
                center: false,
            },
        )
        .unwrap();
        assert!((&est.g - &g).amax() < 1e-8, "{}", (&est.g - &g).amax());
        assert!((&est.b - &b).amax() < 1e-8);
        assert!(est.condition >= 1.0);
    }
}

#[test]
fn coarse_regression_needs_enough_samples() {
    let (mut buf, ..) = exact_linear_buffer(6, 1);
    buf = buf.tail(5);
    let err = coarse_identify(
        &buf,
        &CoarseConfig {
            ridge: Ridge::Absolute(0.0),
            center: false,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Singular { .. }), "{err}");
    assert!(err.to_string().contains("ridge > 0"));
    let ridged = CoarseConfig {
        ridge: Ridge::Absolute(-1.0),
        center: false,
    };
    assert!(coarse_identify(&buf, &ridged).unwrap_err().is_validation());
}

#[test]
fn coarse_two_bus_susceptance_under_noise() {
    let case = two_bus();
    let buf = buffer(&case, 7, 0.01, 200);
    let est = coarse_identify(&buf, &CoarseConfig::default()).unwrap();
    let b12 = 0.5 * (est.b[(0, 1)] + est.b[(1, 0)]);
    // Off-diagonal of B is -b = 15.
    assert!(b12 > 0.0, "{b12}");
    assert!((b12 - 15.0).abs() < 0.3 * 15.0, "{b12}");
}

#[test]
fn pruning_exact_admittance_yields_true_branches() {
    let case = ieee14();
    let y = build_admittance(&case);
    let coarse = CoarseEstimate {
        g: y.g,
        b: y.b,
        condition: 1.0,
    };
    let branches = prune_incidence(&coarse, 0.05).unwrap();
    let found: BTreeSet<_> = branches.iter().map(|b| (b.from, b.to)).collect();
    let truth: BTreeSet<_> = true_branches(&case).iter().map(|b| (b.from, b.to)).collect();
    assert_eq!(found, truth);
    for b in &branches {
        let t = case.branches.iter().find(|t| t.from == b.from && t.to == b.to).unwrap();
        assert!((b.g - t.g).abs() < 1e-12 && (b.b - t.b).abs() < 1e-12);
    }
    let err = prune_incidence(&coarse, 0.999).unwrap_err();
    assert!(matches!(err, Error::Disconnected { .. }), "{err}");
    assert!(err.to_string().contains("lower the pruning threshold"));
    assert!(prune_incidence(&coarse, 1.0).unwrap_err().is_validation());
}

#[test]
fn pruning_two_bus_bookkeeping() {
    let y = build_admittance(&two_bus());
    let branches = prune_incidence(
        &CoarseEstimate {
            g: y.g,
            b: y.b,
            condition: 1.0,
        },
        0.5,
    )
    .unwrap();
    assert_eq!(branches.len(), 1);
    assert!((branches[0].g - 5.0).abs() < 1e-9 && (branches[0].b + 15.0).abs() < 1e-9, "{:?}", branches[0]);
}

#[test]
fn exact_start_is_a_fixed_point() {
    let case = ieee14();
    let buf = buffer(&case, 2, 0.0, 100);
    let model = fine_identify(&true_branches(&case), &buf, &FineConfig::default()).unwrap();
    assert!(model.iterations <= 2, "{} iterations", model.iterations);
    assert!(model.mismatch < 1e-8, "{}", model.mismatch);
    assert_eq!(model.theta.len(), 100);
    assert!(model.theta.iter().all(|th| th[0] == 0.0));
}

#[test]
fn perturbed_true_incidence_converges() {
    let case = ieee14();
    let buf = buffer(&case, 3, 0.0, 720);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let start: Vec<LearnedBranch> = true_branches(&case)
        .into_iter()
        .map(|b| LearnedBranch {
            g: b.g * (1.0 + rng.random_range(-0.2..0.2)),
            b: b.b * (1.0 + rng.random_range(-0.2..0.2)),
            ..b
        })
        .collect();
    let model = fine_identify(&start, &buf, &FineConfig::default()).unwrap();
    let err = parameter_error(&model, &case);
    assert!(err < 0.01, "max relative error {err}");
    for w in model.history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "history {:?}", model.history);
    }
}

#[test]
fn two_bus_fine_stage_under_noise() {
    let case = two_bus();
    let cfg = TopologyConfig {
        candidates: Candidates::Pruned(0.05),
        start: Start::Coarse,
        ..TopologyConfig::default()
    };
    let errors: Vec<f64> = (0..20)
        .map(|seed| {
            let model = learn_topology(&buffer(&case, seed, 0.01, 200), &cfg).unwrap();
            (model.branch(0, 1).unwrap().b + 15.0).abs() / 15.0
        })
        .collect();
    assert!(median(errors.clone()) < 0.05, "{errors:?}");
}

#[test]
fn fine_stage_rejects_bad_input() {
    let case = ieee14();
    let buf = buffer(&case, 1, 0.0, 10);
    assert!(fine_identify(&[], &buf, &FineConfig::default()).unwrap_err().is_validation());
    let cfg = FineConfig {
        reference: 14,
        ..FineConfig::default()
    };
    assert!(fine_identify(&true_branches(&case), &buf, &cfg).unwrap_err().is_validation());
}

#[test]
fn stage_errors_are_tagged() {
    let case = ieee14();
    let buf = buffer(&case, 1, 0.0, 10);
    let err = learn_topology(&buf, &TopologyConfig::default()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("at least 200"), "{err}");
    let cfg = TopologyConfig {
        min_samples: 1,
        coarse: CoarseConfig {
            ridge: Ridge::Absolute(0.0),
            center: false,
        },
        ..TopologyConfig::default()
    };
    let err = learn_topology(&buf, &cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "coarse regression", .. }), "{err}");
    assert!(err.to_string().starts_with("coarse regression: "));
}

#[test]
fn pipeline_on_noiseless_data_finds_the_grid() {
    let case = ieee14();
    let buf = buffer(&case, 5, 0.0, 400);
    let model = learn_topology(&buf, &TopologyConfig::default()).unwrap();
    let truth: BTreeSet<_> = true_branches(&case).iter().map(|b| (b.from, b.to)).collect();
    assert_eq!(model.incidence(), truth);
    assert!(model.branches.iter().all(|b| b.g >= 0.0));
    // With no shunts or taps the implied nodal B is the operator's B.
    let (_, b) = model.branch_model().nodal_matrices();
    let y = build_admittance(&case);
    assert!((&b - &y.b).amax() < 1e-3 * y.b.amax(), "{}", (&b - &y.b).amax());
    assert_eq!(model.samples, 400);
}

#[test]
fn warm_refit_keeps_the_structure() {
    let case = ieee14();
    let buf = buffer(&case, 6, 0.0, 300);
    let mut previous = true_model(&case);
    for b in &mut previous.branches {
        b.b *= 1.1;
    }
    let model = refine_topology(&previous, &buf, &TopologyConfig::default()).unwrap();
    assert_eq!(model.incidence(), previous.incidence());
    assert!(parameter_error(&model, &case) < 0.01);
    let short = buf.tail(20);
    assert!(refine_topology(&previous, &short, &TopologyConfig::default()).unwrap_err().is_validation());
}

#[test]
fn identification_blocks_check_their_input() {
    let lines = [gridsnoop::Line::series(0, 1, 5.0, -15.0)];
    let ok = identification_blocks(&lines, 0, &[0.1, -0.1], &[0.0, 0.0], &[0.0, 0.02], &[1.0, 1.0]).unwrap();
    assert_eq!((ok.1.nrows(), ok.1.ncols(), ok.2.ncols()), (4, 2, 1));
    assert!(identification_blocks(&lines, 2, &[0.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2]).is_err());
    let far = [gridsnoop::Line::series(0, 3, 5.0, -15.0)];
    assert!(identification_blocks(&far, 0, &[0.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2]).is_err());
}

#[test]
fn learned_model_text_round_trip() {
    let case = ieee14();
    let buf = buffer(&case, 2, 0.0, 30);
    let model = fine_identify(&true_branches(&case), &buf, &FineConfig::default()).unwrap();
    let text = model.to_text();
    assert!(text.contains("\n1 2 "));
    let back = LearnedModel::from_text(&text).unwrap();
    assert_eq!(back.branches, model.branches);
    assert_eq!(back.bus_ids, model.bus_ids);
    assert_eq!((back.samples, back.iterations, back.reference), (model.samples, model.iterations, model.reference));
    assert_eq!(back.mismatch, model.mismatch);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    model.save(&path).unwrap();
    assert_eq!(LearnedModel::load(&path).unwrap().branches, model.branches);
    let err = LearnedModel::from_text("buses 1 2\nreference 1\n1 3 0.1 -1\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert!(LearnedModel::from_text("1 2 0.1 -1\n").unwrap_err().is_validation());
}
