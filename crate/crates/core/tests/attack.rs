mod common;

use std::collections::BTreeSet;

use common::*;
use gridsnoop::attack::*;
use gridsnoop::estimation::*;
use gridsnoop::network::{build_incidence, subgraph_meters, MeterKind};
use gridsnoop::{MeasurementSet, MeterLayout};

fn clean_snapshot(seed: u64, noise: f64) -> (MeterLayout, MeasurementSet) {
    let (layout, snaps) = snapshots(&ieee14(), seed, noise, 1);
    (layout, snaps[0].measurements.clone())
}

fn bus1_bias(value: f64) -> StateBias {
    let mut c = StateBias::zero(14);
    c.theta[0] = value;
    c
}

#[test]
fn zero_bias_returns_the_clean_residual() {
    let (layout, z) = clean_snapshot(1, 0.01);
    let model = true_model(&ieee14());
    let cfg = EstimatorConfig::default();
    let attack = craft_attack(&model, &layout, &z, &StateBias::zero(14), &cfg).unwrap();
    let est = estimate_state(&z, &model.branch_model(), &layout, &cfg).unwrap();
    assert!(attack.targets.is_empty() && attack.region.is_empty());
    assert_eq!(attack.z_a, z);
    assert!((attack.pseudo_residual - est.weighted_residual).abs() < 1e-9 * est.weighted_residual);
}

#[test]
fn bus1_bias_rewrites_only_its_neighbourhood() {
    let case = ieee14();
    let (layout, z) = clean_snapshot(2, 0.0);
    let model = true_model(&case);
    let attack = craft_attack(&model, &layout, &z, &bus1_bias(-0.02), &EstimatorConfig::default()).unwrap();
    assert_eq!(attack.targets, BTreeSet::from([0]));
    assert_eq!(attack.region, BTreeSet::from([0, 1, 4]));
    let changed: BTreeSet<usize> = (0..layout.len()).filter(|&m| attack.z_a.z[m].to_bits() != z.z[m].to_bits()).collect();
    let allowed = subgraph_meters(&build_incidence(&case, &layout).unwrap(), &attack.region).unwrap();
    assert!(changed.is_subset(&allowed), "{:?}", changed.difference(&allowed).collect::<Vec<_>>());
    for kind in [
        MeterKind::FlowP { from: 0, to: 1 },
        MeterKind::FlowP { from: 0, to: 4 },
        MeterKind::FlowQ { from: 0, to: 1 },
        MeterKind::InjectionP(0),
    ] {
        assert!(changed.contains(&layout.position(kind).unwrap()), "{kind:?}");
    }
    // Flows that do not touch bus 1 are refitted but keep their values.
    let m23 = layout.position(MeterKind::FlowP { from: 1, to: 2 }).unwrap();
    assert!((attack.z_a.z[m23] - z.z[m23]).abs() < 1e-9);
    // A consistent state shift is invisible to the operator.
    let operator = estimate_state(&attack.z_a, &case.branch_model(), &layout, &EstimatorConfig::default()).unwrap();
    assert!(operator.weighted_residual < 1e-6, "{}", operator.weighted_residual);
    assert!((operator.state.theta[0]).abs() < 1e-9, "slack stays the reference");
}

#[test]
fn incidence_only_mask_leaves_neighbours_inconsistent() {
    // Rewriting just the meters touching bus 1 leaves the injections at
    // buses 2 and 5 on their clean values while their flows to bus 1 move.
    let case = ieee14();
    let (layout, z) = clean_snapshot(2, 0.0);
    let branches = case.branch_model();
    let est = estimate_state(&z, &branches, &layout, &EstimatorConfig::default()).unwrap();
    let mut shifted = est.state.clone();
    shifted.theta[0] -= 0.02;
    let attacked = branches.measure(&layout, &shifted);
    let inc = build_incidence(&case, &layout).unwrap();
    let mut z_a = z.clone();
    for m in subgraph_meters(&inc, &BTreeSet::from([0])).unwrap() {
        z_a.z[m] = attacked[m];
    }
    let operator = estimate_state(&z_a, &branches, &layout, &EstimatorConfig::default()).unwrap();
    let tau = alarm_threshold(0.99, degrees_of_freedom(layout.len(), 14)).unwrap();
    assert!(operator.weighted_residual > tau, "{} vs {tau}", operator.weighted_residual);
}

#[test]
fn full_graph_attack_has_zero_pseudo_residual() {
    let (layout, z) = clean_snapshot(3, 0.01);
    let model = true_model(&ieee14());
    let mut c = StateBias::zero(14);
    for (k, t) in c.theta.iter_mut().enumerate().skip(1) {
        *t = 0.001 * k as f64;
    }
    c.v[0] = 0.001;
    let attack = craft_attack(&model, &layout, &z, &c, &EstimatorConfig::default()).unwrap();
    assert_eq!(attack.region.len(), 14);
    assert_eq!(attack.pseudo_residual, 0.0);
}

#[test]
fn masked_pseudo_residual_matches_recomputation() {
    let (layout, z) = clean_snapshot(4, 0.0);
    let model = true_model(&ieee14());
    let branches = model.branch_model();
    let est = estimate_state(&z, &branches, &layout, &EstimatorConfig::default()).unwrap();
    let mut c = StateBias::zero(14);
    c.theta[8] = 0.03;
    let attack = craft_from_estimate(&branches, &layout, &z, &est, &c).unwrap();
    let mut shifted = est.state.clone();
    shifted.theta[8] += 0.03;
    let predicted = branches.measure(&layout, &shifted);
    let mut sum = 0.0;
    for m in 0..layout.len() {
        let d = attack.z_a.z[m] - predicted[m];
        sum += d * d / (z.sigma[m] * z.sigma[m]);
    }
    assert!((attack.pseudo_residual - sum.sqrt()).abs() < 1e-12 * (1.0 + sum.sqrt()));
    let direct = pseudo_residual(&attack.z_a, &branches, &layout, &est.state, &c).unwrap();
    assert_eq!(direct, attack.pseudo_residual);
    assert!(attack.pseudo_residual < 1e-6);
}

#[test]
fn pseudo_residual_tracks_the_operator_with_the_true_model() {
    let case = ieee14();
    let model = true_model(&case);
    let cfg = EstimatorConfig::default();
    let gaps: Vec<f64> = (0..100)
        .map(|seed| {
            let (layout, z) = clean_snapshot(100 + seed, 0.01);
            let est = estimate_state(&z, &model.branch_model(), &layout, &cfg).unwrap();
            let c = AttackGoal::default().bias(&model.branch_model(), &est.state, &BTreeSet::from([0]));
            let attack = craft_from_estimate(&model.branch_model(), &layout, &z, &est, &c).unwrap();
            let operator = estimate_state(&attack.z_a, &case.branch_model(), &layout, &cfg).unwrap();
            // The operator refits freely, so it can only do better.
            assert!(operator.weighted_residual <= attack.pseudo_residual * (1.0 + 1e-9));
            (attack.pseudo_residual - operator.weighted_residual) / operator.weighted_residual
        })
        .collect();
    let typical = median(gaps.clone());
    assert!(typical < 0.05, "median relative gap {typical}, all {gaps:?}");
}

#[test]
fn regional_flags() {
    let case = ieee14();
    let model = true_model(&case);
    let cfg = EstimatorConfig::default();
    let (layout, z) = clean_snapshot(5, 0.0);
    let tiny = vec![1e-6; layout.len()];
    assert!(regional_residuals(&z, &model, &layout, &tiny, &cfg).unwrap().is_empty());

    let (layout, noisy) = clean_snapshot(5, 0.01);
    let zero = vec![0.0; layout.len()];
    assert_eq!(regional_residuals(&noisy, &model, &layout, &zero, &cfg).unwrap().len(), layout.len());

    let mut corrupted = model.clone();
    let k = corrupted.branches.iter().position(|b| (b.from, b.to) == (5, 12)).unwrap();
    corrupted.branches[k].b *= 2.0;
    let three_sigma: Vec<f64> = noisy.sigma.iter().map(|s| 3.0 * s).collect();
    let flagged = regional_residuals(&noisy, &corrupted, &layout, &three_sigma, &cfg).unwrap();
    let branch_meters = subgraph_meters(&build_incidence(&case, &layout).unwrap(), &BTreeSet::from([5, 12])).unwrap();
    assert!(!flagged.is_disjoint(&branch_meters), "{flagged:?}");
    assert!(flag_meters(&estimate_state(&noisy, &model.branch_model(), &layout, &cfg).unwrap(), &[1.0]).is_err());
}

#[test]
fn region_selection() {
    let case = ieee14();
    let layout = MeterLayout::full(&case);
    let inc = build_incidence(&case, &layout).unwrap();
    let targets = BTreeSet::from([0, 8]);
    assert_eq!(select_attack_region(&BTreeSet::new(), &inc, &targets).unwrap(), targets);
    let all: BTreeSet<usize> = (0..layout.len()).collect();
    assert!(select_attack_region(&all, &inc, &targets).unwrap().is_empty());
    let bus9: BTreeSet<usize> = [MeterKind::InjectionP(8), MeterKind::InjectionQ(8), MeterKind::Voltage(8)]
        .into_iter()
        .map(|k| layout.position(k).unwrap())
        .collect();
    assert_eq!(select_attack_region(&bus9, &inc, &targets).unwrap(), BTreeSet::from([0]));
}

#[test]
fn bias_modes() {
    let model = true_model(&ieee14()).branch_model();
    let mut state = gridsnoop::SystemState::flat(14);
    state.theta[1] = -0.1;
    state.theta[4] = -0.2;
    let relative = AttackGoal::default().bias(&model, &state, &BTreeSet::from([0]));
    assert!((relative.theta[0] - 0.15 * 0.15).abs() < 1e-15);
    assert_eq!(relative.buses(), BTreeSet::from([0]));
    let absolute = AttackGoal {
        mode: BiasMode::Absolute,
        magnitude: 0.05,
        targets: vec![0, 8],
        ..AttackGoal::default()
    };
    let c = absolute.bias(&model, &state, &BTreeSet::from([8]));
    assert_eq!(c.buses(), BTreeSet::from([8]));
    assert_eq!(c.theta[8], 0.05);
    assert!(craft_from_estimate(
        &model,
        &MeterLayout::full(&ieee14()),
        &clean_snapshot(1, 0.0).1,
        &estimate_state(&clean_snapshot(1, 0.0).1, &model, &MeterLayout::full(&ieee14()), &EstimatorConfig::default()).unwrap(),
        &StateBias::zero(3)
    )
    .is_err());
}

#[test]
fn gate_config_contracts() {
    let gate = GateConfig {
        tau_hat: 10.0,
        margin: 0.8,
        min_samples: 5,
    };
    assert!(gate.passes(8.0) && !gate.passes(8.000001));
    assert!(GateConfig { margin: 0.0, ..gate }.validate().is_err());
    assert!(GateConfig { margin: 1.2, ..gate }.validate().is_err());
    assert!(GateConfig { tau_hat: 0.0, ..gate }.validate().is_err());
    assert!(GateConfig { margin: 1.0, ..gate }.validate().is_ok());
}

#[test]
fn short_stream_means_insufficient_data() {
    let (layout, snaps) = snapshots(&ieee14(), 1, 0.01, 20);
    let log = attack_loop(sets(&snaps).iter(), &layout, &AttackGoal::default(), &LoopConfig::default()).unwrap();
    assert_eq!(log.launches(), 0);
    assert_eq!(log.diagnosis, "insufficient data");
    assert!(log.steps.iter().all(|s| s.phase == Phase::Collect));
    let mut backwards = sets(&snaps);
    backwards.swap(0, 5);
    assert!(attack_loop(backwards.iter(), &layout, &AttackGoal::default(), &LoopConfig::default())
        .unwrap_err()
        .is_validation());
}

#[test]
fn perfect_model_passes_the_first_gate() {
    let case = ieee14();
    let (layout, snaps) = snapshots(&case, 3, 0.01, 260);
    let cfg = LoopConfig::default();
    let mut attacker = Attacker::new(layout.clone(), AttackGoal::default(), cfg.clone()).unwrap();
    attacker.install_model(true_model(&case));
    let steps: Vec<LoopStep> = sets(&snaps).iter().map(|z| attacker.observe(z)).collect();
    let first = steps.iter().find(|s| s.gate.is_some()).unwrap();
    assert_eq!(first.samples_seen, cfg.gate.min_samples);
    assert_eq!(first.gate, Some(true));
    assert!(first.launched.is_some());
    for s in &steps {
        if let Some(a) = &s.launched {
            assert!(a.pseudo_residual <= cfg.gate.margin * s.tau_hat.unwrap());
            assert_eq!(a.z_a.len(), layout.len());
            assert!(a.bias.buses().is_subset(&a.targets));
        }
    }
}

#[test]
fn noise_estimate_recovers_meter_accuracy() {
    let case = ieee14();
    let (layout, snaps) = snapshots(&case, 8, 0.01, 60);
    let zs = sets(&snaps);
    let model = case.branch_model();
    let estimates: Vec<_> = zs
        .iter()
        .map(|z| estimate_state(z, &model, &layout, &EstimatorConfig::default()).unwrap())
        .collect();
    let noise = NoiseEstimate::from_estimates(&estimates, &zs, 14).unwrap();
    assert_eq!(noise.dof, 55);
    // Residual variance is the noise variance scaled by the redundancy.
    assert!((noise.scale - 1.0).abs() < 0.25, "{}", noise.scale);
    let tau = noise.tau_hat(0.99).unwrap();
    assert!((tau / alarm_threshold(0.99, 55).unwrap() - 1.0).abs() < 0.15, "{tau}");
    assert!(NoiseEstimate::from_estimates(&estimates[..1], &zs[..1], 14).is_err());
}

#[test]
fn gate_quality_improves_with_tighter_margins() {
    let case = ieee14();
    let mut model = true_model(&case);
    for b in &mut model.branches {
        b.b *= 1.03;
    }
    let margins = [1.0, 0.9, 0.8, 0.7, 0.6];
    let mut rates = Vec::new();
    for &margin in &margins {
        let (mut launches, mut alarms) = (0, 0);
        for seed in 0..20 {
            let (layout, snaps) = snapshots(&case, 40 + seed, 0.01, 80);
            let cfg = LoopConfig {
                gate: GateConfig {
                    margin,
                    min_samples: 40,
                    ..GateConfig::default()
                },
                ..LoopConfig::default()
            };
            let mut attacker = Attacker::new(layout.clone(), AttackGoal::default(), cfg).unwrap();
            attacker.install_model(model.clone());
            for z in sets(&snaps) {
                if let Some(a) = attacker.observe(&z).launched {
                    launches += 1;
                    let r = estimate_state(&a.z_a, &case.branch_model(), &layout, &EstimatorConfig::default()).unwrap();
                    alarms += (r.weighted_residual > alarm_threshold(0.99, 55).unwrap()) as usize;
                }
            }
        }
        rates.push(if launches > 0 { alarms as f64 / launches as f64 } else { 0.0 });
    }
    for w in rates.windows(2) {
        assert!(w[1] <= w[0], "{rates:?}");
    }
}

#[test]
fn attacker_module_never_sees_the_case() {
    let source = include_str!("../src/attack.rs");
    for forbidden in ["NetworkCase", "network::case", "scenario", "Operator", "powerflow::Simulator", "build_admittance"] {
        assert!(!source.contains(forbidden), "attack module mentions {forbidden}");
    }
    for line in source.lines().filter(|l| l.starts_with("use crate::")) {
        let allowed = ["error", "estimation", "flow", "network::{subgraph_meters, IncidenceMatrix, MeterLayout}", "powerflow::MeasurementSet", "topology"];
        assert!(allowed.iter().any(|a| line.starts_with(&format!("use crate::{a}"))), "{line}");
    }
}
