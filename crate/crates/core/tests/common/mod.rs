#![allow(dead_code)]

use gridsnoop::network::parse_case;
use gridsnoop::powerflow::{LoadProfileConfig, NoiseModel, Simulator, Snapshot};
use gridsnoop::topology::{LearnedBranch, LearnedModel, SampleBuffer};
use gridsnoop::{MeasurementSet, MeterLayout, NetworkCase};

pub fn ieee14() -> NetworkCase {
    NetworkCase::ieee14().series_equivalent()
}

pub fn two_bus() -> NetworkCase {
    // r + jx = 1 / (5 - 15j)
    parse_case("[buses]\n1 slack 0 0 0 1\n2 pq 0.5 0.2\n[branches]\n1 2 0.02 0.06 0 1\n").unwrap()
}

pub fn snapshots(case: &NetworkCase, seed: u64, noise: f64, count: usize) -> (MeterLayout, Vec<Snapshot>) {
    let layout = MeterLayout::full(case);
    let profile = LoadProfileConfig {
        seed,
        ..Default::default()
    };
    let sim = Simulator::new(case.clone(), layout.clone(), profile, NoiseModel::new(noise)).unwrap();
    (layout, sim.run(count).unwrap())
}

pub fn sets(snaps: &[Snapshot]) -> Vec<MeasurementSet> {
    snaps.iter().map(|s| s.measurements.clone()).collect()
}

pub fn buffer(case: &NetworkCase, seed: u64, noise: f64, count: usize) -> SampleBuffer {
    let (layout, snaps) = snapshots(case, seed, noise, count);
    SampleBuffer::from_measurements(&layout, &sets(&snaps)).unwrap()
}

pub fn true_branches(case: &NetworkCase) -> Vec<LearnedBranch> {
    case.branches
        .iter()
        .map(|b| LearnedBranch {
            from: b.from.min(b.to),
            to: b.from.max(b.to),
            g: b.g,
            b: b.b,
        })
        .collect()
}

pub fn true_model(case: &NetworkCase) -> LearnedModel {
    LearnedModel {
        bus_ids: case.bus_ids(),
        reference: case.slack,
        branches: true_branches(case),
        theta: Vec::new(),
        mismatch: 0.0,
        history: Vec::new(),
        iterations: 0,
        samples: 0,
    }
}

/// Relative error of `x` against `truth`; a zero truth (lossless
/// transformer) is measured against the branch admittance magnitude.
fn relative(x: f64, truth: f64, other: f64) -> f64 {
    let scale = if truth != 0.0 { truth.abs() } else { truth.hypot(other) };
    (x - truth).abs() / scale
}

/// Largest relative error of learned `g` and `b` over the true branches;
/// infinite when a true branch is missing.
pub fn parameter_error(model: &LearnedModel, case: &NetworkCase) -> f64 {
    true_branches(case)
        .iter()
        .map(|t| match model.branch(t.from, t.to) {
            Some(l) => relative(l.g, t.g, t.b).max(relative(l.b, t.b, t.g)),
            None => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
