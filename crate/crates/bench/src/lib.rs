//! Shared fixtures for the criterion benches.

use gridsnoop::powerflow::{LoadProfileConfig, NoiseModel, Simulator, Snapshot};
use gridsnoop::topology::{LearnedBranch, SampleBuffer};
use gridsnoop::{MeterLayout, NetworkCase};

pub struct Fixture {
    pub case: NetworkCase,
    pub layout: MeterLayout,
    pub snapshots: Vec<Snapshot>,
}

impl Fixture {
    /// Series-equivalent IEEE 14-bus with `count` snapshots at `noise`.
    pub fn ieee14(count: usize, noise: f64) -> Self {
        let case = NetworkCase::ieee14().series_equivalent();
        let layout = MeterLayout::full(&case);
        let sim = Simulator::new(case.clone(), layout.clone(), LoadProfileConfig::default(), NoiseModel::new(noise)).expect("valid fixture");
        let snapshots = sim.run(count).expect("power flow converges");
        Fixture { case, layout, snapshots }
    }

    pub fn buffer(&self) -> SampleBuffer {
        let sets: Vec<_> = self.snapshots.iter().map(|s| s.measurements.clone()).collect();
        SampleBuffer::from_measurements(&self.layout, &sets).expect("full layout")
    }

    /// The generating branches, as a learner would report them.
    pub fn true_branches(&self) -> Vec<LearnedBranch> {
        self.case
            .branch_model()
            .lines()
            .iter()
            .map(|l| LearnedBranch {
                from: l.from,
                to: l.to,
                g: l.g,
                b: l.b,
            })
            .collect()
    }
}
