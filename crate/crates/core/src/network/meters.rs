use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::network::NetworkCase;

/// What a meter reads. Bus references are bus indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeterKind {
    /// Real power flow leaving `from` toward `to`, metered at `from`.
    FlowP { from: usize, to: usize },
    FlowQ { from: usize, to: usize },
    InjectionP(usize),
    InjectionQ(usize),
    Voltage(usize),
}

impl MeterKind {
    pub fn buses(&self) -> BusPair {
        match *self {
            MeterKind::FlowP { from, to } | MeterKind::FlowQ { from, to } => BusPair::Two(from, to),
            MeterKind::InjectionP(b) | MeterKind::InjectionQ(b) | MeterKind::Voltage(b) => BusPair::One(b),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            MeterKind::FlowP { .. } => "pf",
            MeterKind::FlowQ { .. } => "qf",
            MeterKind::InjectionP(_) => "pi",
            MeterKind::InjectionQ(_) => "qi",
            MeterKind::Voltage(_) => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusPair {
    One(usize),
    Two(usize, usize),
}

impl BusPair {
    pub fn contains(&self, bus: usize) -> bool {
        match *self {
            BusPair::One(a) => a == bus,
            BusPair::Two(a, b) => a == bus || b == bus,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        let (a, b) = match *self {
            BusPair::One(a) => (a, None),
            BusPair::Two(a, b) => (a, Some(b)),
        };
        std::iter::once(a).chain(b)
    }
}

/// Ordered meter placement. Carries the public bus labels so that meter
/// names can be printed without access to the case.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterLayout {
    pub bus_ids: Vec<u32>,
    pub meters: Vec<MeterKind>,
}

impl MeterLayout {
    /// P and Q flow meters at the from end of every branch, P and Q injection
    /// meters at every bus, and a voltage magnitude meter at every bus.
    pub fn full(case: &NetworkCase) -> Self {
        let mut meters = Vec::with_capacity(2 * case.branches.len() + 3 * case.bus_count());
        for br in &case.branches {
            meters.push(MeterKind::FlowP { from: br.from, to: br.to });
        }
        for br in &case.branches {
            meters.push(MeterKind::FlowQ { from: br.from, to: br.to });
        }
        for bus in 0..case.bus_count() {
            meters.push(MeterKind::InjectionP(bus));
        }
        for bus in 0..case.bus_count() {
            meters.push(MeterKind::InjectionQ(bus));
        }
        for bus in 0..case.bus_count() {
            meters.push(MeterKind::Voltage(bus));
        }
        MeterLayout {
            bus_ids: case.bus_ids(),
            meters,
        }
    }

    pub fn len(&self) -> usize {
        self.meters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meters.is_empty()
    }

    pub fn bus_count(&self) -> usize {
        self.bus_ids.len()
    }

    /// Position of the meter of the given kind, if present.
    pub fn position(&self, kind: MeterKind) -> Option<usize> {
        self.meters.iter().position(|m| *m == kind)
    }

    pub fn label(&self, meter: usize) -> MeterLabel<'_> {
        MeterLabel { layout: self, meter }
    }

    /// Check bus references against a case: every bus exists and every flow
    /// meter sits on a branch.
    pub fn validate_against(&self, case: &NetworkCase) -> Result<()> {
        if self.bus_ids != case.bus_ids() {
            return Err(Error::validation("meter layout", "bus labels do not match the case"));
        }
        let n = case.bus_count();
        let pairs: BTreeSet<(usize, usize)> = case
            .branches
            .iter()
            .map(|b| (b.from.min(b.to), b.from.max(b.to)))
            .collect();
        for (k, meter) in self.meters.iter().enumerate() {
            if meter.buses().iter().any(|b| b >= n) {
                return Err(Error::validation(format!("meter {k}"), "references an unknown bus"));
            }
            if let BusPair::Two(a, b) = meter.buses() {
                if !pairs.contains(&(a.min(b), a.max(b))) {
                    return Err(Error::validation(format!("meter {k}"), "references an unknown branch"));
                }
            }
        }
        Ok(())
    }
}

pub struct MeterLabel<'a> {
    layout: &'a MeterLayout,
    meter: usize,
}

impl fmt::Display for MeterLabel<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids = &self.layout.bus_ids;
        let kind = self.layout.meters[self.meter];
        match kind {
            MeterKind::FlowP { from, to } | MeterKind::FlowQ { from, to } => {
                write!(f, "{}:{}-{}", kind.tag(), ids[from], ids[to])
            }
            MeterKind::InjectionP(b) | MeterKind::InjectionQ(b) | MeterKind::Voltage(b) => {
                write!(f, "{}:{}", kind.tag(), ids[b])
            }
        }
    }
}
