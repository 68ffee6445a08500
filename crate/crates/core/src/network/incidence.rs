use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::network::{MeterLayout, NetworkCase};

/// Meters x buses membership: entry (m, n) is 1 iff meter m belongs to the
/// subgroup of bus n. Flow meters belong to both endpoints, bus meters to
/// their bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    buses: usize,
    entries: Vec<u8>,
}

impl IncidenceMatrix {
    /// Build from a layout alone (the attacker's view: meter labels only).
    pub fn from_layout(layout: &MeterLayout) -> Result<Self> {
        let buses = layout.bus_count();
        let mut entries = vec![0u8; layout.len() * buses];
        for (m, meter) in layout.meters.iter().enumerate() {
            for bus in meter.buses().iter() {
                if bus >= buses {
                    return Err(Error::validation(format!("meter {m}"), format!("unknown bus index {bus}")));
                }
                entries[m * buses + bus] = 1;
            }
        }
        Ok(IncidenceMatrix { buses, entries })
    }

    pub fn meter_count(&self) -> usize {
        if self.buses == 0 {
            0
        } else {
            self.entries.len() / self.buses
        }
    }

    pub fn bus_count(&self) -> usize {
        self.buses
    }

    pub fn get(&self, meter: usize, bus: usize) -> u8 {
        self.entries[meter * self.buses + bus]
    }

    pub fn row(&self, meter: usize) -> &[u8] {
        &self.entries[meter * self.buses..(meter + 1) * self.buses]
    }

    pub fn column(&self, bus: usize) -> impl Iterator<Item = u8> + '_ {
        (0..self.meter_count()).map(move |m| self.get(m, bus))
    }
}

/// Incidence of a layout validated against the case it meters.
pub fn build_incidence(case: &NetworkCase, layout: &MeterLayout) -> Result<IncidenceMatrix> {
    layout.validate_against(case)?;
    IncidenceMatrix::from_layout(layout)
}

/// Meters with a nonzero entry in any of the listed bus columns.
pub fn subgraph_meters(inc: &IncidenceMatrix, buses: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
    if let Some(&bad) = buses.iter().find(|&&b| b >= inc.bus_count()) {
        return Err(Error::validation(format!("bus index {bad}"), "not in the incidence matrix"));
    }
    Ok((0..inc.meter_count())
        .filter(|&m| buses.iter().any(|&b| inc.get(m, b) == 1))
        .collect())
}
