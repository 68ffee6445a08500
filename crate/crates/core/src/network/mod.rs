//! Grid case data: parsing, admittance assembly, meter placement and
//! meter-to-bus incidence.

mod admittance;
mod case;
mod incidence;
mod meters;

pub use admittance::{build_admittance, AdmittanceView};
pub use case::{parse_case, Branch, Bus, BusKind, NetworkCase};
pub use incidence::{build_incidence, subgraph_meters, IncidenceMatrix};
pub use meters::{BusPair, MeterKind, MeterLabel, MeterLayout};
