use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::{MeterKind, MeterLayout};
use crate::powerflow::MeasurementSet;

/// Column-aligned per-bus injection and voltage samples, buses x snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Meter standard deviations in the same shape.
    pub sigma_p: DMatrix<f64>,
    pub sigma_q: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub t: Vec<f64>,
    /// External bus ids in row order.
    pub bus_ids: Vec<u32>,
}

struct BusMeters {
    p: usize,
    q: usize,
    v: usize,
}

fn bus_meters(layout: &MeterLayout) -> Result<Vec<BusMeters>> {
    (0..layout.bus_count())
        .map(|bus| {
            let find = |kind: MeterKind| {
                layout.position(kind).ok_or_else(|| {
                    Error::validation(
                        format!("bus {}", layout.bus_ids[bus]),
                        "layout lacks the injection and voltage meters topology learning needs",
                    )
                })
            };
            Ok(BusMeters {
                p: find(MeterKind::InjectionP(bus))?,
                q: find(MeterKind::InjectionQ(bus))?,
                v: find(MeterKind::Voltage(bus))?,
            })
        })
        .collect()
}

impl SampleBuffer {
    pub fn from_measurements(layout: &MeterLayout, sets: &[MeasurementSet]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::validation("sample buffer", "no snapshots"));
        }
        let meters = bus_meters(layout)?;
        let (n, t) = (layout.bus_count(), sets.len());
        for w in sets.windows(2) {
            if w[1].t < w[0].t {
                return Err(Error::validation("sample buffer", "timestamps are not monotone"));
            }
        }
        if let Some(bad) = sets.iter().find(|s| s.len() != layout.len()) {
            return Err(Error::Dimension {
                expected: layout.len(),
                actual: bad.len(),
            });
        }
        let take = |pick: fn(&BusMeters) -> usize, sigma: bool| {
            DMatrix::from_fn(n, t, |bus, k| {
                let m = pick(&meters[bus]);
                if sigma {
                    sets[k].sigma[m]
                } else {
                    sets[k].z[m]
                }
            })
        };
        Ok(SampleBuffer {
            p: take(|m| m.p, false),
            q: take(|m| m.q, false),
            v: take(|m| m.v, false),
            sigma_p: take(|m| m.p, true),
            sigma_q: take(|m| m.q, true),
            sigma_v: take(|m| m.v, true),
            t: sets.iter().map(|s| s.t).collect(),
            bus_ids: layout.bus_ids.clone(),
        })
    }

    pub fn bus_count(&self) -> usize {
        self.p.nrows()
    }

    pub fn len(&self) -> usize {
        self.p.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.p.ncols() == 0
    }

    /// The most recent `count` snapshots.
    pub fn tail(&self, count: usize) -> SampleBuffer {
        let count = count.min(self.len());
        let start = self.len() - count;
        let cols = |m: &DMatrix<f64>| m.columns(start, count).into_owned();
        SampleBuffer {
            p: cols(&self.p),
            q: cols(&self.q),
            v: cols(&self.v),
            sigma_p: cols(&self.sigma_p),
            sigma_q: cols(&self.sigma_q),
            sigma_v: cols(&self.sigma_v),
            t: self.t[start..].to_vec(),
            bus_ids: self.bus_ids.clone(),
        }
    }
}
