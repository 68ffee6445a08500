//! Ground-truth operating points and the noisy measurement stream.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{end_flow, BranchModel, Line, SystemState};
use crate::network::{Branch, BusKind, MeterLayout, NetworkCase};

/// Scheduled net injections (generation minus load), per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    /// Base-case schedule straight from the case data.
    pub fn base(case: &NetworkCase) -> Self {
        Injections {
            p: case.buses.iter().map(|b| b.p_gen - b.p_load).collect(),
            q: case.buses.iter().map(|b| -b.q_load).collect(),
        }
    }
}

/// (P_ij, Q_ij) leaving the from end of a branch.
pub fn branch_flow(state: &SystemState, branch: &Branch) -> (f64, f64) {
    let line = Line {
        from: branch.from,
        to: branch.to,
        g: branch.g,
        b: branch.b,
        b_sh: branch.b_sh,
        tap: branch.tap,
    };
    end_flow(
        &line,
        true,
        state.v[branch.from],
        state.v[branch.to],
        state.theta[branch.from] - state.theta[branch.to],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub state: SystemState,
    pub iterations: usize,
    pub mismatch: f64,
}

pub const POWER_FLOW_TOLERANCE: f64 = 1e-10;
const POWER_FLOW_MAX_ITER: usize = 20;

/// Newton-Raphson power flow in polar form. The slack bus holds its voltage
/// setpoint at angle zero, PV buses hold scheduled P and voltage, PQ buses
/// scheduled P and Q.
pub fn solve_power_flow(case: &NetworkCase, sched: &Injections) -> Result<PowerFlowSolution> {
    let n = case.bus_count();
    if sched.p.len() != n || sched.q.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: sched.p.len().min(sched.q.len()),
        });
    }
    if sched.p.iter().chain(&sched.q).any(|v| !v.is_finite()) {
        return Err(Error::validation("injections", "non-finite value"));
    }
    let model = case.branch_model();
    let theta_buses: Vec<usize> = (0..n).filter(|&i| i != case.slack).collect();
    let v_buses: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Pq).collect();
    let nt = theta_buses.len();
    let dim = nt + v_buses.len();

    let mut state = SystemState {
        v: case
            .buses
            .iter()
            .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.v_set })
            .collect(),
        theta: vec![0.0; n],
    };

    let mismatch = |state: &SystemState| -> DVector<f64> {
        let (p, q) = model.injections(state);
        let mut f = DVector::zeros(dim);
        for (k, &i) in theta_buses.iter().enumerate() {
            f[k] = p[i] - sched.p[i];
        }
        for (k, &i) in v_buses.iter().enumerate() {
            f[nt + k] = q[i] - sched.q[i];
        }
        f
    };

    let mut f = mismatch(&state);
    let mut norm = f.amax();
    for iteration in 0..=POWER_FLOW_MAX_ITER {
        if norm < POWER_FLOW_TOLERANCE {
            return Ok(PowerFlowSolution {
                state,
                iterations: iteration,
                mismatch: norm,
            });
        }
        if iteration == POWER_FLOW_MAX_ITER || !norm.is_finite() {
            break;
        }
        let full = model.injection_jacobian(&state);
        let jac = DMatrix::from_fn(dim, dim, |r, c| {
            let row = if r < nt { theta_buses[r] } else { n + v_buses[r - nt] };
            let col = if c < nt { theta_buses[c] } else { n + v_buses[c - nt] };
            full[(row, col)]
        });
        let Some(step) = jac.lu().solve(&(-&f)) else { break };
        for (k, &i) in theta_buses.iter().enumerate() {
            state.theta[i] += step[k];
        }
        for (k, &i) in v_buses.iter().enumerate() {
            state.v[i] += step[nt + k];
        }
        f = mismatch(&state);
        norm = f.amax();
    }
    Err(Error::Divergence {
        iterations: POWER_FLOW_MAX_ITER,
        mismatch: norm,
    })
}

/// Daily load multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DailyShape {
    Flat,
    /// `1 + amplitude * cos(2 pi (t - peak) / 1440)`.
    Sinusoid { amplitude: f64, peak_minute: f64 },
}

impl DailyShape {
    pub fn factor(&self, minutes: f64) -> f64 {
        match *self {
            DailyShape::Flat => 1.0,
            DailyShape::Sinusoid { amplitude, peak_minute } => {
                1.0 + amplitude * (2.0 * PI * (minutes - peak_minute) / 1440.0).cos()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfileConfig {
    pub shape: DailyShape,
    /// Half-width of the uniform per-bus fluctuation, as a fraction of the
    /// shaped load.
    pub fluctuation: f64,
    pub seed: u64,
    /// Minutes between samples.
    pub cadence: u32,
}

impl Default for LoadProfileConfig {
    fn default() -> Self {
        LoadProfileConfig {
            shape: DailyShape::Sinusoid {
                amplitude: 0.2,
                peak_minute: 18.0 * 60.0,
            },
            fluctuation: 0.2,
            seed: 1,
            cadence: 1,
        }
    }
}

impl LoadProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.fluctuation) {
            return Err(Error::validation("load profile", "fluctuation must lie in [0, 0.5]"));
        }
        if self.cadence < 1 {
            return Err(Error::validation("load profile", "cadence must be at least 1 minute"));
        }
        Ok(())
    }
}

/// Deterministic 64-bit mixing of seed components.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const LOAD_STREAM: u64 = 0x10AD;
const NOISE_STREAM: u64 = 0x0015E;

/// Net injections at time `t` (minutes): loads follow the daily shape times a
/// fresh uniform fluctuation per bus; scheduled generation follows the shape.
pub fn generate_loads(case: &NetworkCase, profile: &LoadProfileConfig, t: f64) -> Injections {
    let shape = profile.shape.factor(t);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[profile.seed, LOAD_STREAM, t.to_bits()]));
    let f = profile.fluctuation;
    let mut p = Vec::with_capacity(case.bus_count());
    let mut q = Vec::with_capacity(case.bus_count());
    for bus in &case.buses {
        let (up, uq): (f64, f64) = if f > 0.0 {
            (rng.random_range(-f..=f), rng.random_range(-f..=f))
        } else {
            (0.0, 0.0)
        };
        p.push(bus.p_gen * shape - bus.p_load * shape * (1.0 + up));
        q.push(-bus.q_load * shape * (1.0 + uq));
    }
    Injections { p, q }
}

/// One snapshot of meter readings.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    /// Minutes since scenario start.
    pub t: f64,
    pub z: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 1.0 / (s * s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation as a fraction of the reading.
    pub fraction: f64,
    /// Reading magnitude below which sigma stops shrinking.
    pub floor: f64,
}

impl NoiseModel {
    pub fn new(fraction: f64) -> Self {
        NoiseModel { fraction, floor: 0.01 }
    }

    pub fn sigma(&self, reading: f64) -> f64 {
        self.fraction * reading.abs().max(self.floor)
    }
}

/// z = h(x) + e with independent Gaussian e.
pub fn measure(
    model: &BranchModel,
    layout: &MeterLayout,
    state: &SystemState,
    noise: NoiseModel,
    seed: u64,
    t: f64,
) -> MeasurementSet {
    let exact = model.measure(layout, state);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, NOISE_STREAM, t.to_bits()]));
    // A zero fraction still gets a positive nominal sigma for weighting.
    let nominal = if noise.fraction > 0.0 { noise } else { NoiseModel::new(0.01) };
    let sigma: Vec<f64> = exact.iter().map(|&h| nominal.sigma(h)).collect();
    let z = exact
        .iter()
        .zip(&sigma)
        .map(|(&h, &s)| {
            if noise.fraction > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                h + s * e
            } else {
                h
            }
        })
        .collect();
    MeasurementSet { t, z, sigma }
}

/// A solved operating point together with what the meters reported.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub state: SystemState,
    pub measurements: MeasurementSet,
}

/// Quasi-static grid simulation producing a snapshot every `cadence` minutes.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub case: NetworkCase,
    pub layout: MeterLayout,
    pub profile: LoadProfileConfig,
    pub noise: NoiseModel,
    model: BranchModel,
}

impl Simulator {
    pub fn new(case: NetworkCase, layout: MeterLayout, profile: LoadProfileConfig, noise: NoiseModel) -> Result<Self> {
        profile.validate()?;
        layout.validate_against(&case)?;
        let model = case.branch_model();
        Ok(Simulator {
            case,
            layout,
            profile,
            noise,
            model,
        })
    }

    pub fn model(&self) -> &BranchModel {
        &self.model
    }

    /// Snapshot number `k`, taken at `k * cadence` minutes.
    pub fn snapshot(&self, k: usize) -> Result<Snapshot> {
        let t = (k as f64) * self.profile.cadence as f64;
        let sched = generate_loads(&self.case, &self.profile, t);
        let solution = solve_power_flow(&self.case, &sched)?;
        let measurements = measure(&self.model, &self.layout, &solution.state, self.noise, self.profile.seed, t);
        Ok(Snapshot {
            state: solution.state,
            measurements,
        })
    }

    pub fn run(&self, count: usize) -> Result<Vec<Snapshot>> {
        (0..count).map(|k| self.snapshot(k)).collect()
    }
}

/// Write snapshots as CSV rows `t,meter_id,kind,value,sigma`.
pub fn write_stream<W: Write>(out: W, layout: &MeterLayout, sets: &[MeasurementSet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "meter_id", "kind", "value", "sigma"])?;
    for set in sets {
        for (m, (z, s)) in set.z.iter().zip(&set.sigma).enumerate() {
            w.write_record([
                set.t.to_string(),
                m.to_string(),
                layout.label(m).to_string(),
                z.to_string(),
                s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a stream written by [`write_stream`]. Rows must be grouped by
/// snapshot with meters in layout order.
pub fn read_stream<R: Read>(input: R, layout: &MeterLayout) -> Result<Vec<MeasurementSet>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut sets: Vec<MeasurementSet> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |k: usize| -> Result<f64> {
            record
                .get(k)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad field {k}"),
                })
        };
        let (t, meter, z, s) = (field(0)?, field(1)? as usize, field(3)?, field(4)?);
        let expected = sets.last().map_or(layout.len(), |l| l.len());
        if expected == layout.len() {
            sets.push(MeasurementSet {
                t,
                z: Vec::with_capacity(layout.len()),
                sigma: Vec::with_capacity(layout.len()),
            });
        }
        let set = sets.last_mut().expect("pushed above");
        if meter != set.len() || set.t != t {
            return Err(Error::Parse {
                line,
                message: format!("expected meter {} of snapshot t={}", set.len(), set.t),
            });
        }
        set.z.push(z);
        set.sigma.push(s);
    }
    if sets.last().is_some_and(|s| s.len() != layout.len()) {
        return Err(Error::Parse {
            line: 0,
            message: "truncated final snapshot".into(),
        });
    }
    Ok(sets)
}
