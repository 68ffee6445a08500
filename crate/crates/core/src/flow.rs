//! AC branch-flow equations shared by the simulator, the operator's estimator
//! and the attacker's learned model.
//!
//! For the end `k` of a line toward the opposite end `o`, with own scale `a`
//! (1/t^2 at a tapped from end, else 1) and mutual scale `m` (1/t):
//!
//! ```text
//! P = a Vk^2 g - m Vk Vo (g cos + b sin)
//! Q = -a Vk^2 (b + b_sh) + m Vk Vo (b cos - g sin)
//! ```
//!
//! where the angle is `theta_k - theta_o`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::network::{MeterKind, MeterLayout};

/// Per-bus voltage magnitude and angle (radians). States produced by the
/// solver and the estimator keep the reference angle at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl SystemState {
    pub fn flat(n: usize) -> Self {
        SystemState {
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn bus_count(&self) -> usize {
        self.v.len()
    }
}

/// Electrical branch used by the flow equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
    pub b_sh: f64,
    pub tap: f64,
}

impl Line {
    pub fn series(from: usize, to: usize, g: f64, b: f64) -> Self {
        Line {
            from,
            to,
            g,
            b,
            b_sh: 0.0,
            tap: 1.0,
        }
    }

    fn scales(&self, at_from: bool) -> (f64, f64) {
        let m = 1.0 / self.tap;
        if at_from {
            (m * m, m)
        } else {
            (1.0, m)
        }
    }
}

/// Partial derivatives of one end flow with respect to
/// `[theta_k, theta_o, V_k, V_o, g, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EndPartials {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 6],
    pub dq: [f64; 6],
}

/// Flow at one end of a line.
#[allow(clippy::too_many_arguments)]
pub fn end_flow(line: &Line, at_from: bool, vk: f64, vo: f64, theta_ko: f64) -> (f64, f64) {
    let (a, m) = line.scales(at_from);
    let (s, c) = theta_ko.sin_cos();
    let mutual = m * vk * vo;
    let p = a * vk * vk * line.g - mutual * (line.g * c + line.b * s);
    let q = -a * vk * vk * (line.b + line.b_sh) + mutual * (line.b * c - line.g * s);
    (p, q)
}

pub fn end_partials(line: &Line, at_from: bool, vk: f64, vo: f64, theta_ko: f64) -> EndPartials {
    let (a, m) = line.scales(at_from);
    let (s, c) = theta_ko.sin_cos();
    let (g, b) = (line.g, line.b);
    let mutual = m * vk * vo;
    let p_dir = g * c + b * s;
    let q_dir = b * c - g * s;
    let p = a * vk * vk * g - mutual * p_dir;
    let q = -a * vk * vk * (b + line.b_sh) + mutual * q_dir;
    let dp_dtheta = mutual * (g * s - b * c);
    let dq_dtheta = -mutual * (b * s + g * c);
    EndPartials {
        p,
        q,
        dp: [
            dp_dtheta,
            -dp_dtheta,
            2.0 * a * vk * g - m * vo * p_dir,
            -m * vk * p_dir,
            a * vk * vk - mutual * c,
            -mutual * s,
        ],
        dq: [
            dq_dtheta,
            -dq_dtheta,
            -2.0 * a * vk * (b + line.b_sh) + m * vo * q_dir,
            m * vk * q_dir,
            -mutual * s,
            -a * vk * vk + mutual * c,
        ],
    }
}

/// Column layout of the estimation state vector: angles of every
/// non-reference bus followed by all voltage magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateIndex {
    pub buses: usize,
    pub reference: usize,
}

impl StateIndex {
    pub fn len(&self) -> usize {
        2 * self.buses - 1
    }

    pub fn is_empty(&self) -> bool {
        self.buses == 0
    }

    pub fn theta(&self, bus: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match bus.cmp(&self.reference) {
            Less => Some(bus),
            Equal => None,
            Greater => Some(bus - 1),
        }
    }

    pub fn v(&self, bus: usize) -> usize {
        self.buses - 1 + bus
    }

    pub fn to_vector(&self, state: &SystemState) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        for bus in 0..self.buses {
            if let Some(k) = self.theta(bus) {
                x[k] = state.theta[bus] - state.theta[self.reference];
            }
            x[self.v(bus)] = state.v[bus];
        }
        x
    }

    pub fn to_state(&self, x: &DVector<f64>) -> SystemState {
        let mut state = SystemState::flat(self.buses);
        for bus in 0..self.buses {
            if let Some(k) = self.theta(bus) {
                state.theta[bus] = x[k];
            }
            state.v[bus] = x[self.v(bus)];
        }
        state
    }

    /// Human-readable name of state column `k`, using bus labels.
    pub fn name(&self, k: usize, bus_ids: &[u32]) -> String {
        if k < self.buses - 1 {
            let bus = if k < self.reference { k } else { k + 1 };
            format!("theta[{}]", bus_ids[bus])
        } else {
            format!("V[{}]", bus_ids[k - (self.buses - 1)])
        }
    }
}

/// A set of lines on a bus set, with a reference bus. Both the true case and
/// the attacker's learned model reduce to this.
#[derive(Debug, Clone)]
pub struct BranchModel {
    buses: usize,
    reference: usize,
    lines: Vec<Line>,
    /// Unordered bus pair -> line index.
    pairs: HashMap<(usize, usize), usize>,
    /// Per bus: (line index, bus is the from end).
    incident: Vec<Vec<(usize, bool)>>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl BranchModel {
    pub fn new(buses: usize, reference: usize, lines: Vec<Line>) -> Self {
        let mut pairs = HashMap::with_capacity(lines.len());
        let mut incident = vec![Vec::new(); buses];
        for (k, line) in lines.iter().enumerate() {
            pairs.insert(key(line.from, line.to), k);
            incident[line.from].push((k, true));
            incident[line.to].push((k, false));
        }
        BranchModel {
            buses,
            reference,
            lines,
            pairs,
            incident,
        }
    }

    pub fn bus_count(&self) -> usize {
        self.buses
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn state_index(&self) -> StateIndex {
        StateIndex {
            buses: self.buses,
            reference: self.reference,
        }
    }

    /// Line index and whether `at` is its from end.
    pub fn line_between(&self, at: usize, other: usize) -> Option<(usize, bool)> {
        self.pairs.get(&key(at, other)).map(|&k| (k, self.lines[k].from == at))
    }

    pub fn incident(&self, bus: usize) -> &[(usize, bool)] {
        &self.incident[bus]
    }

    pub fn neighbors(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        self.incident[bus].iter().map(move |&(k, at_from)| {
            let line = &self.lines[k];
            if at_from {
                line.to
            } else {
                line.from
            }
        })
    }

    fn opposite(&self, k: usize, at_from: bool) -> (usize, usize) {
        let line = &self.lines[k];
        if at_from {
            (line.from, line.to)
        } else {
            (line.to, line.from)
        }
    }

    /// Flow out of `at` toward `other`; zero when no line joins them.
    pub fn flow(&self, state: &SystemState, at: usize, other: usize) -> (f64, f64) {
        match self.line_between(at, other) {
            Some((k, at_from)) => end_flow(
                &self.lines[k],
                at_from,
                state.v[at],
                state.v[other],
                state.theta[at] - state.theta[other],
            ),
            None => (0.0, 0.0),
        }
    }

    pub fn injection(&self, state: &SystemState, bus: usize) -> (f64, f64) {
        self.incident[bus].iter().fold((0.0, 0.0), |(p, q), &(k, at_from)| {
            let (me, other) = self.opposite(k, at_from);
            let (dp, dq) = end_flow(
                &self.lines[k],
                at_from,
                state.v[me],
                state.v[other],
                state.theta[me] - state.theta[other],
            );
            (p + dp, q + dq)
        })
    }

    pub fn injections(&self, state: &SystemState) -> (Vec<f64>, Vec<f64>) {
        (0..self.buses).map(|bus| self.injection(state, bus)).unzip()
    }

    /// The measurement function h(x) over a layout.
    pub fn measure(&self, layout: &MeterLayout, state: &SystemState) -> Vec<f64> {
        layout
            .meters
            .iter()
            .map(|meter| match *meter {
                MeterKind::FlowP { from, to } => self.flow(state, from, to).0,
                MeterKind::FlowQ { from, to } => self.flow(state, from, to).1,
                MeterKind::InjectionP(bus) => self.injection(state, bus).0,
                MeterKind::InjectionQ(bus) => self.injection(state, bus).1,
                MeterKind::Voltage(bus) => state.v[bus],
            })
            .collect()
    }

    /// Partials of the flow out of `at` toward `other`, scattered into a row
    /// over the full `[theta (all buses), V (all buses)]` space.
    fn flow_row(&self, state: &SystemState, at: usize, other: usize, reactive: bool, row: &mut [f64]) {
        if let Some((k, at_from)) = self.line_between(at, other) {
            let d = end_partials(
                &self.lines[k],
                at_from,
                state.v[at],
                state.v[other],
                state.theta[at] - state.theta[other],
            );
            let dd = if reactive { d.dq } else { d.dp };
            row[at] += dd[0];
            row[other] += dd[1];
            row[self.buses + at] += dd[2];
            row[self.buses + other] += dd[3];
        }
    }

    fn injection_row(&self, state: &SystemState, bus: usize, reactive: bool, row: &mut [f64]) {
        for &(k, at_from) in &self.incident[bus] {
            let (_, other) = self.opposite(k, at_from);
            self.flow_row(state, bus, other, reactive, row);
        }
    }

    /// Jacobian of all injections `[P; Q]` with respect to
    /// `[theta (all buses); V (all buses)]`.
    pub fn injection_jacobian(&self, state: &SystemState) -> DMatrix<f64> {
        let n = self.buses;
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        let mut row = vec![0.0; 2 * n];
        for reactive in [false, true] {
            for bus in 0..n {
                row.iter_mut().for_each(|v| *v = 0.0);
                self.injection_row(state, bus, reactive, &mut row);
                let r = bus + if reactive { n } else { 0 };
                for (c, &v) in row.iter().enumerate() {
                    jac[(r, c)] = v;
                }
            }
        }
        jac
    }

    /// Jacobian of h(x) over a layout with respect to the estimation state
    /// vector of [`StateIndex`].
    pub fn measurement_jacobian(&self, layout: &MeterLayout, state: &SystemState) -> DMatrix<f64> {
        let n = self.buses;
        let index = self.state_index();
        let mut jac = DMatrix::zeros(layout.len(), index.len());
        let mut row = vec![0.0; 2 * n];
        for (m, meter) in layout.meters.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            match *meter {
                MeterKind::FlowP { from, to } => self.flow_row(state, from, to, false, &mut row),
                MeterKind::FlowQ { from, to } => self.flow_row(state, from, to, true, &mut row),
                MeterKind::InjectionP(bus) => self.injection_row(state, bus, false, &mut row),
                MeterKind::InjectionQ(bus) => self.injection_row(state, bus, true, &mut row),
                MeterKind::Voltage(bus) => row[n + bus] = 1.0,
            }
            for bus in 0..n {
                if let Some(c) = index.theta(bus) {
                    jac[(m, c)] = row[bus];
                }
                jac[(m, index.v(bus))] = row[n + bus];
            }
        }
        jac
    }

    /// Nodal conductance and susceptance implied by the lines.
    pub fn nodal_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.buses;
        let mut g = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        for line in &self.lines {
            let (a, m) = line.scales(true);
            let (f, t) = (line.from, line.to);
            g[(f, f)] += a * line.g;
            g[(t, t)] += line.g;
            g[(f, t)] -= m * line.g;
            g[(t, f)] -= m * line.g;
            b[(f, f)] += a * (line.b + line.b_sh);
            b[(t, t)] += line.b + line.b_sh;
            b[(f, t)] -= m * line.b;
            b[(t, f)] -= m * line.b;
        }
        (g, b)
    }
}
