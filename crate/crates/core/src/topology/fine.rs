//! Fine identification: Gauss-Newton on the stacked injection equations with
//! shared branch parameters and per-snapshot angles.
//!
//! For snapshot `t` the residual rows are `[P_t - P(g, b, theta_t); Q_t - Q(..)]`.
//! The Jacobian has a shared block `A_t` in `(g, b)` and a private block
//! `D_t` in `theta_t`. Projecting each snapshot onto the orthogonal
//! complement of `range(D_t)` eliminates the angles exactly, so the shared
//! update comes from a truncated-SVD generalized inverse of the stacked
//! projected blocks, and each angle update from back substitution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{end_partials, Line};
use crate::topology::{LearnedBranch, LearnedModel, SampleBuffer};

#[derive(Debug, Clone, PartialEq)]
pub struct FineConfig {
    pub max_iterations: usize,
    /// Stop when the relative mismatch improvement drops below this.
    pub tolerance: f64,
    /// Singular values below `truncation * largest` are dropped.
    pub truncation: f64,
    /// Scale residual rows by the reciprocal meter sigma.
    pub weighted: bool,
    /// Treat voltage magnitudes as unknowns anchored by their meters instead
    /// of fixed regressors.
    pub estimate_voltage: bool,
    /// Angle reference bus.
    pub reference: usize,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            max_iterations: 50,
            tolerance: 1e-6,
            truncation: 1e-10,
            weighted: false,
            estimate_voltage: false,
            reference: 0,
        }
    }
}

/// Unknown layout of one snapshot.
#[derive(Clone, Copy)]
struct Layout {
    buses: usize,
    reference: usize,
    lines: usize,
    estimate_voltage: bool,
}

impl Layout {
    fn rows(&self) -> usize {
        if self.estimate_voltage {
            3 * self.buses
        } else {
            2 * self.buses
        }
    }

    fn private(&self) -> usize {
        if self.estimate_voltage {
            2 * self.buses - 1
        } else {
            self.buses - 1
        }
    }

    fn theta_col(&self, bus: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match bus.cmp(&self.reference) {
            Less => Some(bus),
            Equal => None,
            Greater => Some(bus - 1),
        }
    }

    fn v_col(&self, bus: usize) -> Option<usize> {
        self.estimate_voltage.then(|| self.buses - 1 + bus)
    }
}

struct Snapshot {
    p: Vec<f64>,
    q: Vec<f64>,
    v_meas: Vec<f64>,
    w: Vec<f64>,
}

/// Residual rows and Jacobian blocks for one snapshot.
fn assemble(
    lay: Layout,
    lines: &[Line],
    snap: &Snapshot,
    theta: &[f64],
    v: &[f64],
    with_jacobian: bool,
) -> (DVector<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>) {
    let n = lay.buses;
    let mut r = DVector::zeros(lay.rows());
    let mut blocks = with_jacobian.then(|| (DMatrix::zeros(lay.rows(), 2 * lay.lines), DMatrix::zeros(lay.rows(), lay.private())));
    for bus in 0..n {
        r[bus] = snap.p[bus];
        r[n + bus] = snap.q[bus];
    }
    for (k, line) in lines.iter().enumerate() {
        for at_from in [true, false] {
            let (me, other) = if at_from { (line.from, line.to) } else { (line.to, line.from) };
            let d = end_partials(line, at_from, v[me], v[other], theta[me] - theta[other]);
            r[me] -= d.p;
            r[n + me] -= d.q;
            if let Some((a, dd)) = blocks.as_mut() {
                a[(me, k)] += d.dp[4];
                a[(me, lay.lines + k)] += d.dp[5];
                a[(n + me, k)] += d.dq[4];
                a[(n + me, lay.lines + k)] += d.dq[5];
                for (bus, slot) in [(me, 0usize), (other, 1)] {
                    if let Some(c) = lay.theta_col(bus) {
                        dd[(me, c)] += d.dp[slot];
                        dd[(n + me, c)] += d.dq[slot];
                    }
                    if let Some(c) = lay.v_col(bus) {
                        dd[(me, c)] += d.dp[2 + slot];
                        dd[(n + me, c)] += d.dq[2 + slot];
                    }
                }
            }
        }
    }
    if lay.estimate_voltage {
        for bus in 0..n {
            r[2 * n + bus] = snap.v_meas[bus] - v[bus];
            if let Some((_, dd)) = blocks.as_mut() {
                dd[(2 * n + bus, lay.v_col(bus).expect("voltage columns"))] = 1.0;
            }
        }
    }
    for (k, w) in snap.w.iter().enumerate() {
        r[k] *= w;
    }
    if let Some((a, dd)) = blocks.as_mut() {
        for (k, &w) in snap.w.iter().enumerate() {
            a.row_mut(k).scale_mut(w);
            dd.row_mut(k).scale_mut(w);
        }
    }
    (r, blocks)
}

/// Unweighted injection mismatch `[P - P(x); Q - Q(x)]` for one snapshot with
/// voltages held at `v`, and its Jacobians in `(g, b)` (columns `g_0.., b_0..`)
/// and in the non-reference angles.
pub fn identification_blocks(
    lines: &[Line],
    reference: usize,
    p: &[f64],
    q: &[f64],
    theta: &[f64],
    v: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = p.len();
    if q.len() != n || theta.len() != n || v.len() != n || reference >= n {
        return Err(Error::validation("snapshot", format!("vectors must all have {n} entries and the reference must lie inside")));
    }
    if let Some(l) = lines.iter().find(|l| l.from >= n || l.to >= n) {
        return Err(Error::validation("line", format!("{}-{} out of range", l.from, l.to)));
    }
    let lay = Layout {
        buses: n,
        reference,
        lines: lines.len(),
        estimate_voltage: false,
    };
    let snap = Snapshot {
        p: p.to_vec(),
        q: q.to_vec(),
        v_meas: v.to_vec(),
        w: vec![1.0; lay.rows()],
    };
    let (r, blocks) = assemble(lay, lines, &snap, theta, v, true);
    let (a, d) = blocks.expect("requested");
    Ok((r, a, d))
}

/// Mismatch below which residuals are rounding noise relative to the data.
pub(crate) fn rounding_floor(buf: &SampleBuffer, cfg: &FineConfig) -> f64 {
    let weighted = |z: &DMatrix<f64>, sigma: &DMatrix<f64>| {
        z.iter()
            .zip(sigma.iter())
            .map(|(z, s)| if cfg.weighted { (z / s).powi(2) } else { z * z })
            .sum::<f64>()
    };
    NEGLIGIBLE * (weighted(&buf.p, &buf.sigma_p) + weighted(&buf.q, &buf.sigma_q)).sqrt()
}

fn to_lines(branches: &[LearnedBranch]) -> Vec<Line> {
    branches.iter().map(|b| Line::series(b.from, b.to, b.g, b.b)).collect()
}

/// Refine branch parameters and per-snapshot angles from an initial branch
/// list.
pub fn fine_identify(initial: &[LearnedBranch], buf: &SampleBuffer, cfg: &FineConfig) -> Result<LearnedModel> {
    let n = buf.bus_count();
    let count = buf.len();
    if initial.is_empty() {
        return Err(Error::validation("fine identification", "empty initial branch list"));
    }
    if cfg.reference >= n {
        return Err(Error::validation("fine identification", "reference bus out of range"));
    }
    let lay = Layout {
        buses: n,
        reference: cfg.reference,
        lines: initial.len(),
        estimate_voltage: cfg.estimate_voltage,
    };
    let snaps: Vec<Snapshot> = (0..count)
        .map(|t| {
            let w = if cfg.weighted {
                let mut w: Vec<f64> = buf.sigma_p.column(t).iter().chain(buf.sigma_q.column(t).iter()).map(|s| 1.0 / s).collect();
                if cfg.estimate_voltage {
                    w.extend(buf.sigma_v.column(t).iter().map(|s| 1.0 / s));
                }
                w
            } else {
                vec![1.0; lay.rows()]
            };
            Snapshot {
                p: buf.p.column(t).iter().copied().collect(),
                q: buf.q.column(t).iter().copied().collect(),
                v_meas: buf.v.column(t).iter().copied().collect(),
                w,
            }
        })
        .collect();

    let mut branches: Vec<LearnedBranch> = initial
        .iter()
        .map(|b| LearnedBranch { g: b.g.max(0.0), ..*b })
        .collect();
    let mut lines = to_lines(&branches);
    let mut theta: Vec<Vec<f64>> = vec![vec![0.0; n]; count];
    let mut volts: Vec<Vec<f64>> = snaps.iter().map(|s| s.v_meas.clone()).collect();

    // Pseudo power flow: angles (and voltages) that best explain each
    // snapshot under the initial parameters.
    theta
        .par_iter_mut()
        .zip(volts.par_iter_mut())
        .zip(snaps.par_iter())
        .for_each(|((th, v), snap)| {
            for _ in 0..8 {
                let (r, blocks) = assemble(lay, &lines, snap, th, v, true);
                let (_, d) = blocks.expect("requested");
                let Ok(step) = d.svd(true, true).solve(&r, 1e-12) else { break };
                apply_private(lay, th, v, &step, 1.0);
                if step.amax() < 1e-12 {
                    break;
                }
            }
        });

    let cost_of = |lines: &[Line], theta: &[Vec<f64>], volts: &[Vec<f64>]| -> f64 {
        snaps
            .par_iter()
            .zip(theta.par_iter().zip(volts.par_iter()))
            .map(|(snap, (th, v))| assemble(lay, lines, snap, th, v, false).0.norm_squared())
            .sum()
    };

    let mut cost = cost_of(&lines, &theta, &volts);
    let mut history = vec![cost.sqrt()];
    let negligible = (NEGLIGIBLE * history[0]).max(rounding_floor(buf, cfg));
    let mut iterations = 0;
    let mut lambda = 0.0;

    while iterations < cfg.max_iterations {
        if !cost.is_finite() {
            return Err(Error::IdentificationDiverged { history });
        }
        if cost.sqrt() <= negligible {
            break;
        }
        iterations += 1;
        // Per snapshot: projected shared block, projected residual and the
        // QR factors needed for back substitution.
        let parts: Vec<_> = snaps
            .par_iter()
            .zip(theta.par_iter().zip(volts.par_iter()))
            .map(|(snap, (th, v))| {
                let (r, blocks) = assemble(lay, &lines, snap, th, v, true);
                let (a, d) = blocks.expect("requested");
                let basis = PrivateBasis::new(d);
                let a_proj = &a - &basis.u * (basis.u.transpose() * &a);
                let r_proj = &r - &basis.u * (basis.u.transpose() * &r);
                (a_proj, r_proj, a, r, basis)
            })
            .collect();
        let (reduced, projected) = reduce_stacked(parts.iter().map(|(a_proj, r_proj, ..)| (a_proj, r_proj)), 2 * lay.lines);
        let r_norm = parts.iter().map(|p| p.1.norm_squared()).sum::<f64>().sqrt();
        let mut gradient = reduced.tr_mul(&projected);
        // Descent that would push a pinned conductance negative is blocked.
        for (k, b) in branches.iter().enumerate() {
            if b.g <= 0.0 && gradient[k] < 0.0 {
                gradient[k] = 0.0;
            }
        }
        let solver = SharedSolver::new(reduced, projected, cfg.truncation);
        let scale = solver.largest * solver.largest;
        let stationary = gradient.norm() <= STATIONARY * solver.largest * r_norm || cost.sqrt() <= negligible;

        let mut accepted = None;
        let mut damped = 0;
        while damped <= MAX_DAMPED {
            let shared = solver.step(&branches, lambda * scale);
            let private: Vec<DVector<f64>> = parts
                .par_iter()
                .map(|(_, _, a, r, basis)| basis.solve(&(r - a * &shared)))
                .collect();
            let mut alpha = 1.0;
            for _ in 0..4 {
                let trial_branches: Vec<LearnedBranch> = branches
                    .iter()
                    .enumerate()
                    .map(|(k, b)| LearnedBranch {
                        g: (b.g + alpha * shared[k]).max(0.0),
                        b: b.b + alpha * shared[lay.lines + k],
                        ..*b
                    })
                    .collect();
                let trial_lines = to_lines(&trial_branches);
                // Each snapshot's mismatch depends on its own private
                // variables only, so their step length is chosen per snapshot.
                let per_snapshot: Vec<(Vec<f64>, Vec<f64>, f64)> = snaps
                    .par_iter()
                    .zip(theta.par_iter().zip(volts.par_iter()))
                    .zip(private.par_iter())
                    .map(|((snap, (th, v)), step)| {
                        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
                        for scale in [1.0, 0.5, 0.25, 0.0] {
                            let (mut th, mut v) = (th.clone(), v.clone());
                            apply_private(lay, &mut th, &mut v, step, alpha * scale);
                            let c = assemble(lay, &trial_lines, snap, &th, &v, false).0.norm_squared();
                            if best.as_ref().is_none_or(|b| c < b.2) {
                                best = Some((th, v, c));
                            }
                        }
                        best.expect("at least one scale")
                    })
                    .collect();
                let trial_cost: f64 = per_snapshot.iter().map(|p| p.2).sum();
                let (trial_theta, trial_v): (Vec<_>, Vec<_>) = per_snapshot.into_iter().map(|(th, v, _)| (th, v)).unzip();
                if trial_cost < cost {
                    accepted = Some((trial_branches, trial_lines, trial_theta, trial_v, trial_cost));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            lambda = if lambda == 0.0 { LAMBDA_START } else { lambda * LAMBDA_GROWTH };
            damped += 1;
        }

        match accepted {
            Some((b, l, th, v, c)) => {
                let improvement = (cost - c) / cost;
                branches = b;
                lines = l;
                theta = th;
                volts = v;
                cost = c;
                history.push(cost.sqrt());
                lambda = if lambda <= LAMBDA_START { 0.0 } else { lambda / LAMBDA_RELAX };
                if improvement < cfg.tolerance {
                    break;
                }
            }
            // No damped step reduced the mismatch: a stationary point unless
            // the gradient says otherwise.
            None if stationary => break,
            None => return Err(Error::IdentificationDiverged { history }),
        }
    }

    Ok(LearnedModel {
        bus_ids: buf.bus_ids.clone(),
        reference: cfg.reference,
        branches,
        theta,
        mismatch: cost.sqrt(),
        history,
        iterations,
        samples: count,
    })
}

const MAX_DAMPED: usize = 3;
const LAMBDA_START: f64 = 1e-6;
const LAMBDA_GROWTH: f64 = 1e3;
const LAMBDA_RELAX: f64 = 10.0;
const STATIONARY: f64 = 1e-7;
const NEGLIGIBLE: f64 = 1e-10;

/// Triangular reduction of the stacked projected system: an upper
/// triangular `R` and `y` with `R'R = A'A` and `R'y = A'r`, so the truncated
/// generalized inverse of `A` acts through the SVD of the small `R`. Blocks
/// are folded in chunks so the tall stack never materializes.
fn reduce_stacked<'a>(
    blocks: impl Iterator<Item = (&'a DMatrix<f64>, &'a DVector<f64>)>,
    cols: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let blocks: Vec<_> = blocks.collect();
    let rows_per = blocks.first().map_or(1, |b| b.0.nrows()).max(1);
    let chunk = (4 * (cols + 1)).div_ceil(rows_per).max(1);
    let fold = |mats: Vec<DMatrix<f64>>| -> DMatrix<f64> {
        let total: usize = mats.iter().map(|m| m.nrows()).sum();
        let mut stacked = DMatrix::zeros(total, cols + 1);
        let mut at = 0;
        for m in &mats {
            stacked.view_mut((at, 0), (m.nrows(), cols + 1)).copy_from(m);
            at += m.nrows();
        }
        if total <= cols + 1 {
            return stacked;
        }
        stacked.qr().r()
    };
    let mut level: Vec<DMatrix<f64>> = blocks
        .par_chunks(chunk)
        .map(|group| {
            fold(
                group
                    .iter()
                    .map(|(a, r)| {
                        let mut m = DMatrix::zeros(a.nrows(), cols + 1);
                        m.view_mut((0, 0), (a.nrows(), cols)).copy_from(*a);
                        m.set_column(cols, r);
                        m
                    })
                    .collect(),
            )
        })
        .collect();
    while level.len() > 1 {
        level = level.par_chunks(4).map(|group| fold(group.to_vec())).collect();
    }
    let mut top = level.pop().unwrap_or_else(|| DMatrix::zeros(0, cols + 1));
    if top.nrows() < cols {
        top = top.resize_vertically(cols, 0.0);
    }
    let r = top.view((0, 0), (cols, cols)).into_owned();
    let y = top.view((0, cols), (cols, 1)).column(0).into_owned();
    (r, y)
}

/// Generalized-inverse solve of the reduced shared system. Conductances
/// pinned at zero whose step points further negative are held fixed.
struct SharedSolver {
    r: DMatrix<f64>,
    y: DVector<f64>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    largest: f64,
    truncation: f64,
}

impl SharedSolver {
    fn new(r: DMatrix<f64>, y: DVector<f64>, truncation: f64) -> Self {
        let svd = r.clone().svd(true, true);
        let largest = svd.singular_values.max();
        SharedSolver {
            r,
            y,
            svd,
            largest,
            truncation,
        }
    }

    fn solve_with(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, y: &DVector<f64>, eps: f64, damping: f64) -> DVector<f64> {
        let u = svd.u.as_ref().expect("left vectors");
        let vt = svd.v_t.as_ref().expect("right vectors");
        let uy = u.tr_mul(y);
        let mut coeff = DVector::zeros(svd.singular_values.len());
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > eps {
                coeff[k] = s * uy[k] / (s * s + damping);
            }
        }
        vt.tr_mul(&coeff)
    }

    fn step(&self, branches: &[LearnedBranch], damping: f64) -> DVector<f64> {
        let eps = self.truncation * self.largest;
        let mut step = Self::solve_with(&self.svd, &self.y, eps, damping);
        let m = branches.len();
        let mut fixed = vec![false; m];
        for _ in 0..4 {
            let mut changed = false;
            for k in 0..m {
                if !fixed[k] && branches[k].g <= 0.0 && step[k] < 0.0 {
                    fixed[k] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut reduced = self.r.clone();
            for k in (0..m).filter(|&k| fixed[k]) {
                reduced.column_mut(k).fill(0.0);
            }
            let svd = reduced.svd(true, true);
            step = Self::solve_with(&svd, &self.y, eps, damping);
            for k in (0..m).filter(|&k| fixed[k]) {
                step[k] = 0.0;
            }
        }
        step
    }
}

/// Range of a snapshot's private Jacobian. Buses without branches leave it
/// rank deficient, so the basis comes from a truncated SVD.
struct PrivateBasis {
    u: DMatrix<f64>,
    /// `V S^-1` over the retained directions.
    inverse: DMatrix<f64>,
}

impl PrivateBasis {
    fn new(d: DMatrix<f64>) -> Self {
        let svd = d.svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let largest = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > 1e-12 * largest)
            .collect();
        let u = u.select_columns(&keep);
        let mut inverse = vt.select_rows(&keep).transpose();
        for (j, &k) in keep.iter().enumerate() {
            inverse.column_mut(j).unscale_mut(svd.singular_values[k]);
        }
        PrivateBasis { u, inverse }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        &self.inverse * (self.u.transpose() * rhs)
    }
}

fn apply_private(lay: Layout, theta: &mut [f64], v: &mut [f64], step: &DVector<f64>, alpha: f64) {
    for bus in 0..lay.buses {
        if let Some(c) = lay.theta_col(bus) {
            theta[bus] += alpha * step[c];
        }
        if let Some(c) = lay.v_col(bus) {
            v[bus] += alpha * step[c];
        }
    }
}
