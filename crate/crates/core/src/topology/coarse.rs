use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph;
use crate::topology::{LearnedBranch, SampleBuffer};

/// Approximate nodal matrices from the small-angle regression.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimate {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Condition number of the regularized Gram matrix.
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// Fixed regularization added to the Gram diagonal.
    Absolute(f64),
    /// Regularization as a fraction of the Gram trace.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoarseConfig {
    pub ridge: Ridge,
    /// Subtract each bus's time mean from regressors and targets first.
    pub center: bool,
}

const SINGULAR_CONDITION: f64 = 1e12;

/// `G# = [P/V][V]'([V][V]' + ridge I)^-1` and
/// `B# = -[Q/V][V]'([V][V]' + ridge I)^-1`.
pub fn coarse_identify(buf: &SampleBuffer, cfg: &CoarseConfig) -> Result<CoarseEstimate> {
    let n = buf.bus_count();
    let mut v = buf.v.clone();
    let mut p_over_v = buf.p.component_div(&buf.v);
    let mut q_over_v = buf.q.component_div(&buf.v);
    if cfg.center {
        for m in [&mut v, &mut p_over_v, &mut q_over_v] {
            for mut row in m.row_iter_mut() {
                let mean = row.mean();
                row.add_scalar_mut(-mean);
            }
        }
    }
    let mut gram = &v * v.transpose();
    let ridge = match cfg.ridge {
        Ridge::Absolute(r) => r,
        Ridge::Relative(f) => f * gram.trace(),
    };
    if !(ridge >= 0.0) {
        return Err(Error::validation("coarse regression", "ridge must be non-negative"));
    }
    for k in 0..n {
        gram[(k, k)] += ridge;
    }
    let sv = gram.clone().svd(false, false).singular_values;
    let condition = sv.max() / sv.min();
    if !(condition < SINGULAR_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let inv = gram.try_inverse().ok_or(Error::Singular { condition })?;
    let proj = v.transpose() * inv;
    Ok(CoarseEstimate {
        g: &p_over_v * &proj,
        b: -(&q_over_v * &proj),
        condition,
    })
}

/// Keep pair (i, j) iff the symmetrized `|B#[i][j]|` reaches
/// `threshold * max |B#| off the diagonal`.
pub fn prune_incidence(coarse: &CoarseEstimate, threshold: f64) -> Result<Vec<LearnedBranch>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation("pruning", "threshold must lie in (0, 1)"));
    }
    let n = coarse.b.nrows();
    let sym = |m: &DMatrix<f64>, i: usize, j: usize| 0.5 * (m[(i, j)] + m[(j, i)]);
    let mut largest = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            largest = largest.max(sym(&coarse.b, i, j).abs());
        }
    }
    let mut branches = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let b = sym(&coarse.b, i, j);
            if largest > 0.0 && b.abs() >= threshold * largest {
                branches.push(LearnedBranch {
                    from: i,
                    to: j,
                    g: -sym(&coarse.g, i, j),
                    b: -b,
                });
            }
        }
    }
    let edges: Vec<_> = branches.iter().map(|b| (b.from, b.to)).collect();
    let components = graph::component_count(n, &edges);
    if components != 1 {
        return Err(Error::Disconnected { components });
    }
    Ok(branches)
}
