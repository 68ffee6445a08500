//! Weighted-least-squares AC state estimation and residual-based bad-data
//! detection.
//!
//! The estimator is a Gauss-Newton iteration on
//! `J(x) = (z - h(x))' W (z - h(x))` from a flat start, with step halving
//! whenever a full step would increase `J`. Bad-data detection compares the
//! weighted residual `sqrt(J(x_hat))` against the square root of the
//! chi-squared quantile at the configured confidence.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::flow::{BranchModel, SystemState};
use crate::network::MeterLayout;
use crate::powerflow::MeasurementSet;

/// How the alarm threshold tau is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum AlarmRule {
    /// `sqrt` of the chi-squared quantile at `confidence` with
    /// `meters - states` degrees of freedom.
    ChiSquared,
    /// Empirical `confidence` quantile of weighted residuals observed on a
    /// clean calibration window.
    Empirical { calibration: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Per-meter weights; `None` means `1 / sigma^2` from the measurement set.
    pub weights: Option<Vec<f64>>,
    /// Convergence tolerance on the max-norm of the state update.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub alarm: AlarmRule,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            weights: None,
            tolerance: 1e-9,
            max_iterations: 50,
            confidence: 0.99,
            alarm: AlarmRule::ChiSquared,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("estimator config", "tolerance must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::validation("estimator config", "confidence must lie in (0, 1)"));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::validation("estimator config", "weights must be positive"));
            }
        }
        Ok(())
    }

    /// Alarm threshold in weighted-residual units.
    pub fn threshold(&self, dof: usize) -> Result<f64> {
        match &self.alarm {
            AlarmRule::ChiSquared => alarm_threshold(self.confidence, dof),
            AlarmRule::Empirical { calibration } => empirical_threshold(calibration, self.confidence),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub state: SystemState,
    /// h(x_hat) over the layout.
    pub fitted: Vec<f64>,
    /// Unweighted 2-norm of `z - h(x_hat)`.
    pub residual: f64,
    /// `sqrt((z - h)' W (z - h))`, the detection statistic.
    pub weighted_residual: f64,
    /// Per meter, fitted minus measured.
    pub meter_residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Degrees of freedom of the residual test: meters minus estimated states.
pub fn degrees_of_freedom(meters: usize, buses: usize) -> usize {
    meters.saturating_sub(2 * buses - 1)
}

fn objective(z: &[f64], fitted: &[f64], w: &[f64]) -> f64 {
    z.iter().zip(fitted).zip(w).map(|((z, h), w)| w * (z - h) * (z - h)).sum()
}

/// Estimate the state behind `z` using the measurement function of `model`.
pub fn estimate_state(
    z: &MeasurementSet,
    model: &BranchModel,
    layout: &MeterLayout,
    cfg: &EstimatorConfig,
) -> Result<StateEstimate> {
    estimate_state_from(z, model, layout, cfg, &SystemState::flat(model.bus_count()))
}

/// As [`estimate_state`], starting from `start` instead of flat.
pub fn estimate_state_from(
    z: &MeasurementSet,
    model: &BranchModel,
    layout: &MeterLayout,
    cfg: &EstimatorConfig,
    start: &SystemState,
) -> Result<StateEstimate> {
    cfg.validate()?;
    let m = layout.len();
    if z.len() != m {
        return Err(Error::Dimension {
            expected: m,
            actual: z.len(),
        });
    }
    let weights = match &cfg.weights {
        Some(w) if w.len() != m => {
            return Err(Error::Dimension {
                expected: m,
                actual: w.len(),
            })
        }
        Some(w) => w.clone(),
        None => z.weights(),
    };
    let index = model.state_index();
    let sqrt_w = DVector::from_iterator(m, weights.iter().map(|w| w.sqrt()));

    let mut x = index.to_vector(start);
    let mut state = index.to_state(&x);
    let mut fitted = model.measure(layout, &state);
    let mut cost = objective(&z.z, &fitted, &weights);
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 0..cfg.max_iterations {
        iterations = iteration + 1;
        let mut h = model.measurement_jacobian(layout, &state);
        for (r, mut row) in h.row_iter_mut().enumerate() {
            row *= sqrt_w[r];
        }
        if iteration == 0 {
            check_observability(&h, model, layout)?;
        }
        let resid = DVector::from_iterator(m, (0..m).map(|k| (z.z[k] - fitted[k]) * sqrt_w[k]));
        let gain = h.transpose() * &h;
        let rhs = h.transpose() * resid;
        let step = match gain.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => match gain.lu().solve(&rhs) {
                Some(s) => s,
                None => break,
            },
        };

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &x + &step * alpha;
            let trial_state = index.to_state(&trial);
            let trial_fit = model.measure(layout, &trial_state);
            let trial_cost = objective(&z.z, &trial_fit, &weights);
            if trial_cost.is_finite() && trial_cost <= cost * (1.0 + 1e-12) + 1e-300 {
                x = trial;
                state = trial_state;
                fitted = trial_fit;
                cost = trial_cost;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        let moved = step.amax() * alpha;
        if moved < cfg.tolerance {
            converged = true;
            break;
        }
        if !accepted {
            break;
        }
    }

    let meter_residuals: Vec<f64> = fitted.iter().zip(&z.z).map(|(h, z)| h - z).collect();
    Ok(StateEstimate {
        residual: meter_residuals.iter().map(|e| e * e).sum::<f64>().sqrt(),
        weighted_residual: cost.sqrt(),
        state,
        fitted,
        meter_residuals,
        iterations,
        converged,
    })
}

fn check_observability(weighted_jac: &DMatrix<f64>, model: &BranchModel, layout: &MeterLayout) -> Result<()> {
    let cols = weighted_jac.ncols();
    // Zero rows pad an underdetermined Jacobian so the SVD exposes the full
    // null space; column equilibration makes the rank test scale free.
    let mut scaled = weighted_jac.clone().resize_vertically(weighted_jac.nrows().max(cols), 0.0);
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let svd = scaled.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested");
    let smax = svd.singular_values.max();
    let mut unobservable = std::collections::BTreeSet::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= 1e-9 * smax.max(1e-300) {
            for c in 0..cols {
                if v_t[(k, c)].abs() > 1e-3 {
                    unobservable.insert(c);
                }
            }
        }
    }
    if unobservable.is_empty() {
        return Ok(());
    }
    let index = model.state_index();
    Err(Error::Unobservable {
        states: unobservable.into_iter().map(|c| index.name(c, &layout.bus_ids)).collect(),
    })
}

/// Unweighted Euclidean distance between readings and fitted values.
pub fn residual(z: &[f64], fitted: &[f64]) -> Result<f64> {
    if z.len() != fitted.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            actual: fitted.len(),
        });
    }
    Ok(z.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `sqrt(sum w (z - h)^2)`.
pub fn weighted_residual(z: &[f64], fitted: &[f64], weights: &[f64]) -> Result<f64> {
    if z.len() != fitted.len() || z.len() != weights.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            actual: fitted.len().min(weights.len()),
        });
    }
    Ok(objective(z, fitted, weights).sqrt())
}

/// Fitted minus measured for meter `m`.
pub fn per_meter_residual(z: &[f64], fitted: &[f64], m: usize) -> Result<f64> {
    match (z.get(m), fitted.get(m)) {
        (Some(z), Some(h)) => Ok(h - z),
        _ => Err(Error::validation(format!("meter {m}"), "index out of range")),
    }
}

/// tau such that a chi-squared(dof) variable exceeds tau^2 with probability
/// `1 - confidence`.
pub fn alarm_threshold(confidence: f64, dof: usize) -> Result<f64> {
    if dof < 1 {
        return Err(Error::validation("alarm threshold", "degrees of freedom must be at least 1"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::validation("alarm threshold", "confidence must lie in (0, 1)"));
    }
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::validation("alarm threshold", e.to_string()))?;
    Ok(chi.inverse_cdf(confidence).sqrt())
}

/// Empirical `confidence` quantile (nearest rank) of a calibration window.
pub fn empirical_threshold(calibration: &[f64], confidence: f64) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::validation("alarm threshold", "empty calibration window"));
    }
    let mut sorted = calibration.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((confidence * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// BDD: alarm iff `r > tau`.
pub fn bdd_check(r: f64, tau: f64) -> bool {
    r > tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateLogRow {
    pub t: f64,
    pub r: f64,
    pub tau: f64,
    pub alarm: bool,
    pub iterations: usize,
    pub converged: bool,
}

pub fn write_estimate_log<W: Write>(out: W, rows: &[EstimateLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "r", "tau", "alarm", "iterations", "converged"])?;
    for row in rows {
        w.write_record([
            row.t.to_string(),
            row.r.to_string(),
            row.tau.to_string(),
            (row.alarm as u8).to_string(),
            row.iterations.to_string(),
            (row.converged as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
