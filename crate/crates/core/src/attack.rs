//! Attacker side: state-bias attack synthesis from a learned model, the
//! pseudo-residual gate and the collect / learn / craft / gate loop.
//!
//! Everything here works from [`MeasurementSet`]s, the public
//! [`MeterLayout`] and the attacker's own [`LearnedModel`]. Nothing in this
//! module can see the generating case or the operator's threshold.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::estimation::{alarm_threshold, degrees_of_freedom, estimate_state, weighted_residual, EstimatorConfig, StateEstimate};
use crate::flow::{BranchModel, SystemState};
use crate::network::{subgraph_meters, IncidenceMatrix, MeterLayout};
use crate::powerflow::MeasurementSet;
use crate::topology::{learn_topology, refine_topology, LearnedModel, SampleBuffer, TopologyConfig};

/// Per-bus offsets added to the attacker's estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBias {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl StateBias {
    pub fn zero(buses: usize) -> Self {
        StateBias {
            theta: vec![0.0; buses],
            v: vec![0.0; buses],
        }
    }

    pub fn bus_count(&self) -> usize {
        self.theta.len()
    }

    /// Buses with a nonzero offset.
    pub fn buses(&self) -> BTreeSet<usize> {
        (0..self.bus_count())
            .filter(|&k| self.theta[k] != 0.0 || self.v[k] != 0.0)
            .collect()
    }

    fn apply(&self, state: &SystemState) -> SystemState {
        SystemState {
            theta: state.theta.iter().zip(&self.theta).map(|(a, b)| a + b).collect(),
            v: state.v.iter().zip(&self.v).map(|(a, b)| a + b).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector {
    pub bias: StateBias,
    pub z_a: MeasurementSet,
    /// Buses carrying a bias.
    pub targets: BTreeSet<usize>,
    /// Buses whose meters were rewritten: the targets and their learned
    /// neighbours.
    pub region: BTreeSet<usize>,
    pub pseudo_residual: f64,
    /// Gate verdict once checked.
    pub gate: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// The attacker's own estimate of the operator's alarm level.
    pub tau_hat: f64,
    pub margin: f64,
    pub min_samples: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau_hat: alarm_threshold(0.99, 55).expect("valid quantile"),
            margin: 0.8,
            min_samples: 200,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::validation("gate", "margin must lie in (0, 1]"));
        }
        if !(self.tau_hat > 0.0) {
            return Err(Error::validation("gate", "tau_hat must be positive"));
        }
        Ok(())
    }

    pub fn passes(&self, r_p: f64) -> bool {
        r_p <= self.margin * self.tau_hat
    }
}

/// Targets plus every bus the model joins to one of them. Rewriting the
/// meters of this region keeps injections at the neighbours consistent with
/// the biased flows.
pub fn attack_region(model: &BranchModel, targets: &BTreeSet<usize>) -> BTreeSet<usize> {
    let mut region = targets.clone();
    for &t in targets {
        region.extend(model.neighbors(t));
    }
    region
}

/// Estimate the state behind `z` with the learned model and bias it.
pub fn craft_attack(
    model: &LearnedModel,
    layout: &MeterLayout,
    z: &MeasurementSet,
    bias: &StateBias,
    cfg: &EstimatorConfig,
) -> Result<AttackVector> {
    let branches = model.branch_model();
    let est = estimate_state(z, &branches, layout, cfg).map_err(|e| e.in_stage("attacker estimation"))?;
    craft_from_estimate(&branches, layout, z, &est, bias)
}

/// `z_a = h(x_hat + c)` on the meters of the attack region, `z` elsewhere.
pub fn craft_from_estimate(
    model: &BranchModel,
    layout: &MeterLayout,
    z: &MeasurementSet,
    est: &StateEstimate,
    bias: &StateBias,
) -> Result<AttackVector> {
    let n = model.bus_count();
    if bias.bus_count() != n || bias.v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: bias.bus_count(),
        });
    }
    if z.len() != layout.len() {
        return Err(Error::Dimension {
            expected: layout.len(),
            actual: z.len(),
        });
    }
    let targets = bias.buses();
    let region = attack_region(model, &targets);
    let inc = IncidenceMatrix::from_layout(layout)?;
    let rewritten = subgraph_meters(&inc, &region)?;
    let attacked = model.measure(layout, &bias.apply(&est.state));
    let mut z_a = z.clone();
    for &m in &rewritten {
        z_a.z[m] = attacked[m];
    }
    let pseudo = pseudo_residual(&z_a, model, layout, &est.state, bias)?;
    Ok(AttackVector {
        bias: bias.clone(),
        z_a,
        targets,
        region,
        pseudo_residual: pseudo,
        gate: None,
    })
}

/// Weighted 2-norm of `z_a - h(x_hat + c)` over every meter, with the
/// operator's `1 / sigma^2` weights.
pub fn pseudo_residual(
    z_a: &MeasurementSet,
    model: &BranchModel,
    layout: &MeterLayout,
    x_hat: &SystemState,
    bias: &StateBias,
) -> Result<f64> {
    let predicted = model.measure(layout, &bias.apply(x_hat));
    weighted_residual(&z_a.z, &predicted, &z_a.weights())
}

/// Meters whose residual under the learned model exceeds their own alarm
/// level `tau_m`.
pub fn regional_residuals(
    z: &MeasurementSet,
    model: &LearnedModel,
    layout: &MeterLayout,
    tau_m: &[f64],
    cfg: &EstimatorConfig,
) -> Result<BTreeSet<usize>> {
    let est = estimate_state(z, &model.branch_model(), layout, cfg).map_err(|e| e.in_stage("attacker estimation"))?;
    flag_meters(&est, tau_m)
}

/// As [`regional_residuals`] on an existing estimate.
pub fn flag_meters(est: &StateEstimate, tau_m: &[f64]) -> Result<BTreeSet<usize>> {
    if tau_m.len() != est.meter_residuals.len() {
        return Err(Error::Dimension {
            expected: est.meter_residuals.len(),
            actual: tau_m.len(),
        });
    }
    Ok(est
        .meter_residuals
        .iter()
        .zip(tau_m)
        .enumerate()
        .filter(|(_, (r, t))| r.abs() > **t)
        .map(|(m, _)| m)
        .collect())
}

/// Target buses whose meters avoid every flagged meter.
pub fn select_attack_region(
    flagged: &BTreeSet<usize>,
    inc: &IncidenceMatrix,
    targets: &BTreeSet<usize>,
) -> Result<BTreeSet<usize>> {
    let mut feasible = BTreeSet::new();
    for &t in targets {
        let meters = subgraph_meters(inc, &BTreeSet::from([t]))?;
        if meters.is_disjoint(flagged) {
            feasible.insert(t);
        }
    }
    Ok(feasible)
}

/// The attacker's picture of meter noise, from residuals on clean snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    /// Per-meter sample standard deviation of the residual.
    pub sigma: Vec<f64>,
    /// Average of `sigma_hat^2 / sigma^2` summed over meters, per degree of
    /// freedom. One when the model explains everything but the noise.
    pub scale: f64,
    pub dof: usize,
}

impl NoiseEstimate {
    pub fn from_estimates(estimates: &[StateEstimate], sets: &[MeasurementSet], buses: usize) -> Result<Self> {
        if estimates.len() < 2 || estimates.len() != sets.len() {
            return Err(Error::validation("noise estimate", "needs at least two estimated snapshots"));
        }
        let m = estimates[0].meter_residuals.len();
        let count = estimates.len() as f64;
        let mut sigma = vec![0.0; m];
        let mut ratio = 0.0;
        for k in 0..m {
            let mean = estimates.iter().map(|e| e.meter_residuals[k]).sum::<f64>() / count;
            let var = estimates.iter().map(|e| (e.meter_residuals[k] - mean).powi(2)).sum::<f64>() / (count - 1.0);
            sigma[k] = var.sqrt();
            let reported = sets.iter().map(|s| s.sigma[k] * s.sigma[k]).sum::<f64>() / count;
            if reported > 0.0 {
                ratio += var / reported;
            }
        }
        let dof = degrees_of_freedom(m, buses);
        if dof == 0 {
            return Err(Error::validation("noise estimate", "no redundancy in the meter layout"));
        }
        Ok(NoiseEstimate {
            sigma,
            scale: ratio / dof as f64,
            dof,
        })
    }

    /// Chi-squared alarm level in weighted-residual units, inflated by the
    /// estimated noise scale.
    pub fn tau_hat(&self, confidence: f64) -> Result<f64> {
        Ok(alarm_threshold(confidence, self.dof)? * self.scale.sqrt())
    }

    /// Per-meter alarm levels at `multiple` standard deviations.
    pub fn meter_thresholds(&self, multiple: f64) -> Vec<f64> {
        self.sigma.iter().map(|s| multiple * s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasMode {
    /// Offset of `magnitude` times the angle of the target relative to the
    /// mean of its learned neighbours.
    Relative,
    /// Offset of `magnitude` radians.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackGoal {
    pub targets: Vec<usize>,
    pub mode: BiasMode,
    pub magnitude: f64,
    /// Voltage magnitude offset at each target, per unit.
    pub voltage: f64,
}

impl Default for AttackGoal {
    fn default() -> Self {
        AttackGoal {
            targets: vec![0],
            mode: BiasMode::Relative,
            magnitude: 0.15,
            voltage: 0.0,
        }
    }
}

impl AttackGoal {
    pub fn bias(&self, model: &BranchModel, x_hat: &SystemState, feasible: &BTreeSet<usize>) -> StateBias {
        let mut bias = StateBias::zero(model.bus_count());
        for &t in self.targets.iter().filter(|t| feasible.contains(t)) {
            bias.theta[t] = match self.mode {
                BiasMode::Absolute => self.magnitude,
                BiasMode::Relative => {
                    let around: Vec<f64> = model.neighbors(t).map(|k| x_hat.theta[k]).collect();
                    if around.is_empty() {
                        0.0
                    } else {
                        self.magnitude * (x_hat.theta[t] - around.iter().sum::<f64>() / around.len() as f64)
                    }
                }
            };
            bias.v[t] = self.voltage;
        }
        bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub gate: GateConfig,
    /// When false every crafted attack is launched.
    pub gating: bool,
    /// Snapshots to wait after a closed gate before relearning.
    pub relearn_interval: usize,
    /// Most recent snapshots kept for learning; zero keeps all.
    pub window: usize,
    /// Recent snapshots used to estimate noise and `tau_hat`.
    pub noise_window: usize,
    pub confidence: f64,
    /// Exclude targets whose meters show outsized residuals.
    pub regional: bool,
    /// Per-meter alarm in attacker noise standard deviations.
    pub meter_sigmas: f64,
    /// Relearn from the previous structure instead of from scratch.
    pub warm_start: bool,
    pub topology: TopologyConfig,
    pub estimator: EstimatorConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            gate: GateConfig::default(),
            gating: true,
            relearn_interval: 60,
            window: 0,
            noise_window: 30,
            confidence: 0.99,
            regional: true,
            meter_sigmas: 3.0,
            warm_start: true,
            topology: TopologyConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Collect,
    Learn,
    Wait,
    Attack,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Collect => "collect",
            Phase::Learn => "learn",
            Phase::Wait => "wait",
            Phase::Attack => "attack",
        })
    }
}

/// What the attacker did with one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopStep {
    pub t: f64,
    pub phase: Phase,
    pub samples_seen: usize,
    pub pseudo_residual: Option<f64>,
    pub tau_hat: Option<f64>,
    pub gate: Option<bool>,
    /// Injected readings, when an attack went out.
    pub launched: Option<AttackVector>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignLog {
    pub steps: Vec<LoopStep>,
    pub diagnosis: String,
}

impl CampaignLog {
    pub fn launches(&self) -> usize {
        self.steps.iter().filter(|s| s.launched.is_some()).count()
    }

    /// Time of the first passing gate.
    pub fn first_attack(&self) -> Option<f64> {
        self.steps.iter().find(|s| s.launched.is_some()).map(|s| s.t)
    }
}

/// Sequential attacker state machine: collect snapshots, learn once enough
/// are in, craft an attack on every new snapshot and launch it when the
/// pseudo-residual clears the gate; after a closed gate, wait for more data
/// and relearn.
#[derive(Debug, Clone)]
pub struct Attacker {
    layout: MeterLayout,
    goal: AttackGoal,
    cfg: LoopConfig,
    incidence: IncidenceMatrix,
    history: Vec<MeasurementSet>,
    model: Option<LearnedModel>,
    noise: Option<NoiseEstimate>,
    tau_hat: Option<f64>,
    relearn_at: usize,
    /// Installed models are never relearned.
    frozen: bool,
    /// Calibration ran on fewer snapshots than the noise window.
    partial_calibration: bool,
    last_error: Option<String>,
}

impl Attacker {
    pub fn new(layout: MeterLayout, goal: AttackGoal, cfg: LoopConfig) -> Result<Self> {
        cfg.gate.validate()?;
        if goal.targets.is_empty() || goal.targets.iter().any(|&t| t >= layout.bus_count()) {
            return Err(Error::validation("attack goal", "targets must be known bus indices"));
        }
        if cfg.noise_window < 2 || cfg.relearn_interval == 0 {
            return Err(Error::validation("attack loop", "noise window needs two snapshots and relearning a positive interval"));
        }
        let incidence = IncidenceMatrix::from_layout(&layout)?;
        let relearn_at = cfg.gate.min_samples.max(1);
        Ok(Attacker {
            layout,
            goal,
            cfg,
            incidence,
            history: Vec::new(),
            model: None,
            noise: None,
            tau_hat: None,
            relearn_at,
            frozen: false,
            partial_calibration: false,
            last_error: None,
        })
    }

    pub fn model(&self) -> Option<&LearnedModel> {
        self.model.as_ref()
    }

    /// Use an existing model instead of learning.
    pub fn install_model(&mut self, model: LearnedModel) {
        self.model = Some(model);
        self.noise = None;
        self.tau_hat = None;
        self.relearn_at = usize::MAX;
        self.frozen = true;
    }

    fn learn(&mut self) {
        let start = if self.cfg.window > 0 {
            self.history.len().saturating_sub(self.cfg.window)
        } else {
            0
        };
        let result = SampleBuffer::from_measurements(&self.layout, &self.history[start..]).and_then(|buf| match &self.model {
            Some(previous) if self.cfg.warm_start => refine_topology(previous, &buf, &self.cfg.topology),
            _ => learn_topology(&buf, &self.cfg.topology),
        });
        match result {
            Ok(model) => {
                self.model = Some(model);
                self.noise = None;
                self.tau_hat = None;
                self.last_error = None;
            }
            Err(e) => self.last_error = Some(e.to_string()),
        }
    }

    fn calibrate(&mut self) -> Result<()> {
        let model = self.model.as_ref().expect("calibrated after learning").branch_model();
        let start = self.history.len().saturating_sub(self.cfg.noise_window);
        let sets = &self.history[start..];
        let estimates = sets
            .iter()
            .map(|z| estimate_state(z, &model, &self.layout, &self.cfg.estimator))
            .collect::<Result<Vec<_>>>()?;
        let noise = NoiseEstimate::from_estimates(&estimates, sets, model.bus_count())?;
        self.tau_hat = Some(noise.tau_hat(self.cfg.confidence)?);
        self.noise = Some(noise);
        self.partial_calibration = sets.len() < self.cfg.noise_window;
        Ok(())
    }

    /// Take one snapshot, record it and decide what goes to the operator.
    pub fn observe(&mut self, z: &MeasurementSet) -> LoopStep {
        self.history.push(z.clone());
        let seen = self.history.len();
        let mut phase = Phase::Wait;
        if seen >= self.relearn_at {
            self.learn();
            phase = Phase::Learn;
            self.relearn_at = usize::MAX;
        }
        let collecting = LoopStep {
            t: z.t,
            phase: Phase::Collect,
            samples_seen: seen,
            pseudo_residual: None,
            tau_hat: None,
            gate: None,
            launched: None,
        };
        if self.model.is_none() || seen < self.cfg.gate.min_samples {
            if phase == Phase::Learn {
                self.relearn_at = seen + self.cfg.relearn_interval;
            }
            return collecting;
        }
        if self.noise.is_none() || self.partial_calibration {
            if let Err(e) = self.calibrate() {
                self.last_error = Some(e.to_string());
            }
        }
        let tau_hat = self.tau_hat.unwrap_or(self.cfg.gate.tau_hat);
        let attempt = self.attempt(z);
        let (r_p, gate, launched) = match attempt {
            Ok(mut vector) => {
                let pass = GateConfig { tau_hat, ..self.cfg.gate }.passes(vector.pseudo_residual);
                vector.gate = Some(pass);
                let r_p = vector.pseudo_residual;
                let launch = (pass || !self.cfg.gating) && !vector.targets.is_empty();
                (Some(r_p), Some(pass), launch.then_some(vector))
            }
            Err(e) => {
                self.last_error = Some(e.to_string());
                (None, Some(false), None)
            }
        };
        if launched.is_some() {
            phase = Phase::Attack;
        } else if gate == Some(false) && self.relearn_at == usize::MAX && self.cfg.gating && !self.frozen {
            self.relearn_at = seen + self.cfg.relearn_interval;
        }
        LoopStep {
            phase,
            pseudo_residual: r_p,
            tau_hat: Some(tau_hat),
            gate,
            launched,
            ..collecting
        }
    }

    fn attempt(&self, z: &MeasurementSet) -> Result<AttackVector> {
        let model = self.model.as_ref().expect("checked by caller").branch_model();
        let est = estimate_state(z, &model, &self.layout, &self.cfg.estimator).map_err(|e| e.in_stage("attacker estimation"))?;
        let targets: BTreeSet<usize> = self.goal.targets.iter().copied().collect();
        let feasible = match (&self.noise, self.cfg.regional) {
            (Some(noise), true) => {
                let flagged = flag_meters(&est, &noise.meter_thresholds(self.cfg.meter_sigmas))?;
                select_attack_region(&flagged, &self.incidence, &targets)?
            }
            _ => targets,
        };
        let bias = self.goal.bias(&model, &est.state, &feasible);
        craft_from_estimate(&model, &self.layout, z, &est, &bias)
    }

    /// Why the campaign ended the way it did.
    pub fn diagnosis(&self, log: &CampaignLog) -> String {
        if log.launches() > 0 {
            return format!("{} attacks launched", log.launches());
        }
        if self.history.len() < self.cfg.gate.min_samples {
            return "insufficient data".to_string();
        }
        match (&self.model, &self.last_error) {
            (None, Some(e)) => format!("learning failed: {e}"),
            (None, None) => "no model learned".to_string(),
            (Some(_), Some(e)) => format!("gate never passed; last error: {e}"),
            (Some(_), None) => "gate never passed".to_string(),
        }
    }
}

/// Run the attacker over a whole measurement stream.
pub fn attack_loop<'a, I>(stream: I, layout: &MeterLayout, goal: &AttackGoal, cfg: &LoopConfig) -> Result<CampaignLog>
where
    I: IntoIterator<Item = &'a MeasurementSet>,
{
    let mut attacker = Attacker::new(layout.clone(), goal.clone(), cfg.clone())?;
    let mut log = CampaignLog::default();
    let mut last_t = f64::NEG_INFINITY;
    for z in stream {
        if z.t < last_t {
            return Err(Error::validation("measurement stream", "timestamps are not monotone"));
        }
        last_t = z.t;
        log.steps.push(attacker.observe(z));
    }
    log.diagnosis = attacker.diagnosis(&log);
    Ok(log)
}
