//! Experiment harness: operator-side simulation, learning sweeps and attack
//! campaigns driven by a flat key-value configuration.
//!
//! This is the only place where the generating case, the attacker and the
//! operator meet. The attacker is handed measurement snapshots and nothing
//! else; operator residuals are computed here on whatever it transmits.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::attack::{craft_attack, craft_from_estimate, AttackGoal, Attacker, BiasMode, CampaignLog, GateConfig, LoopConfig, StateBias};
use crate::error::{Error, Result};
use crate::estimation::{alarm_threshold, degrees_of_freedom, estimate_state, write_estimate_log, EstimateLogRow, EstimatorConfig};
use crate::flow::BranchModel;
use crate::network::{MeterLayout, NetworkCase};
use crate::powerflow::{write_stream, DailyShape, LoadProfileConfig, MeasurementSet, NoiseModel, Simulator, Snapshot};
use crate::topology::{learn_topology, FineConfig, SampleBuffer, TopologyConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Case file, or `ieee14` for the bundled case.
    pub case: String,
    /// Keep line charging and off-nominal taps. Off by default: the learner
    /// fits series admittances only.
    pub line_charging: bool,
    pub noise: f64,
    pub cadence: u32,
    /// Scenario length in minutes.
    pub length: u32,
    pub fluctuation: f64,
    pub daily_amplitude: f64,
    pub peak_minute: f64,
    pub confidence: f64,
    /// External ids of attacked buses.
    pub targets: Vec<u32>,
    /// `relative` or `absolute`.
    pub bias_mode: String,
    pub bias: f64,
    pub bias_v: f64,
    pub gating: bool,
    pub margin: f64,
    pub min_samples: usize,
    pub relearn_interval: usize,
    pub window: usize,
    pub noise_window: usize,
    pub regional: bool,
    pub meter_sigmas: f64,
    pub warm_start: bool,
    pub refit_threshold: f64,
    pub max_iterations: usize,
    pub polish: bool,
    /// Sample counts swept by `learn`.
    pub sample_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            case: "ieee14".into(),
            line_charging: false,
            noise: 0.01,
            cadence: 1,
            length: 720,
            fluctuation: 0.2,
            daily_amplitude: 0.2,
            peak_minute: 1080.0,
            confidence: 0.99,
            targets: vec![1],
            bias_mode: "relative".into(),
            bias: 0.15,
            bias_v: 0.0,
            gating: true,
            margin: 0.8,
            min_samples: 200,
            relearn_interval: 60,
            window: 0,
            noise_window: 30,
            regional: true,
            meter_sigmas: 3.0,
            warm_start: true,
            refit_threshold: 0.05,
            max_iterations: 50,
            polish: true,
            sample_counts: vec![50, 100, 200, 400, 720],
            seeds: vec![1],
            out: PathBuf::from("out"),
        }
    }
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Validation {
        element: "scenario config".into(),
        message: message.into(),
    }
}

/// Parse a flag value the way a toml value would parse, falling back to a
/// bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` and then apply `key, value` overrides, which win.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        for (key, value) in overrides {
            let key = key.replace('-', "_");
            let mut parsed = override_value(value);
            // A single number passed for a list key means a one-element list.
            if matches!(key.as_str(), "targets" | "seeds" | "sample_counts") && !parsed.is_array() {
                parsed = toml::Value::Array(vec![parsed]);
            }
            if matches!(key.as_str(), "case" | "bias_mode" | "out") && !parsed.is_str() {
                parsed = toml::Value::String(value.clone());
            }
            table.insert(key, parsed);
        }
        let cfg: ScenarioConfig = table.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        // Relative case paths resolve against the config file.
        if cfg.case != "ieee14" && Path::new(&cfg.case).is_relative() {
            if let Some(dir) = path.parent() {
                let candidate = dir.join(&cfg.case);
                if candidate.exists() {
                    cfg.case = candidate.to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 1 {
            return Err(config_error("length must be at least 1 minute"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seed list is empty"));
        }
        if !(self.noise >= 0.0) {
            return Err(config_error("noise must be non-negative"));
        }
        if self.targets.is_empty() {
            return Err(config_error("no target buses"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(config_error("confidence must lie in (0, 1)"));
        }
        self.bias_mode()?;
        self.profile(0).validate()?;
        GateConfig {
            margin: self.margin,
            ..GateConfig::default()
        }
        .validate()?;
        Ok(())
    }

    fn bias_mode(&self) -> Result<BiasMode> {
        match self.bias_mode.as_str() {
            "relative" => Ok(BiasMode::Relative),
            "absolute" => Ok(BiasMode::Absolute),
            other => Err(config_error(format!("unknown bias_mode {other:?}"))),
        }
    }

    pub fn load_case(&self) -> Result<NetworkCase> {
        let case = if self.case == "ieee14" {
            NetworkCase::ieee14()
        } else {
            NetworkCase::from_file(&self.case)?
        };
        Ok(if self.line_charging { case } else { case.series_equivalent() })
    }

    pub fn profile(&self, seed: u64) -> LoadProfileConfig {
        LoadProfileConfig {
            shape: DailyShape::Sinusoid {
                amplitude: self.daily_amplitude,
                peak_minute: self.peak_minute,
            },
            fluctuation: self.fluctuation,
            seed,
            cadence: self.cadence,
        }
    }

    /// Snapshots in the scenario.
    pub fn snapshot_count(&self) -> usize {
        (self.length / self.cadence).max(1) as usize
    }

    pub fn simulator(&self, case: &NetworkCase, seed: u64) -> Result<Simulator> {
        let layout = MeterLayout::full(case);
        Simulator::new(case.clone(), layout, self.profile(seed), NoiseModel::new(self.noise))
    }

    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig {
            min_samples: 1,
            refit_threshold: self.refit_threshold,
            polish: self.polish,
            fine: FineConfig {
                max_iterations: self.max_iterations,
                ..FineConfig::default()
            },
            ..TopologyConfig::default()
        }
    }

    pub fn goal(&self, case: &NetworkCase) -> Result<AttackGoal> {
        let targets = self
            .targets
            .iter()
            .map(|&id| case.bus_index(id).ok_or_else(|| config_error(format!("target bus {id} is not in the case"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttackGoal {
            targets,
            mode: self.bias_mode()?,
            magnitude: self.bias,
            voltage: self.bias_v,
        })
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            gate: GateConfig {
                margin: self.margin,
                min_samples: self.min_samples,
                ..GateConfig::default()
            },
            gating: self.gating,
            relearn_interval: self.relearn_interval,
            window: self.window,
            noise_window: self.noise_window,
            confidence: self.confidence,
            regional: self.regional,
            meter_sigmas: self.meter_sigmas,
            warm_start: self.warm_start,
            topology: self.topology(),
            estimator: EstimatorConfig {
                confidence: self.confidence,
                ..EstimatorConfig::default()
            },
        }
    }
}

/// The operator's side: true model, estimator and alarm level.
#[derive(Debug, Clone)]
pub struct Operator {
    pub model: BranchModel,
    pub layout: MeterLayout,
    pub estimator: EstimatorConfig,
    pub tau: f64,
}

impl Operator {
    pub fn new(case: &NetworkCase, confidence: f64) -> Result<Self> {
        let layout = MeterLayout::full(case);
        let tau = alarm_threshold(confidence, degrees_of_freedom(layout.len(), case.bus_count()))?;
        Ok(Operator {
            model: case.branch_model(),
            layout,
            estimator: EstimatorConfig {
                confidence,
                ..EstimatorConfig::default()
            },
            tau,
        })
    }

    /// Weighted residual and alarm on transmitted readings.
    pub fn check(&self, z: &MeasurementSet) -> Result<(f64, bool)> {
        let est = estimate_state(z, &self.model, &self.layout, &self.estimator)?;
        Ok((est.weighted_residual, est.weighted_residual > self.tau))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_context(path, e))?))
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateReport {
    pub seed: u64,
    pub snapshots: usize,
    pub alarms: usize,
}

/// Per seed: `stream.csv` with every meter reading and `estimates.csv` with
/// the operator's residual on each snapshot.
pub fn cmd_simulate(cfg: &ScenarioConfig) -> Result<Vec<SimulateReport>> {
    cfg.validate()?;
    let case = cfg.load_case()?;
    let operator = Operator::new(&case, cfg.confidence)?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let sim = cfg.simulator(&case, seed)?;
            let snaps = sim.run(cfg.snapshot_count())?;
            let sets: Vec<MeasurementSet> = snaps.iter().map(|s| s.measurements.clone()).collect();
            let rows = sets
                .iter()
                .map(|z| {
                    let est = estimate_state(z, &operator.model, &operator.layout, &operator.estimator)?;
                    Ok(EstimateLogRow {
                        t: z.t,
                        r: est.weighted_residual,
                        tau: operator.tau,
                        alarm: est.weighted_residual > operator.tau,
                        iterations: est.iterations,
                        converged: est.converged,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = seed_dir(&cfg.out, seed);
            let mut stream = create(&dir.join("stream.csv"))?;
            write_stream(&mut stream, &sim.layout, &sets)?;
            stream.flush()?;
            let mut log = create(&dir.join("estimates.csv"))?;
            write_estimate_log(&mut log, &rows)?;
            log.flush()?;
            Ok(SimulateReport {
                seed,
                snapshots: sets.len(),
                alarms: rows.iter().filter(|r| r.alarm).count(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnRow {
    pub samples: usize,
    pub seed: u64,
    pub pseudo_residual: Option<f64>,
    pub alarm: f64,
    pub error: Option<String>,
}

impl LearnRow {
    pub fn under_alarm(&self) -> bool {
        self.pseudo_residual.is_some_and(|r| r < self.alarm)
    }
}

/// The reference attack on a held-out snapshot, scored by the attacker's
/// pseudo-residual under a model learned from the first `samples` snapshots.
pub fn reference_attack_residual(
    snaps: &[Snapshot],
    samples: usize,
    layout: &MeterLayout,
    goal: &AttackGoal,
    topology: &TopologyConfig,
    estimator: &EstimatorConfig,
) -> Result<f64> {
    if snaps.len() <= samples {
        return Err(config_error("no held-out snapshot after the training window"));
    }
    let sets: Vec<MeasurementSet> = snaps[..samples].iter().map(|s| s.measurements.clone()).collect();
    let buf = SampleBuffer::from_measurements(layout, &sets)?;
    let model = learn_topology(&buf, topology)?;
    let held = &snaps[samples].measurements;
    let branches = model.branch_model();
    let est = estimate_state(held, &branches, layout, estimator).map_err(|e| e.in_stage("attacker estimation"))?;
    let all: BTreeSet<usize> = goal.targets.iter().copied().collect();
    let bias = goal.bias(&branches, &est.state, &all);
    Ok(craft_attack(&model, layout, held, &bias, estimator)?.pseudo_residual)
}

/// Learning sweep over `sample_counts` for every seed; writes `learn.csv`.
pub fn cmd_learn(cfg: &ScenarioConfig) -> Result<Vec<LearnRow>> {
    cfg.validate()?;
    let case = cfg.load_case()?;
    let operator = Operator::new(&case, cfg.confidence)?;
    let goal = cfg.goal(&case)?;
    let topology = cfg.topology();
    let estimator = EstimatorConfig {
        confidence: cfg.confidence,
        ..EstimatorConfig::default()
    };
    let longest = cfg.sample_counts.iter().copied().max().unwrap_or(0);
    let per_seed: Vec<Vec<LearnRow>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let sim = cfg.simulator(&case, seed)?;
            let snaps = sim.run(longest + 1)?;
            Ok(cfg
                .sample_counts
                .iter()
                .map(|&samples| {
                    let result = reference_attack_residual(&snaps, samples, &operator.layout, &goal, &topology, &estimator);
                    LearnRow {
                        samples,
                        seed,
                        pseudo_residual: result.as_ref().ok().copied(),
                        alarm: operator.tau,
                        error: result.err().map(|e| e.to_string()),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<LearnRow> = per_seed.into_iter().flatten().collect();
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("learn.csv"))?);
    w.write_record(["T", "seed", "r_p", "alarm", "under_alarm", "error"])?;
    for row in &rows {
        w.write_record([
            row.samples.to_string(),
            row.seed.to_string(),
            row.pseudo_residual.map_or_else(String::new, |r| r.to_string()),
            row.alarm.to_string(),
            (row.under_alarm() as u8).to_string(),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// One campaign step with the operator's view attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignRow {
    pub operator_r: f64,
    pub operator_alarm: bool,
    /// Operator verdict had the crafted attack been sent regardless of the
    /// gate.
    pub ungated_alarm: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignOutcome {
    pub seed: u64,
    pub log: CampaignLog,
    pub rows: Vec<CampaignRow>,
    /// Launches and the meters in each that were left untouched by the
    /// attacked region, checked against the clean readings.
    pub masking_violations: usize,
}

impl CampaignOutcome {
    pub fn launched_alarms(&self) -> usize {
        self.log
            .steps
            .iter()
            .zip(&self.rows)
            .filter(|(s, r)| s.launched.is_some() && r.operator_alarm)
            .count()
    }

    pub fn crafted(&self) -> impl Iterator<Item = bool> + '_ {
        self.rows.iter().filter_map(|r| r.ungated_alarm)
    }
}

/// Meters outside the attacked region's incidence columns that differ from
/// the clean readings.
pub fn masking_violations(layout: &MeterLayout, clean: &MeasurementSet, attacked: &MeasurementSet, region: &BTreeSet<usize>) -> usize {
    layout
        .meters
        .iter()
        .enumerate()
        .filter(|(m, meter)| {
            !meter.buses().iter().any(|b| region.contains(&b)) && clean.z[*m].to_bits() != attacked.z[*m].to_bits()
        })
        .count()
}

/// Run one attacker against a live simulation.
pub fn run_campaign(cfg: &ScenarioConfig, case: &NetworkCase, seed: u64) -> Result<CampaignOutcome> {
    let operator = Operator::new(case, cfg.confidence)?;
    let sim = cfg.simulator(case, seed)?;
    let goal = cfg.goal(case)?;
    let loop_cfg = cfg.loop_config();
    let mut attacker = Attacker::new(sim.layout.clone(), goal.clone(), loop_cfg.clone())?;
    let mut log = CampaignLog::default();
    let mut rows = Vec::new();
    let mut violations = 0;
    for k in 0..cfg.snapshot_count() {
        let snap = sim.snapshot(k)?;
        let z = &snap.measurements;
        let step = attacker.observe(z);
        let sent = step.launched.as_ref().map_or(z, |a| &a.z_a);
        let (operator_r, operator_alarm) = operator.check(sent)?;
        if let Some(a) = &step.launched {
            violations += masking_violations(&sim.layout, z, &a.z_a, &a.region);
        }
        // The harness re-crafts the attack when the gate held it back, so
        // that the ungated detection rate comes from the same run.
        let ungated_alarm = match (&step.launched, step.gate, attacker.model()) {
            (Some(_), _, _) => Some(operator_alarm),
            (None, Some(false), Some(model)) => {
                let branches = model.branch_model();
                let crafted = estimate_state(z, &branches, &sim.layout, &loop_cfg.estimator).ok().and_then(|est| {
                    let all: BTreeSet<usize> = goal.targets.iter().copied().collect();
                    let bias: StateBias = goal.bias(&branches, &est.state, &all);
                    craft_from_estimate(&branches, &sim.layout, z, &est, &bias).ok()
                });
                match crafted {
                    Some(a) if !a.targets.is_empty() => Some(operator.check(&a.z_a)?.1),
                    _ => None,
                }
            }
            _ => None,
        };
        rows.push(CampaignRow {
            operator_r,
            operator_alarm,
            ungated_alarm,
        });
        log.steps.push(step);
    }
    log.diagnosis = attacker.diagnosis(&log);
    Ok(CampaignOutcome {
        seed,
        log,
        rows,
        masking_violations: violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub outcomes: Vec<CampaignOutcome>,
    /// Share of crafted attacks the operator would flag if all were sent.
    pub ungated_detection: Option<f64>,
    /// Share of launched attacks the operator flagged.
    pub gated_detection: Option<f64>,
    /// Median over seeds of the first launch time, minutes.
    pub median_first_attack: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Campaigns for every seed; writes `seed-N/campaign.csv` and
/// `summary.csv`.
pub fn cmd_campaign(cfg: &ScenarioConfig) -> Result<CampaignSummary> {
    cfg.validate()?;
    let case = cfg.load_case()?;
    let outcomes: Vec<CampaignOutcome> = cfg.seeds.par_iter().map(|&seed| run_campaign(cfg, &case, seed)).collect::<Result<_>>()?;
    let operator_tau = Operator::new(&case, cfg.confidence)?.tau;
    for outcome in &outcomes {
        let mut w = csv::Writer::from_writer(create(&seed_dir(&cfg.out, outcome.seed).join("campaign.csv"))?);
        w.write_record(["t", "phase", "samples_seen", "r_p", "tau_hat", "gate", "launched", "operator_r", "operator_alarm"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for (step, row) in outcome.log.steps.iter().zip(&outcome.rows) {
            w.write_record([
                step.t.to_string(),
                step.phase.to_string(),
                step.samples_seen.to_string(),
                opt(step.pseudo_residual),
                opt(step.tau_hat),
                step.gate.map_or_else(String::new, |g| (g as u8).to_string()),
                (step.launched.is_some() as u8).to_string(),
                row.operator_r.to_string(),
                (row.operator_alarm as u8).to_string(),
            ])?;
        }
        w.flush()?;
    }
    let crafted: Vec<bool> = outcomes.iter().flat_map(|o| o.crafted()).collect();
    let launches: usize = outcomes.iter().map(|o| o.log.launches()).sum();
    let launched_alarms: usize = outcomes.iter().map(|o| o.launched_alarms()).sum();
    let summary = CampaignSummary {
        ungated_detection: rate(crafted.iter().filter(|&&a| a).count(), crafted.len()),
        gated_detection: rate(launched_alarms, launches),
        median_first_attack: median(outcomes.iter().filter_map(|o| o.log.first_attack()).collect()),
        outcomes,
    };
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("summary.csv"))?);
    w.write_record(["seed", "launches", "launched_alarms", "first_attack", "operator_tau", "diagnosis"])?;
    for o in &summary.outcomes {
        w.write_record([
            o.seed.to_string(),
            o.log.launches().to_string(),
            o.launched_alarms().to_string(),
            o.log.first_attack().map_or_else(String::new, |t| t.to_string()),
            operator_tau.to_string(),
            o.log.diagnosis.clone(),
        ])?;
    }
    w.flush()?;
    Ok(summary)
}
