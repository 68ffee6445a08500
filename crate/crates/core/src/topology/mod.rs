//! Branch topology and parameter identification from injection and voltage
//! snapshots, in two stages: a linear small-angle regression that suggests
//! the incidence, then a nonlinear fit of the surviving branches.

mod buffer;
mod coarse;
mod fine;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

pub use buffer::SampleBuffer;
pub use coarse::{coarse_identify, prune_incidence, CoarseConfig, CoarseEstimate, Ridge};
pub use fine::{fine_identify, identification_blocks, FineConfig};

use nalgebra::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{BranchModel, Line};
use crate::graph;

/// A branch as the attacker believes it to be: series conductance and
/// susceptance between two bus indices (`from < to`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnedBranch {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel {
    pub bus_ids: Vec<u32>,
    pub reference: usize,
    pub branches: Vec<LearnedBranch>,
    /// Per snapshot, fitted angles of every bus.
    pub theta: Vec<Vec<f64>>,
    /// Square root of the final fit objective.
    pub mismatch: f64,
    pub history: Vec<f64>,
    pub iterations: usize,
    pub samples: usize,
}

impl LearnedModel {
    pub fn bus_count(&self) -> usize {
        self.bus_ids.len()
    }

    /// Inferred incidence as unordered bus-index pairs.
    pub fn incidence(&self) -> BTreeSet<(usize, usize)> {
        self.branches.iter().map(|b| (b.from.min(b.to), b.from.max(b.to))).collect()
    }

    /// The estimated measurement function over this branch set.
    pub fn branch_model(&self) -> BranchModel {
        let lines = self.branches.iter().map(|b| Line::series(b.from, b.to, b.g, b.b)).collect();
        BranchModel::new(self.bus_count(), self.reference, lines)
    }

    pub fn branch(&self, from: usize, to: usize) -> Option<&LearnedBranch> {
        self.branches
            .iter()
            .find(|b| (b.from == from && b.to == to) || (b.from == to && b.to == from))
    }

    /// Text form: header metadata then one `from to g b` line per branch,
    /// buses given by external id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ids: Vec<String> = self.bus_ids.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "buses {}", ids.join(" "));
        let _ = writeln!(s, "reference {}", self.bus_ids[self.reference]);
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "iterations {}", self.iterations);
        let _ = writeln!(s, "mismatch {}", self.mismatch);
        let _ = writeln!(s, "# from to g b");
        for b in &self.branches {
            let _ = writeln!(s, "{} {} {} {}", self.bus_ids[b.from], self.bus_ids[b.to], b.g, b.b);
        }
        s
    }

    /// Inverse of [`LearnedModel::to_text`]. Per-snapshot angles and the
    /// iterate history are not stored and come back empty.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut bus_ids: Option<Vec<u32>> = None;
        let (mut reference, mut samples, mut iterations, mut mismatch) = (None, 0, 0, f64::NAN);
        let mut raw = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line_no = k + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr(format!("bad number '{s}'")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| perr(format!("bad integer '{s}'")));
            let id = |s: &str| s.parse::<u32>().map_err(|_| perr(format!("bad bus id '{s}'")));
            match fields[0] {
                "buses" => bus_ids = Some(fields[1..].iter().map(|f| id(f)).collect::<Result<_>>()?),
                "reference" if fields.len() == 2 => reference = Some(id(fields[1])?),
                "samples" if fields.len() == 2 => samples = int(fields[1])?,
                "iterations" if fields.len() == 2 => iterations = int(fields[1])?,
                "mismatch" if fields.len() == 2 => mismatch = num(fields[1])?,
                _ if fields.len() == 4 => raw.push((line_no, id(fields[0])?, id(fields[1])?, num(fields[2])?, num(fields[3])?)),
                _ => return Err(perr(format!("unrecognized line '{content}'"))),
            }
        }
        let bus_ids = bus_ids.ok_or_else(|| Error::validation("learned model", "missing 'buses' line"))?;
        let index = |id: u32, line: usize| {
            bus_ids.iter().position(|&b| b == id).ok_or(Error::Parse {
                line,
                message: format!("unknown bus {id}"),
            })
        };
        let reference = match reference {
            Some(id) => index(id, 0)?,
            None => 0,
        };
        let branches = raw
            .into_iter()
            .map(|(line, f, t, g, b)| {
                Ok(LearnedBranch {
                    from: index(f, line)?,
                    to: index(t, line)?,
                    g,
                    b,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LearnedModel {
            bus_ids,
            reference,
            branches,
            theta: Vec::new(),
            mismatch,
            history: Vec::new(),
            iterations,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Where the fine stage's candidate branches come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidates {
    /// Pairs surviving [`prune_incidence`] at this threshold.
    Pruned(f64),
    /// Every bus pair; the fit itself drives absent branches to zero.
    Complete,
}

/// Initial branch values for the fine stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Start {
    /// Negated off-diagonal coarse entries.
    Coarse,
    /// The same conductance and susceptance on every candidate.
    Flat { g: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub min_samples: usize,
    pub coarse: CoarseConfig,
    pub candidates: Candidates,
    pub start: Start,
    /// After the fit, drop branches whose `|g + jb|` falls below this
    /// fraction of the largest and refit the rest. Zero disables.
    pub refit_threshold: f64,
    pub fine: FineConfig,
    /// Finish with voltages estimated and rows weighted by meter accuracy,
    /// starting from the learned structure. Skipped for noiseless buffers.
    pub polish: bool,
    /// Iteration cap for each stage of [`refine_topology`].
    pub refine_iterations: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            min_samples: 200,
            coarse: CoarseConfig::default(),
            candidates: Candidates::Complete,
            start: Start::Flat { g: 0.0, b: -1.0 },
            refit_threshold: 0.05,
            fine: FineConfig::default(),
            polish: true,
            refine_iterations: 10,
        }
    }
}

/// Snapshots used to compare lifted candidates before the full refit.
const LIFT_SCREEN_SAMPLES: usize = 120;
const LIFT_SCREEN_ITERATIONS: usize = 12;
/// More stranded buses than this point at a poor fit rather than a folded
/// zero-injection bus.
const LIFT_MAX_STRANDED: usize = 2;
/// Lift variants screened per stranded bus. A graph dense enough to exceed
/// this is a noise-dominated fit; a folded star leaves a sparse one.
const LIFT_MAX_VARIANTS: usize = 128;

fn series_admittance(b: &LearnedBranch) -> Complex<f64> {
    Complex::new(b.g, b.b)
}

/// Edges and triangles of the branch graph.
fn small_cliques(branches: &[LearnedBranch], buses: usize) -> Vec<Vec<usize>> {
    let mut adjacent = vec![BTreeSet::new(); buses];
    for b in branches {
        adjacent[b.from].insert(b.to);
        adjacent[b.to].insert(b.from);
    }
    let mut out = Vec::new();
    for a in 0..buses {
        for &b in adjacent[a].range(a + 1..) {
            for &c in adjacent[b].range(b + 1..) {
                if adjacent[a].contains(&c) {
                    out.push(vec![a, b, c]);
                }
            }
        }
    }
    for b in branches {
        out.push(vec![b.from.min(b.to), b.from.max(b.to)]);
    }
    out
}

/// Starting branch list that undoes the star-to-clique reduction of `bus`
/// over `clique`. A star from `bus` takes over the clique admittance; clique
/// edges whose bit is set in `keep` stay in at zero, the rest are dropped.
fn lift_star(branches: &[LearnedBranch], bus: usize, clique: &[usize], keep: u32) -> Vec<LearnedBranch> {
    let between = |a: usize, b: usize| {
        branches
            .iter()
            .find(|x| (x.from == a && x.to == b) || (x.from == b && x.to == a))
            .map_or(Complex::new(0.0, 0.0), series_admittance)
    };
    let star: Vec<(usize, Complex<f64>)> = match clique {
        [a, b] => vec![(*a, between(*a, *b) * 2.0), (*b, between(*a, *b) * 2.0)],
        [a, b, c] => {
            let (ab, bc, ca) = (between(*a, *b), between(*b, *c), between(*c, *a));
            let p = ab * bc + bc * ca + ca * ab;
            vec![(*a, p / bc), (*b, p / ca), (*c, p / ab)]
        }
        _ => Vec::new(),
    };
    let pairs: Vec<(usize, usize)> = clique
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| clique[i + 1..].iter().map(move |&b| (a, b)))
        .collect();
    let mut out = Vec::new();
    for x in branches {
        match pairs.iter().position(|&(a, b)| (x.from == a && x.to == b) || (x.from == b && x.to == a)) {
            Some(k) if keep & (1 << k) != 0 => out.push(LearnedBranch { g: 0.0, b: 0.0, ..*x }),
            Some(_) => {}
            None => out.push(*x),
        }
    }
    for (other, y) in star {
        out.retain(|x| !((x.from == bus && x.to == other) || (x.from == other && x.to == bus)));
        out.push(LearnedBranch {
            from: bus.min(other),
            to: bus.max(other),
            g: y.re.max(0.0),
            b: y.im,
        });
    }
    out
}

fn admittance(b: &LearnedBranch) -> f64 {
    b.g.hypot(b.b)
}

/// Branches whose `|g + jb|` reaches `fraction` of the largest.
fn significant(branches: &[LearnedBranch], fraction: f64) -> Vec<LearnedBranch> {
    let largest = branches.iter().map(admittance).fold(0.0, f64::max);
    branches.iter().copied().filter(|b| admittance(b) >= fraction * largest).collect()
}

fn stranded_buses(branches: &[LearnedBranch], buses: usize) -> BTreeSet<usize> {
    let mut touched = vec![false; buses];
    for b in branches {
        touched[b.from] = true;
        touched[b.to] = true;
    }
    (0..buses).filter(|&k| !touched[k]).collect()
}

/// Coarse regression, candidate selection, fine fit and optional refit in
/// sequence. Errors carry the name of the stage that raised them.
pub fn learn_topology(buf: &SampleBuffer, cfg: &TopologyConfig) -> Result<LearnedModel> {
    if buf.len() < cfg.min_samples {
        return Err(Error::validation(
            "sample buffer",
            format!("{} snapshots, at least {} required", buf.len(), cfg.min_samples),
        ));
    }
    let n = buf.bus_count();
    let coarse = coarse_identify(buf, &cfg.coarse).map_err(|e| e.in_stage("coarse regression"))?;
    let mut initial = match cfg.candidates {
        Candidates::Pruned(threshold) => prune_incidence(&coarse, threshold).map_err(|e| e.in_stage("pruning"))?,
        Candidates::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(from, to)| LearnedBranch {
                from,
                to,
                g: -0.5 * (coarse.g[(from, to)] + coarse.g[(to, from)]),
                b: -0.5 * (coarse.b[(from, to)] + coarse.b[(to, from)]),
            })
            .collect(),
    };
    if let Start::Flat { g, b } = cfg.start {
        for branch in &mut initial {
            branch.g = g;
            branch.b = b;
        }
    }
    let mut model = fine_identify(&initial, buf, &cfg.fine).map_err(|e| e.in_stage("fine identification"))?;
    if cfg.refit_threshold <= 0.0 {
        return Ok(model);
    }
    let kept = significant(&model.branches, cfg.refit_threshold);
    if kept.len() < model.branches.len() {
        model = fine_identify(&kept, buf, &cfg.fine).map_err(|e| e.in_stage("refit"))?;
    }
    // A bus whose injection is identically zero can be dropped from the
    // network without changing any other injection: the star around it folds
    // into a clique between its neighbours. Metered buses belong to the grid,
    // so each stranded bus is lifted back out of every small clique, with
    // every subset of the clique edges, and the sparsest adequate fit kept.
    let screen = buf.tail(LIFT_SCREEN_SAMPLES);
    let floor = fine::rounding_floor(&screen, &cfg.fine);
    let rows = screen.len() as f64 * if cfg.fine.estimate_voltage { 3.0 } else { 2.0 } * n as f64;
    let screen_cfg = FineConfig {
        max_iterations: LIFT_SCREEN_ITERATIONS,
        ..cfg.fine
    };
    let stranded = stranded_buses(&model.branches, n);
    let stranded = if stranded.len() <= LIFT_MAX_STRANDED { stranded } else { BTreeSet::new() };
    let score = |m: &LearnedModel| (m.mismatch.powi(2) + floor * floor).ln() + 4.0 * m.branches.len() as f64 / rows;
    for bus in stranded {
        let starts: Vec<Vec<LearnedBranch>> = small_cliques(&model.branches, n)
            .into_iter()
            .filter(|c| !c.contains(&bus))
            .flat_map(|c| {
                let variants = 1u32 << (c.len() * (c.len() - 1) / 2);
                let base = &model.branches;
                (0..variants).map(move |keep| lift_star(base, bus, &c, keep))
            })
            .collect();
        if starts.len() > LIFT_MAX_VARIANTS {
            continue;
        }
        let best = starts
            .par_iter()
            .filter_map(|start| {
                let fit = fine_identify(start, &screen, &screen_cfg).ok()?;
                significant(&fit.branches, cfg.refit_threshold)
                    .iter()
                    .any(|b| b.from == bus || b.to == bus)
                    .then_some(fit)
            })
            .min_by(|a, b| score(a).total_cmp(&score(b)));
        if let Some(lifted) = best {
            let kept = significant(&lifted.branches, cfg.refit_threshold);
            model = fine_identify(&kept, buf, &cfg.fine).map_err(|e| e.in_stage("refit"))?;
        }
    }
    let edges: Vec<_> = model.branches.iter().map(|b| (b.from, b.to)).collect();
    let components = graph::component_count(n, &edges);
    if components != 1 {
        return Err(Error::Disconnected { components }.in_stage("refit"));
    }
    polish(model, buf, cfg)
}

fn polish(model: LearnedModel, buf: &SampleBuffer, cfg: &TopologyConfig) -> Result<LearnedModel> {
    let metered = [&buf.sigma_p, &buf.sigma_q, &buf.sigma_v]
        .iter()
        .all(|m| m.iter().all(|&s| s > 0.0 && s.is_finite()));
    if !(cfg.polish && metered) {
        return Ok(model);
    }
    let polish = FineConfig {
        estimate_voltage: true,
        weighted: true,
        ..cfg.fine
    };
    fine_identify(&model.branches, buf, &polish).map_err(|e| e.in_stage("polish"))
}

/// Refit a previously learned structure on a new buffer, skipping structure
/// search.
pub fn refine_topology(previous: &LearnedModel, buf: &SampleBuffer, cfg: &TopologyConfig) -> Result<LearnedModel> {
    if buf.len() < cfg.min_samples {
        return Err(Error::validation(
            "sample buffer",
            format!("{} snapshots, at least {} required", buf.len(), cfg.min_samples),
        ));
    }
    if previous.bus_count() != buf.bus_count() {
        return Err(Error::Dimension {
            expected: previous.bus_count(),
            actual: buf.bus_count(),
        });
    }
    let capped = TopologyConfig {
        fine: FineConfig {
            max_iterations: cfg.refine_iterations,
            ..cfg.fine
        },
        ..cfg.clone()
    };
    let model = fine_identify(&previous.branches, buf, &capped.fine).map_err(|e| e.in_stage("fine identification"))?;
    polish(model, buf, &capped)
}
