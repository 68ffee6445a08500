use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{BranchModel, Line};
use crate::graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl BusKind {
    fn parse(token: &str) -> Option<Self> {
        match token.to_ascii_lowercase().as_str() {
            "slack" | "ref" => Some(BusKind::Slack),
            "pv" => Some(BusKind::Pv),
            "pq" => Some(BusKind::Pq),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Pv => "pv",
            BusKind::Pq => "pq",
        }
    }
}

/// A bus record. Power quantities are per-unit on the case base.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    /// Scheduled real generation (PV and slack buses).
    pub p_gen: f64,
    /// Voltage setpoint (PV and slack buses).
    pub v_set: f64,
}

/// A branch record using the standard pi model.
///
/// `r` and `x` are kept as read so that serializing a case reproduces it
/// exactly; `g` and `b` are the derived series conductance and susceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Index of the from bus in [`NetworkCase::buses`].
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub g: f64,
    pub b: f64,
    /// Shunt susceptance at each end.
    pub b_sh: f64,
    /// Off-nominal turns ratio at the from end.
    pub tap: f64,
}

impl Branch {
    pub fn from_impedance(from: usize, to: usize, r: f64, x: f64, b_sh: f64, tap: f64) -> Self {
        let z2 = r * r + x * x;
        Branch {
            from,
            to,
            r,
            x,
            g: r / z2,
            b: -x / z2,
            b_sh,
            tap,
        }
    }
}

/// Static grid description. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// Index of the slack bus.
    pub slack: usize,
}

impl NetworkCase {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_ids(&self) -> Vec<u32> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_case(&text)
    }

    /// The bundled IEEE 14-bus case.
    pub fn ieee14() -> Self {
        parse_case(include_str!("../../../../cases/ieee14.case")).expect("bundled case is valid")
    }

    /// Same topology and series parameters with line charging removed and all
    /// taps nominal: the branch model the topology learner can represent.
    pub fn series_equivalent(&self) -> Self {
        let mut case = self.clone();
        for br in &mut case.branches {
            br.b_sh = 0.0;
            br.tap = 1.0;
        }
        case
    }

    pub fn branch_model(&self) -> BranchModel {
        let lines = self
            .branches
            .iter()
            .map(|br| Line {
                from: br.from,
                to: br.to,
                g: br.g,
                b: br.b,
                b_sh: br.b_sh,
                tap: br.tap,
            })
            .collect();
        BranchModel::new(self.bus_count(), self.slack, lines)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(Error::validation(format!("bus {}", bus.id), "duplicate bus id"));
            }
        }
        match self.buses.iter().filter(|b| b.kind == BusKind::Slack).count() {
            1 => {}
            0 => return Err(Error::validation("case", "no slack bus")),
            k => return Err(Error::validation("case", format!("{k} slack buses, expected exactly one"))),
        }
        let mut pairs = HashSet::new();
        for (k, br) in self.branches.iter().enumerate() {
            let name = format!("branch {} ({}-{})", k + 1, self.buses[br.from].id, self.buses[br.to].id);
            if br.from == br.to {
                return Err(Error::validation(name, "self loop"));
            }
            if !(br.g >= 0.0) {
                return Err(Error::validation(name, "negative series conductance"));
            }
            if !(br.tap > 0.0) || !br.b_sh.is_finite() || !br.b.is_finite() {
                return Err(Error::validation(name, "non-finite or non-positive parameter"));
            }
            if !pairs.insert((br.from.min(br.to), br.from.max(br.to))) {
                return Err(Error::validation(name, "parallel branch"));
            }
        }
        let edges: Vec<_> = self.branches.iter().map(|b| (b.from, b.to)).collect();
        let components = graph::component_count(self.bus_count(), &edges);
        if components != 1 {
            return Err(Error::validation("case", format!("branch graph has {components} islands")));
        }
        Ok(())
    }

    /// Serialize in the sectioned case format read by [`parse_case`].
    pub fn to_case_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[case]\nbase_mva {}\n\n[buses]", self.base_mva);
        for bus in &self.buses {
            let _ = write!(out, "{} {} {} {}", bus.id, bus.kind.label(), bus.p_load, bus.q_load);
            if bus.kind != BusKind::Pq {
                let _ = write!(out, " {} {}", bus.p_gen, bus.v_set);
            }
            out.push('\n');
        }
        out.push_str("\n[branches]\n");
        for br in &self.branches {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                self.buses[br.from].id, self.buses[br.to].id, br.r, br.x, br.b_sh, br.tap
            );
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Case,
    Buses,
    Branches,
}

fn number(token: &str, line: usize, what: &str) -> Result<f64> {
    token.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what} '{token}'"),
    })
}

/// Parse and validate a case file.
pub fn parse_case(text: &str) -> Result<NetworkCase> {
    let mut section = Section::None;
    let mut base_mva = 100.0;
    let mut buses = Vec::new();
    // (line, from id, to id, r, x, b_sh, tap)
    let mut raw_branches = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            section = match content {
                "[case]" => Section::Case,
                "[buses]" => Section::Buses,
                "[branches]" => Section::Branches,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown section {other}"),
                    })
                }
            };
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::None => {
                return Err(Error::Parse {
                    line,
                    message: "data outside of a section".into(),
                })
            }
            Section::Case => match tokens.as_slice() {
                ["base_mva", v] => base_mva = number(v, line, "base_mva")?,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown case key '{}'", tokens[0]),
                    })
                }
            },
            Section::Buses => {
                if tokens.len() != 4 && tokens.len() != 6 {
                    return Err(Error::Parse {
                        line,
                        message: format!("bus line needs 4 or 6 fields, found {}", tokens.len()),
                    });
                }
                let id = tokens[0].parse::<u32>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad bus id '{}'", tokens[0]),
                })?;
                let kind = BusKind::parse(tokens[1]).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad bus type '{}'", tokens[1]),
                })?;
                let (p_gen, v_set) = if tokens.len() == 6 {
                    (number(tokens[4], line, "pgen")?, number(tokens[5], line, "vset")?)
                } else {
                    (0.0, 1.0)
                };
                if !(v_set > 0.0) {
                    return Err(Error::Parse {
                        line,
                        message: "voltage setpoint must be positive".into(),
                    });
                }
                buses.push(Bus {
                    id,
                    kind,
                    p_load: number(tokens[2], line, "pload")?,
                    q_load: number(tokens[3], line, "qload")?,
                    p_gen,
                    v_set,
                });
            }
            Section::Branches => {
                if tokens.len() != 5 && tokens.len() != 6 {
                    return Err(Error::Parse {
                        line,
                        message: format!("branch line needs 5 or 6 fields, found {}", tokens.len()),
                    });
                }
                let from = tokens[0].parse::<u32>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad from bus '{}'", tokens[0]),
                })?;
                let to = tokens[1].parse::<u32>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad to bus '{}'", tokens[1]),
                })?;
                let r = number(tokens[2], line, "r")?;
                let x = number(tokens[3], line, "x")?;
                let b_sh = number(tokens[4], line, "b_sh")?;
                let tap = match tokens.get(5) {
                    Some(t) => number(t, line, "tap")?,
                    None => 1.0,
                };
                if r * r + x * x == 0.0 {
                    return Err(Error::Parse {
                        line,
                        message: "zero branch impedance".into(),
                    });
                }
                if tap == 0.0 {
                    return Err(Error::Parse {
                        line,
                        message: "tap ratio must be non-zero".into(),
                    });
                }
                raw_branches.push((line, from, to, r, x, b_sh, tap));
            }
        }
    }

    let mut index: HashMap<u32, usize> = HashMap::new();
    for (k, bus) in buses.iter().enumerate() {
        if index.insert(bus.id, k).is_some() {
            return Err(Error::validation(format!("bus {}", bus.id), "duplicate bus id"));
        }
    }
    let mut branches = Vec::with_capacity(raw_branches.len());
    for (n, (_line, from, to, r, x, b_sh, tap)) in raw_branches.into_iter().enumerate() {
        let lookup = |id: u32| {
            index.get(&id).copied().ok_or_else(|| {
                Error::validation(
                    format!("branch {} ({from}-{to})", n + 1),
                    format!("references unknown bus {id}"),
                )
            })
        };
        let (f, t) = (lookup(from)?, lookup(to)?);
        branches.push(Branch::from_impedance(f, t, r, x, b_sh, tap));
    }
    let slack = buses.iter().position(|b| b.kind == BusKind::Slack).unwrap_or(0);
    let case = NetworkCase {
        base_mva,
        buses,
        branches,
        slack,
    };
    case.validate()?;
    Ok(case)
}
