//! The agent population: synthetic generation and CSV import/export.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::behaviors::{Behavior, BehaviorWeights};
use crate::error::{Error, Result};
use crate::netgraph::{Network, NodeIdx};
use crate::seeds::{self, SimRng};

pub type AgentId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Human,
    Av,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Human => "human",
            AgentKind::Av => "av",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(AgentKind::Human),
            "av" => Ok(AgentKind::Av),
            _ => Err(Error::InvalidArgument(format!("unknown agent kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub id: AgentId,
    pub origin: NodeIdx,
    pub dest: NodeIdx,
    /// Integer seconds.
    pub departure: u64,
    pub kind: AgentKind,
    pub behavior: Option<Behavior>,
    /// Per-agent override of the behavior preset.
    pub weights: Option<BehaviorWeights>,
}

impl AgentSpec {
    /// Reward weights of an AV: the override if given, else the preset.
    pub fn reward_weights(&self) -> Option<BehaviorWeights> {
        self.weights.or_else(|| self.behavior.map(Behavior::weights))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdWeight {
    pub origin: String,
    pub dest: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandConfig {
    pub n_agents: usize,
    pub od_pairs: Vec<OdWeight>,
    /// Inclusive departure window `[start, end]`, integer seconds.
    pub window: [u64; 2],
    pub seed: u64,
}

impl DemandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(Error::InvalidArgument("n_agents must be at least 1".into()));
        }
        if self.window[0] > self.window[1] {
            return Err(Error::InvalidArgument(format!(
                "departure window start {} exceeds end {}",
                self.window[0], self.window[1]
            )));
        }
        if self.od_pairs.is_empty() {
            return Err(Error::InvalidArgument("no OD pairs given".into()));
        }
        if self
            .od_pairs
            .iter()
            .any(|od| !(od.weight.is_finite() && od.weight >= 0.0))
        {
            return Err(Error::InvalidArgument("OD weights must be finite and nonnegative".into()));
        }
        if self.od_pairs.iter().all(|od| od.weight == 0.0) {
            return Err(Error::InvalidArgument("OD weights are all zero".into()));
        }
        Ok(())
    }
}

/// Samples `n_agents` human agents with OD pairs drawn by weight and
/// departures uniform over the window. Ids run from 0.
pub fn generate_demand(net: &Network, cfg: &DemandConfig) -> Result<Vec<AgentSpec>> {
    cfg.validate()?;
    let fftimes = net.fftimes();
    let mut ods = Vec::with_capacity(cfg.od_pairs.len());
    for od in &cfg.od_pairs {
        let o = net.node_idx(&od.origin)?;
        let d = net.node_idx(&od.dest)?;
        net.shortest_path(o, d, &fftimes)?;
        ods.push((o, d));
    }
    let pick = WeightedIndex::new(cfg.od_pairs.iter().map(|od| od.weight))
        .map_err(|e| Error::InvalidArgument(format!("OD weights: {e}")))?;

    let mut rng: SimRng = seeds::stream(cfg.seed, "demand");
    let agents = (0..cfg.n_agents)
        .map(|i| {
            let (origin, dest) = ods[pick.sample(&mut rng)];
            let departure = rng.gen_range(cfg.window[0]..=cfg.window[1]);
            AgentSpec {
                id: i as AgentId,
                origin,
                dest,
                departure,
                kind: AgentKind::Human,
                behavior: None,
                weights: None,
            }
        })
        .collect();
    Ok(agents)
}

const BASE_HEADER: [&str; 6] = ["id", "origin", "dest", "departure", "kind", "behavior"];

/// Writes the demand CSV. The `weights` column is only emitted when some
/// agent carries an override.
pub fn write_demand_csv<W: Write>(net: &Network, agents: &[AgentSpec], out: W) -> Result<()> {
    let with_weights = agents.iter().any(|a| a.weights.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = BASE_HEADER.to_vec();
    if with_weights {
        header.push("weights");
    }
    w.write_record(&header)?;
    for a in agents {
        let mut row = vec![
            a.id.to_string(),
            net.node(a.origin).id.clone(),
            net.node(a.dest).id.clone(),
            a.departure.to_string(),
            a.kind.to_string(),
            a.behavior.map(|b| b.to_string()).unwrap_or_default(),
        ];
        if with_weights {
            row.push(a.weights.map(|w| w.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<demand csv>", e))?;
    Ok(())
}

pub fn read_demand_csv(net: &Network, text: &str) -> Result<Vec<AgentSpec>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let has_weights = headers.len() == 7 && headers[6] == "weights";
    let valid = headers.len() >= 6 && headers[..6] == BASE_HEADER && (headers.len() == 6 || has_weights);
    if !valid {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}` (optionally `,weights`)", BASE_HEADER.join(",")),
        });
    }

    let mut ids = HashSet::new();
    let mut agents = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |msg: String| Error::Parse { line, msg };
        let id: AgentId = record[0]
            .parse()
            .map_err(|_| parse_err(format!("bad id `{}`", &record[0])))?;
        if !ids.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let origin = net.node_idx(&record[1])?;
        let dest = net.node_idx(&record[2])?;
        if origin == dest {
            return Err(Error::Validation(format!("agent {id}: origin equals destination")));
        }
        let departure: u64 = record[3]
            .parse()
            .map_err(|_| parse_err(format!("bad departure `{}`", &record[3])))?;
        let kind: AgentKind = record[4].parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let behavior = match &record[5] {
            "" => None,
            s => Some(s.parse::<Behavior>().map_err(|e| parse_err(e.to_string()))?),
        };
        let weights = match record.get(6) {
            Some(s) if has_weights && !s.is_empty() => {
                Some(s.parse::<BehaviorWeights>().map_err(|e| parse_err(e.to_string()))?)
            }
            _ => None,
        };
        if kind == AgentKind::Av && behavior.is_none() {
            return Err(Error::Validation(format!("agent {id}: AV without a behavior")));
        }
        agents.push(AgentSpec {
            id,
            origin,
            dest,
            departure,
            kind,
            behavior,
            weights,
        });
    }
    Ok(agents)
}

pub fn load_demand(path: impl AsRef<Path>, net: &Network) -> Result<Vec<AgentSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_demand_csv(net, &text)
}
