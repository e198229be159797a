//! Travel-time models for one simulated day.
//!
//! Two models are available:
//!
//! * **BPR**: static volume-delay. Every edge gets
//!   `t0 * (1 + alpha * (x / c)^beta)` where `x` is the episode's edge count
//!   scaled to an hourly rate over the departure window. Departure times do
//!   not matter.
//! * **Point queue**: event-driven. A vehicle entering edge `e` at `T` leaves
//!   at `max(T + t0, last_exit(e) + 3600 / c)`, first in first out, with no
//!   storage limit.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::demand::{AgentId, AgentKind};
use crate::error::{Error, Result};
use crate::netgraph::{EdgeIdx, Network};
use crate::pathgen::Route;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrafficModel {
    Bpr {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    #[serde(rename = "pointqueue")]
    PointQueue,
}

fn default_alpha() -> f64 {
    0.15
}

fn default_beta() -> f64 {
    4.0
}

impl Default for TrafficModel {
    fn default() -> Self {
        TrafficModel::Bpr {
            alpha: default_alpha(),
            beta: default_beta(),
        }
    }
}

impl TrafficModel {
    pub fn validate(&self) -> Result<()> {
        if let TrafficModel::Bpr { alpha, beta } = *self {
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(Error::InvalidArgument(format!("BPR alpha must be >= 0, got {alpha}")));
            }
            if !(beta.is_finite() && beta >= 1.0) {
                return Err(Error::InvalidArgument(format!("BPR beta must be >= 1, got {beta}")));
            }
        }
        Ok(())
    }
}

/// BPR volume-delay for one edge. `flow` and `capacity` share units.
pub fn bpr_time(t0: f64, alpha: f64, beta: f64, flow: f64, capacity: f64) -> f64 {
    t0 * (1.0 + alpha * (flow / capacity).powf(beta))
}

/// Converts a per-episode vehicle count into an hourly rate.
pub fn hourly_rate(count: u32, window_secs: f64) -> f64 {
    count as f64 * 3600.0 / window_secs.max(1.0)
}

/// BPR time of every edge given per-edge counts.
pub fn bpr_edge_times(net: &Network, alpha: f64, beta: f64, flows: &[u32], window_secs: f64) -> Vec<f64> {
    net.edges()
        .iter()
        .zip(flows)
        .map(|(e, &n)| bpr_time(e.fftime(), alpha, beta, hourly_rate(n, window_secs), e.capacity))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Trip<'a> {
    pub agent: AgentId,
    pub kind: AgentKind,
    pub route_index: usize,
    pub route: &'a Route,
    /// Integer seconds.
    pub departure: u64,
}

#[derive(Clone, Debug)]
pub struct Assignment<'a> {
    pub trips: Vec<Trip<'a>>,
    /// Length of the departure window in seconds, used for BPR rate scaling.
    pub window_secs: f64,
}

impl Assignment<'_> {
    pub fn validate(&self, net: &Network) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.trips.len());
        for t in &self.trips {
            if !seen.insert(t.agent) {
                return Err(Error::Validation(format!("agent {} appears twice in the assignment", t.agent)));
            }
            if t.route.edges.iter().any(|e| e.0 >= net.edges().len()) {
                return Err(Error::Validation(format!("agent {} has a route outside the network", t.agent)));
            }
        }
        Ok(())
    }
}

/// Outcome of one day. Vectors are aligned with `Assignment::trips`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub travel_times: Vec<f64>,
    /// Arrival clock times; point-queue model only.
    pub arrivals: Option<Vec<f64>>,
    /// Vehicle count per edge, indexed by [`EdgeIdx`].
    pub edge_flows: Vec<u32>,
}

pub fn edge_counts(net: &Network, asg: &Assignment) -> Vec<u32> {
    let mut flows = vec![0u32; net.edges().len()];
    for t in &asg.trips {
        for e in &t.route.edges {
            flows[e.0] += 1;
        }
    }
    flows
}

pub fn simulate(net: &Network, model: &TrafficModel, asg: &Assignment) -> Result<EpisodeResult> {
    model.validate()?;
    asg.validate(net)?;
    let edge_flows = edge_counts(net, asg);
    match *model {
        TrafficModel::Bpr { alpha, beta } => {
            let times = bpr_edge_times(net, alpha, beta, &edge_flows, asg.window_secs);
            let travel_times = asg
                .trips
                .iter()
                .map(|t| t.route.edges.iter().map(|e| times[e.0]).sum())
                .collect();
            Ok(EpisodeResult {
                travel_times,
                arrivals: None,
                edge_flows,
            })
        }
        TrafficModel::PointQueue => {
            let arrivals = point_queue(net, asg);
            let travel_times = asg
                .trips
                .iter()
                .zip(&arrivals)
                .map(|(t, a)| a - t.departure as f64)
                .collect();
            Ok(EpisodeResult {
                travel_times,
                arrivals: Some(arrivals),
                edge_flows,
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    trip: usize,
    /// Index into the trip's route of the edge being entered.
    leg: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.trip.cmp(&other.trip))
            .then(self.leg.cmp(&other.leg))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Processes edge entries in global time order (ties by trip position) and
/// returns each trip's arrival time.
fn point_queue(net: &Network, asg: &Assignment) -> Vec<f64> {
    let mut last_exit = vec![f64::NEG_INFINITY; net.edges().len()];
    let mut arrivals = vec![0.0; asg.trips.len()];
    let mut queue: BinaryHeap<Reverse<Event>> = asg
        .trips
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Reverse(Event {
                time: t.departure as f64,
                trip: i,
                leg: 0,
            })
        })
        .collect();

    while let Some(Reverse(ev)) = queue.pop() {
        let route = asg.trips[ev.trip].route;
        let Some(&EdgeIdx(e)) = route.edges.get(ev.leg) else {
            arrivals[ev.trip] = ev.time;
            continue;
        };
        let edge = &net.edges()[e];
        let exit = (ev.time + edge.fftime()).max(last_exit[e] + 3600.0 / edge.capacity);
        last_exit[e] = exit;
        queue.push(Reverse(Event {
            time: exit,
            trip: ev.trip,
            leg: ev.leg + 1,
        }));
    }
    arrivals
}

/// Writes `episode,id,kind,route_index,departure,travel_time` rows.
pub fn write_result_csv<W: Write>(episode: u64, asg: &Assignment, res: &EpisodeResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "id", "kind", "route_index", "departure", "travel_time"])?;
    for (t, tt) in asg.trips.iter().zip(&res.travel_times) {
        w.write_record([
            episode.to_string(),
            t.agent.to_string(),
            t.kind.to_string(),
            t.route_index.to_string(),
            t.departure.to_string(),
            tt.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<episode csv>", e))?;
    Ok(())
}

/// Writes `episode,edge,flow` rows for every edge.
pub fn write_flows_csv<W: Write>(net: &Network, episode: u64, res: &EpisodeResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "edge", "flow"])?;
    for (edge, flow) in net.edges().iter().zip(&res.edge_flows) {
        w.write_record([episode.to_string(), edge.id.clone(), flow.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<flow csv>", e))?;
    Ok(())
}
