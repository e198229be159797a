//! Day-to-day multi-agent route-choice environment.
//!
//! Each episode is one day. Agents act one at a time in order of departure
//! (ties by id), each making a single route choice; once the last agent has
//! chosen, the day is simulated, human beliefs are revised and AV rewards are
//! computed. The experiment moves through three phases: human-only learning,
//! AV training after mutation, and testing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::debug;
use rand::Rng;

use crate::behaviors::{compute_reward, Behavior, GroupMeans};
use crate::demand::{AgentId, AgentKind, AgentSpec};
use crate::error::{Error, Result};
use crate::humans::{self, init_beliefs, CostBeliefs, HumanModelParams, LearningModel};
use crate::netgraph::{Network, NodeIdx};
use crate::pathgen::{generate_routes, RouteGenParams, RouteSet, RouteTable};
use crate::seeds::{self, SimRng};
use crate::traffic::{simulate, Assignment, TrafficModel, Trip};

/// Seconds per departure bucket in observations.
pub const DEPARTURE_BUCKET_SECS: u64 = 600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    HumanOnly,
    Training,
    Testing,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::HumanOnly => "human",
            Phase::Training => "training",
            Phase::Testing => "testing",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(Phase::HumanOnly),
            "training" => Ok(Phase::Training),
            "testing" => Ok(Phase::Testing),
            _ => Err(Error::InvalidArgument(format!("unknown phase `{s}`"))),
        }
    }
}

/// What an agent sees before choosing: how many same-OD agents have already
/// picked each route today, and its own departure bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub counts: Vec<u32>,
    pub departure_bucket: u32,
}

impl Observation {
    pub fn key(&self) -> ObsKey {
        ObsKey {
            bucket: self.departure_bucket,
            bins: self.counts.iter().map(|&c| count_bin(c)).collect(),
        }
    }
}

/// Count bins for tabular learners: {0}, {1,2}, {3..5}, {6+}.
pub fn count_bin(count: u32) -> u8 {
    match count {
        0 => 0,
        1..=2 => 1,
        3..=5 => 2,
        _ => 3,
    }
}

/// Discretized observation. Displays as `bucket:bins`, e.g. `0:31`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObsKey {
    pub bucket: u32,
    pub bins: Vec<u8>,
}

impl fmt::Display for ObsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.bucket)?;
        for b in &self.bins {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for ObsKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad observation key `{s}`"));
        let (bucket, bins) = s.split_once(':').ok_or_else(bad)?;
        let bucket = bucket.parse().map_err(|_| bad())?;
        let bins = bins
            .chars()
            .map(|c| c.to_digit(10).filter(|d| *d <= 3).map(|d| d as u8).ok_or_else(bad))
            .collect::<Result<_>>()?;
        Ok(ObsKey { bucket, bins })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MutationSpec {
    /// Fraction of humans, rounded to the nearest agent.
    Share(f64),
    Ids(Vec<AgentId>),
}

#[derive(Clone, Debug)]
pub struct HumanSettings {
    pub params: HumanModelParams,
    /// Each human's `time_mult` is drawn uniformly from `1 ± spread`.
    pub time_mult_spread: f64,
    /// Humans keep revising beliefs after mutation. Otherwise they repeat
    /// their previous choice.
    pub learn_in_training: bool,
    pub learn_in_testing: bool,
}

impl Default for HumanSettings {
    fn default() -> Self {
        HumanSettings {
            params: HumanModelParams::default(),
            time_mult_spread: 0.0,
            learn_in_training: false,
            learn_in_testing: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnvConfig {
    pub network: Arc<Network>,
    pub agents: Vec<AgentSpec>,
    pub route_params: RouteGenParams,
    /// Precomputed route sets; OD pairs missing here are generated.
    pub routes: Option<RouteTable>,
    pub traffic: TrafficModel,
    /// Departure window length for BPR rate scaling, seconds.
    pub window_secs: f64,
    pub humans: HumanSettings,
    pub mutation: MutationSpec,
    pub av_behavior: Behavior,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub spec: AgentSpec,
    pub beliefs: CostBeliefs,
    pub params: HumanModelParams,
    pub last_choice: Option<usize>,
    rng: SimRng,
}

impl AgentState {
    pub fn od(&self) -> (NodeIdx, NodeIdx) {
        (self.spec.origin, self.spec.dest)
    }

    pub fn is_av(&self) -> bool {
        self.spec.kind == AgentKind::Av
    }
}

/// One agent's line in an episode outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutcome {
    pub id: AgentId,
    pub kind: AgentKind,
    pub origin: NodeIdx,
    pub dest: NodeIdx,
    pub route_index: usize,
    pub departure: u64,
    pub travel_time: f64,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub day: u64,
    pub phase: Phase,
    /// In cycle order.
    pub agents: Vec<AgentOutcome>,
    pub edge_flows: Vec<u32>,
    /// One entry per AV.
    pub rewards: BTreeMap<AgentId, f64>,
}

impl EpisodeOutcome {
    pub fn mean_av_reward(&self) -> Option<f64> {
        (!self.rewards.is_empty()).then(|| self.rewards.values().sum::<f64>() / self.rewards.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Next { agent: AgentId, obs: Observation },
    Done(EpisodeOutcome),
}

pub struct TrafficEnv {
    net: Arc<Network>,
    routes: Arc<RouteTable>,
    traffic: TrafficModel,
    window_secs: f64,
    agents: Vec<AgentState>,
    /// Agent positions sorted by (departure, id).
    cycle: Vec<usize>,
    phase: Phase,
    day: u64,
    pos: usize,
    in_episode: bool,
    choices: Vec<Option<usize>>,
    counts: HashMap<(NodeIdx, NodeIdx), Vec<u32>>,
    humans: HumanSettings,
    mutation: MutationSpec,
    av_behavior: Behavior,
    seed: u64,
}

impl TrafficEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        if cfg.agents.is_empty() {
            return Err(Error::Env("no agents".into()));
        }
        cfg.traffic.validate()?;
        cfg.humans.params.validate()?;
        if !(0.0..1.0).contains(&cfg.humans.time_mult_spread) {
            return Err(Error::InvalidArgument(format!(
                "time_mult_spread must be in [0, 1), got {}",
                cfg.humans.time_mult_spread
            )));
        }
        if let MutationSpec::Share(s) = cfg.mutation {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("mutation share must be in [0, 1], got {s}")));
            }
        }

        let mut seen = std::collections::HashSet::new();
        for a in &cfg.agents {
            if !seen.insert(a.id) {
                return Err(Error::DuplicateId(a.id.to_string()));
            }
            if a.origin == a.dest {
                return Err(Error::Validation(format!("agent {}: origin equals destination", a.id)));
            }
        }

        let net = cfg.network;
        let mut routes = cfg.routes.unwrap_or_default();
        for a in &cfg.agents {
            let od = (a.origin, a.dest);
            if let std::collections::btree_map::Entry::Vacant(slot) = routes.entry(od) {
                let set = generate_routes(&net, od.0, od.1, &cfg.route_params)?;
                debug!(
                    "generated {} routes for {} -> {}",
                    set.len(),
                    net.node(od.0).id,
                    net.node(od.1).id
                );
                slot.insert(set);
            }
        }

        let mut mult_rng = seeds::stream(cfg.seed, "time_mult");
        let mut agents = Vec::with_capacity(cfg.agents.len());
        for spec in cfg.agents {
            let set = &routes[&(spec.origin, spec.dest)];
            let mut params = cfg.humans.params;
            let u: f64 = mult_rng.gen();
            params.time_mult = 1.0 + cfg.humans.time_mult_spread * (2.0 * u - 1.0);
            agents.push(AgentState {
                beliefs: init_beliefs(set)?,
                params,
                last_choice: None,
                rng: seeds::stream(cfg.seed, &format!("human/{}", spec.id)),
                spec,
            });
        }

        let mut cycle: Vec<usize> = (0..agents.len()).collect();
        cycle.sort_by_key(|&i| (agents[i].spec.departure, agents[i].spec.id));

        let counts = routes.iter().map(|(od, set)| (*od, vec![0; set.len()])).collect();
        let n = agents.len();
        Ok(TrafficEnv {
            net,
            routes: Arc::new(routes),
            traffic: cfg.traffic,
            window_secs: cfg.window_secs,
            agents,
            cycle,
            phase: Phase::HumanOnly,
            day: 0,
            pos: 0,
            in_episode: false,
            choices: vec![None; n],
            counts,
            humans: cfg.humans,
            mutation: cfg.mutation,
            av_behavior: cfg.av_behavior,
            seed: cfg.seed,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn route_set(&self, od: (NodeIdx, NodeIdx)) -> &RouteSet {
        &self.routes[&od]
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.spec.id == id)
    }

    pub fn av_ids(&self) -> Vec<AgentId> {
        let mut ids: Vec<AgentId> = self.agents.iter().filter(|a| a.is_av()).map(|a| a.spec.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Agent ids in acting order.
    pub fn cycle_order(&self) -> Vec<AgentId> {
        self.cycle.iter().map(|&i| self.agents[i].spec.id).collect()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn day(&self) -> u64 {
        self.day
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window_secs(&self) -> f64 {
        self.window_secs
    }

    /// Dumps every human's beliefs as `episode,id,route_index,cost,count`.
    pub fn write_beliefs_csv<W: std::io::Write>(&self, episode: u64, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "id", "route_index", "cost", "count"])?;
        let mut humans: Vec<&AgentState> = self.agents.iter().filter(|a| !a.is_av()).collect();
        humans.sort_by_key(|a| a.spec.id);
        for a in humans {
            for (r, (c, n)) in a.beliefs.costs.iter().zip(&a.beliefs.counts).enumerate() {
                w.write_record([episode.to_string(), a.spec.id.to_string(), r.to_string(), c.to_string(), n.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<beliefs csv>", e))?;
        Ok(())
    }

    /// The agent whose turn it is, if an episode is running.
    pub fn current_agent(&self) -> Option<&AgentState> {
        self.in_episode.then(|| &self.agents[self.cycle[self.pos]])
    }

    /// Starts a new day and returns the first agent to act.
    pub fn reset(&mut self) -> (AgentId, Observation) {
        self.day += 1;
        self.pos = 0;
        self.in_episode = true;
        self.choices.iter_mut().for_each(|c| *c = None);
        self.counts.values_mut().for_each(|v| v.iter_mut().for_each(|c| *c = 0));
        let first = self.cycle[0];
        (self.agents[first].spec.id, self.observe(first))
    }

    fn observe(&self, idx: usize) -> Observation {
        let a = &self.agents[idx];
        Observation {
            counts: self.counts[&a.od()].clone(),
            departure_bucket: (a.spec.departure / DEPARTURE_BUCKET_SECS) as u32,
        }
    }

    fn humans_learn(&self) -> bool {
        match self.phase {
            Phase::HumanOnly => true,
            Phase::Training => self.humans.learn_in_training,
            Phase::Testing => self.humans.learn_in_testing,
        }
    }

    /// Route choice of the current agent under its human model. While
    /// learning is off, humans repeat their previous choice.
    pub fn human_action(&mut self) -> Result<usize> {
        if !self.in_episode {
            return Err(Error::Env("no episode in progress; call reset".into()));
        }
        let learn = self.humans_learn();
        let agent = &mut self.agents[self.cycle[self.pos]];
        if agent.is_av() {
            return Err(Error::Env(format!("agent {} is an AV", agent.spec.id)));
        }
        if !learn {
            if let Some(prev) = agent.last_choice {
                return Ok(prev);
            }
        }
        Ok(humans::choose_route(&agent.beliefs, &agent.params, &mut agent.rng))
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if !self.in_episode {
            return Err(Error::Env("step after episode end; call reset".into()));
        }
        let idx = self.cycle[self.pos];
        let od = self.agents[idx].od();
        let n_routes = self.routes[&od].len();
        if action >= n_routes {
            return Err(Error::InvalidArgument(format!(
                "action {action} out of range for agent {} with {n_routes} routes",
                self.agents[idx].spec.id
            )));
        }
        self.choices[idx] = Some(action);
        self.counts.get_mut(&od).expect("route counts exist for every OD")[action] += 1;
        self.pos += 1;
        if self.pos < self.cycle.len() {
            let next = self.cycle[self.pos];
            return Ok(StepOutcome::Next {
                agent: self.agents[next].spec.id,
                obs: self.observe(next),
            });
        }
        self.in_episode = false;
        self.finish_episode().map(StepOutcome::Done)
    }

    fn finish_episode(&mut self) -> Result<EpisodeOutcome> {
        let routes = Arc::clone(&self.routes);
        let trips: Vec<Trip> = self
            .cycle
            .iter()
            .map(|&i| {
                let a = &self.agents[i];
                let r = self.choices[i].expect("every agent acted");
                Trip {
                    agent: a.spec.id,
                    kind: a.spec.kind,
                    route_index: r,
                    route: &routes[&a.od()].routes[r],
                    departure: a.spec.departure,
                }
            })
            .collect();
        let asg = Assignment {
            trips,
            window_secs: self.window_secs,
        };
        let result = simulate(&self.net, &self.traffic, &asg)?;

        let means = GroupMeans::compute(
            self.cycle
                .iter()
                .zip(&result.travel_times)
                .map(|(&i, &t)| (self.agents[i].is_av(), t)),
        );
        let learn = self.humans_learn();
        let mut rewards = BTreeMap::new();
        let mut outcomes = Vec::with_capacity(self.cycle.len());
        for (&i, &tt) in self.cycle.iter().zip(&result.travel_times) {
            let chosen = self.choices[i].expect("every agent acted");
            let agent = &mut self.agents[i];
            let reward = if agent.is_av() {
                let w = agent
                    .spec
                    .reward_weights()
                    .ok_or_else(|| Error::Env(format!("AV {} has no behavior", agent.spec.id)))?;
                let r = compute_reward(&w, &means.stats_for(tt));
                rewards.insert(agent.spec.id, r);
                Some(r)
            } else {
                if learn {
                    agent.params.update(&mut agent.beliefs, chosen, tt)?;
                }
                agent.last_choice = Some(chosen);
                None
            };
            outcomes.push(AgentOutcome {
                id: agent.spec.id,
                kind: agent.spec.kind,
                origin: agent.spec.origin,
                dest: agent.spec.dest,
                route_index: chosen,
                departure: agent.spec.departure,
                travel_time: tt,
                reward,
            });
        }
        Ok(EpisodeOutcome {
            day: self.day,
            phase: self.phase,
            agents: outcomes,
            edge_flows: result.edge_flows,
            rewards,
        })
    }

    /// Runs one full day. Humans act through [`Self::human_action`]; AVs ask
    /// `av_policy` for a route index.
    pub fn play_episode<F>(&mut self, mut av_policy: F) -> Result<EpisodeOutcome>
    where
        F: FnMut(&AgentState, &Observation) -> usize,
    {
        let (_, mut obs) = self.reset();
        loop {
            let agent = self.current_agent().expect("episode in progress");
            let action = if agent.is_av() {
                av_policy(agent, &obs)
            } else {
                self.human_action()?
            };
            match self.step(action)? {
                StepOutcome::Next { obs: next, .. } => obs = next,
                StepOutcome::Done(outcome) => return Ok(outcome),
            }
        }
    }

    /// Converts humans into AVs, ending the human-only phase.
    ///
    /// Agents declared as AVs in the demand are always part of the mutated
    /// set. Origins, destinations and departures are untouched.
    pub fn mutation(&mut self) -> Result<Vec<AgentId>> {
        if self.phase != Phase::HumanOnly {
            return Err(Error::Env("mutation already happened".into()));
        }
        if self.in_episode {
            return Err(Error::Env("cannot mutate mid-episode".into()));
        }
        let human_positions: Vec<usize> = (0..self.agents.len())
            .filter(|&i| self.agents[i].spec.kind == AgentKind::Human)
            .collect();
        let mut chosen: Vec<usize> = match &self.mutation {
            MutationSpec::Share(share) => {
                if !(0.0..=1.0).contains(share) {
                    return Err(Error::InvalidArgument(format!("mutation share must be in [0, 1], got {share}")));
                }
                let n = (share * human_positions.len() as f64).round() as usize;
                let mut rng = seeds::stream(self.seed, "mutation");
                rand::seq::index::sample(&mut rng, human_positions.len(), n)
                    .into_iter()
                    .map(|k| human_positions[k])
                    .collect()
            }
            MutationSpec::Ids(ids) => ids
                .iter()
                .map(|id| {
                    self.agents
                        .iter()
                        .position(|a| a.spec.id == *id)
                        .ok_or_else(|| Error::InvalidArgument(format!("mutation id {id} is not an agent")))
                })
                .collect::<Result<_>>()?,
        };
        chosen.extend((0..self.agents.len()).filter(|&i| self.agents[i].spec.kind == AgentKind::Av));
        chosen.sort_unstable();
        chosen.dedup();

        for &i in &chosen {
            let spec = &mut self.agents[i].spec;
            spec.kind = AgentKind::Av;
            if spec.behavior.is_none() {
                spec.behavior = Some(self.av_behavior);
            }
        }
        self.phase = Phase::Training;
        let mut ids: Vec<AgentId> = chosen.iter().map(|&i| self.agents[i].spec.id).collect();
        ids.sort_unstable();
        debug!("mutated {} agents: {:?}", ids.len(), ids);
        Ok(ids)
    }

    pub fn begin_testing(&mut self) -> Result<()> {
        match self.phase {
            Phase::Training if !self.in_episode => {
                self.phase = Phase::Testing;
                Ok(())
            }
            Phase::Training => Err(Error::Env("cannot change phase mid-episode".into())),
            other => Err(Error::Env(format!("cannot enter testing from phase `{other}`"))),
        }
    }
}
