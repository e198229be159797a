//! Tabular multi-agent learners for AV route choice.
//!
//! A day is a single decision per agent, so every episode is a contextual
//! bandit round: there is no bootstrapping and no discounting. IQL moves
//! each agent's value toward its own reward. VDN treats the team value as
//! the sum of the agents' values and moves every agent's entry by the same
//! team TD error.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demand::AgentId;
use crate::error::{Error, Result};
use crate::marlenv::{ObsKey, Phase, TrafficEnv};
use crate::recorder::{KpiAggregate, Recorder};
use crate::seeds::{self, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Iql,
    Vdn,
    Random,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Iql => "iql",
            LearnerKind::Vdn => "vdn",
            LearnerKind::Random => "random",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iql" => Ok(LearnerKind::Iql),
            "vdn" => Ok(LearnerKind::Vdn),
            "random" => Ok(LearnerKind::Random),
            _ => Err(Error::InvalidArgument(format!("unknown learner `{s}`"))),
        }
    }
}

/// Value table of one agent. Unvisited entries read as the negated free-flow
/// time of the action's route.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    defaults: Vec<f64>,
    values: BTreeMap<ObsKey, Vec<f64>>,
}

impl QTable {
    pub fn new(route_fftimes: &[f64]) -> Self {
        QTable {
            defaults: route_fftimes.iter().map(|t| -t).collect(),
            values: BTreeMap::new(),
        }
    }

    /// Table whose unvisited entries read as `defaults`.
    pub fn with_defaults(defaults: Vec<f64>) -> Self {
        QTable {
            defaults,
            values: BTreeMap::new(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.defaults.len()
    }

    pub fn defaults(&self) -> &[f64] {
        &self.defaults
    }

    pub fn values(&self, key: &ObsKey) -> &[f64] {
        self.values.get(key).map_or(&self.defaults, Vec::as_slice)
    }

    pub fn value(&self, key: &ObsKey, action: usize) -> f64 {
        self.values(key)[action]
    }

    pub fn set(&mut self, key: &ObsKey, action: usize, value: f64) {
        let defaults = &self.defaults;
        self.values.entry(key.clone()).or_insert_with(|| defaults.clone())[action] = value;
    }

    /// Stored (visited) entries, in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&ObsKey, &[f64])> {
        self.values.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy selection. Always consumes one uniform draw, plus one more
/// when exploring.
pub fn select_action<R: Rng + ?Sized>(q: &QTable, key: &ObsKey, epsilon: f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if u < epsilon {
        rng.gen_range(0..q.n_actions())
    } else {
        greedy(q.values(key))
    }
}

/// `Q <- Q + eta * (r - Q)` on one entry.
pub fn iql_update(q: &mut QTable, key: &ObsKey, action: usize, reward: f64, eta: f64) {
    let old = q.value(key, action);
    q.set(key, action, old + eta * (reward - old));
}

/// Every agent's chosen entry moves by `eta * (r - sum_i Q_i)`, with the sum
/// taken before any update.
pub fn vdn_update(tables: &mut [QTable], keys: &[ObsKey], actions: &[usize], team_reward: f64, eta: f64) -> Result<()> {
    if tables.len() != keys.len() || tables.len() != actions.len() {
        return Err(Error::InvalidArgument(format!(
            "VDN update needs one key and action per table ({} tables, {} keys, {} actions)",
            tables.len(),
            keys.len(),
            actions.len()
        )));
    }
    let q_tot: f64 = tables
        .iter()
        .zip(keys)
        .zip(actions)
        .map(|((q, k), &a)| q.value(k, a))
        .sum();
    let delta = eta * (team_reward - q_tot);
    for ((q, k), &a) in tables.iter_mut().zip(keys).zip(actions) {
        let old = q.value(k, a);
        q.set(k, a, old + delta);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub learn_rate: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            episodes: 1000,
            eps_start: 1.0,
            eps_end: 0.05,
            learn_rate: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.episodes < 1 {
            return Err(Error::InvalidArgument("training needs at least one episode".into()));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.eps_start) || !unit.contains(&self.eps_end) || self.eps_start < self.eps_end {
            return Err(Error::InvalidArgument(format!(
                "need 1 >= eps_start ({}) >= eps_end ({}) >= 0",
                self.eps_start, self.eps_end
            )));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("learn_rate must be in (0, 1], got {}", self.learn_rate)));
        }
        Ok(())
    }

    /// Linear decay from `eps_start` at the first episode to `eps_end` at the last.
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.eps_start;
        }
        let frac = episode.min(self.episodes - 1) as f64 / (self.episodes - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// The AVs' policies: one table and one exploration stream per AV.
#[derive(Clone, Debug)]
pub struct Policies {
    pub kind: LearnerKind,
    /// AV ids, ascending; position matches `tables`.
    pub agents: Vec<AgentId>,
    pub tables: Vec<QTable>,
    rngs: Vec<SimRng>,
    index: BTreeMap<AgentId, usize>,
}

impl Policies {
    pub fn for_env(env: &TrafficEnv, kind: LearnerKind) -> Self {
        let agents = env.av_ids();
        // Under VDN the joint value is the sum over agents, so each share is
        // scaled to make the initial sum equal the negated free-flow time.
        let share = match kind {
            LearnerKind::Vdn => 1.0 / agents.len().max(1) as f64,
            _ => 1.0,
        };
        let tables = agents
            .iter()
            .map(|&id| {
                let a = env.agent(id).expect("AV exists");
                let fftimes = env.route_set(a.od()).fftimes();
                QTable::with_defaults(fftimes.iter().map(|t| -t * share).collect())
            })
            .collect();
        let rngs = agents
            .iter()
            .map(|id| seeds::stream(env.seed(), &format!("explore/{id}")))
            .collect();
        let index = agents.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Policies {
            kind,
            agents,
            tables,
            rngs,
            index,
        }
    }

    fn act(&mut self, id: AgentId, key: &ObsKey, epsilon: f64) -> usize {
        let i = self.index[&id];
        let rng = &mut self.rngs[i];
        match self.kind {
            LearnerKind::Random => rng.gen_range(0..self.tables[i].n_actions()),
            _ => select_action(&self.tables[i], key, epsilon, rng),
        }
    }

    pub fn table(&self, id: AgentId) -> Option<&QTable> {
        self.index.get(&id).map(|&i| &self.tables[i])
    }

    /// Writes `agent,obs_key,action,value` for every visited entry.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["agent", "obs_key", "action", "value"])?;
        for (id, table) in self.agents.iter().zip(&self.tables) {
            for (key, values) in table.entries() {
                for (a, v) in values.iter().enumerate() {
                    w.write_record([id.to_string(), key.to_string(), a.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<policy csv>", e))?;
        Ok(())
    }

    /// Restores table entries written by [`Self::write_csv`] into policies
    /// built for the same environment.
    pub fn read_csv(&mut self, text: &str) -> Result<()> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str| Error::Parse {
                line,
                msg: format!("bad {what}"),
            };
            let id: AgentId = record[0].parse().map_err(|_| bad("agent"))?;
            let key: ObsKey = record[1].parse()?;
            let action: usize = record[2].parse().map_err(|_| bad("action"))?;
            let value: f64 = record[3].parse().map_err(|_| bad("value"))?;
            let i = *self
                .index
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("agent {id} has no policy")))?;
            if action >= self.tables[i].n_actions() || !value.is_finite() {
                return Err(bad("action or value"));
            }
            self.tables[i].set(&key, action, value);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub policies: Policies,
    /// Mean AV reward per episode (zero when there are no AVs).
    pub trace: Vec<f64>,
}

/// Runs `schedule.episodes` training days. The environment must be in the
/// training phase.
pub fn train(
    env: &mut TrafficEnv,
    kind: LearnerKind,
    schedule: &TrainSchedule,
    mut recorder: Option<&mut Recorder>,
) -> Result<TrainOutput> {
    schedule.validate()?;
    if env.phase() != Phase::Training {
        return Err(Error::Env(format!("training requires the training phase, not `{}`", env.phase())));
    }
    let mut policies = Policies::for_env(env, kind);
    let mut trace = Vec::with_capacity(schedule.episodes);

    for episode in 0..schedule.episodes {
        let epsilon = schedule.epsilon(episode);
        let mut taken: Vec<(AgentId, ObsKey, usize)> = Vec::with_capacity(policies.agents.len());
        let outcome = env.play_episode(|agent, obs| {
            let key = obs.key();
            let a = policies.act(agent.spec.id, &key, epsilon);
            taken.push((agent.spec.id, key, a));
            a
        })?;

        match kind {
            LearnerKind::Iql => {
                for (id, key, a) in &taken {
                    let i = policies.index[id];
                    iql_update(&mut policies.tables[i], key, *a, outcome.rewards[id], schedule.learn_rate);
                }
            }
            LearnerKind::Vdn if !taken.is_empty() => {
                let team = outcome.mean_av_reward().expect("AVs acted");
                // Tables in cycle order so they line up with `taken`.
                let order: Vec<usize> = taken.iter().map(|(id, _, _)| policies.index[id]).collect();
                let mut tables: Vec<QTable> = order.iter().map(|&i| policies.tables[i].clone()).collect();
                let keys: Vec<ObsKey> = taken.iter().map(|(_, k, _)| k.clone()).collect();
                let actions: Vec<usize> = taken.iter().map(|(_, _, a)| *a).collect();
                vdn_update(&mut tables, &keys, &actions, team, schedule.learn_rate)?;
                for (i, t) in order.into_iter().zip(tables) {
                    policies.tables[i] = t;
                }
            }
            LearnerKind::Vdn | LearnerKind::Random => {}
        }

        trace.push(outcome.mean_av_reward().unwrap_or(0.0));
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record_outcome(env.network(), &outcome)?;
        }
        if (episode + 1) % 100 == 0 {
            info!(
                "{kind} episode {}/{}: eps {:.3}, mean AV reward {:.3}",
                episode + 1,
                schedule.episodes,
                epsilon,
                trace[episode]
            );
        }
    }
    Ok(TrainOutput { policies, trace })
}

/// Runs `n_episodes` testing days with greedy policies (uniform for the
/// random baseline) and no learning. Moves the environment into the testing
/// phase if it is still training.
pub fn evaluate(
    env: &mut TrafficEnv,
    policies: &mut Policies,
    n_episodes: usize,
    mut recorder: Option<&mut Recorder>,
) -> Result<KpiAggregate> {
    if env.phase() == Phase::Training {
        env.begin_testing()?;
    }
    if env.phase() != Phase::Testing {
        return Err(Error::Env(format!("evaluation requires the testing phase, not `{}`", env.phase())));
    }
    let mut local = Recorder::new(env.network());
    for _ in 0..n_episodes {
        let outcome = env.play_episode(|agent, obs| policies.act(agent.spec.id, &obs.key(), 0.0))?;
        local.record_outcome(env.network(), &outcome)?;
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record_outcome(env.network(), &outcome)?;
        }
    }
    KpiAggregate::over(local.episodes())
}
