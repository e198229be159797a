//! Config-driven experiment pipeline: human-only days, mutation, AV
//! training, testing, and artifact output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behaviors::Behavior;
use crate::demand::{generate_demand, load_demand, AgentId, AgentSpec, DemandConfig, OdWeight};
use crate::error::{Error, Result};
use crate::humans::{HumanModel, HumanModelParams};
use crate::learners::{evaluate, train, LearnerKind, Policies, TrainSchedule};
use crate::marlenv::{EnvConfig, HumanSettings, MutationSpec, Phase, TrafficEnv};
use crate::netgraph::Network;
use crate::pathgen::{load_routes, RouteGenParams};
use crate::recorder::{render_charts, summarize, KpiAggregate, Recorder};
use crate::traffic::TrafficModel;

/// Number of trailing human-only episodes that form the baseline.
pub const BASELINE_EPISODES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkSection,
    pub demand: DemandSection,
    #[serde(default)]
    pub routes: RoutesSection,
    #[serde(default)]
    pub traffic: TrafficModel,
    #[serde(default)]
    pub humans: HumansSection,
    #[serde(default)]
    pub mutation: MutationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub testing: TestingSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundled: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub od: Vec<OdWeight>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Overrides the window length used to scale BPR flows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutesSection {
    pub k: usize,
    pub penalty: f64,
    pub max_detour: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for RoutesSection {
    fn default() -> Self {
        let p = RouteGenParams::default();
        RoutesSection {
            k: p.k,
            penalty: p.penalty,
            max_detour: p.max_detour,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumansSection {
    pub model: HumanModel,
    pub learn_rate: f64,
    pub logit_scale: f64,
    pub discount: f64,
    pub time_mult_spread: f64,
    /// Human-only episodes before mutation.
    pub episodes: usize,
    pub learn_in_training: bool,
    pub learn_in_testing: bool,
}

impl Default for HumansSection {
    fn default() -> Self {
        let p = HumanModelParams::default();
        HumansSection {
            model: p.model,
            learn_rate: p.learn_rate,
            logit_scale: p.logit_scale,
            discount: p.discount,
            time_mult_spread: 0.0,
            episodes: 100,
            learn_in_training: false,
            learn_in_testing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub share: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<AgentId>>,
    pub behavior: Behavior,
}

impl Default for MutationSection {
    fn default() -> Self {
        MutationSection {
            share: None,
            ids: None,
            behavior: Behavior::Selfish,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub algorithm: LearnerKind,
    pub episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub learn_rate: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        TrainingSection {
            algorithm: LearnerKind::Iql,
            episodes: s.episodes,
            eps_start: s.eps_start,
            eps_end: s.eps_end,
            learn_rate: s.learn_rate,
        }
    }
}

impl TrainingSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            episodes: self.episodes,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            learn_rate: self.learn_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestingSection {
    pub episodes: usize,
}

impl Default for TestingSection {
    fn default() -> Self {
        TestingSection { episodes: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check(ok: bool, field: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, msg()))
    }
}

/// Maps a module validation error onto the config field that caused it.
fn in_field<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = unknown_field_hint(&e).unwrap_or_else(|| "<toml>".into());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, msg } => Error::config(field, format!("{msg} (in {})", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg.with_base_dir(&base))
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn with_base_dir(mut self, base: &Path) -> Self {
        for p in [
            &mut self.network.path,
            &mut self.demand.path,
            &mut self.routes.path,
            &mut self.output.dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
        self
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<toml>", e.to_string()))
    }

    /// Field-level checks that need no files.
    pub fn validate(&self) -> Result<()> {
        match (&self.network.bundled, &self.network.path) {
            (Some(_), Some(_)) => return Err(Error::config("network", "set only one of `bundled` and `path`")),
            (None, None) => return Err(Error::config("network", "set `bundled` or `path`")),
            (Some(name), None) => check(Network::bundled_names().any(|n| n == name), "network.bundled", || {
                format!(
                    "unknown bundled network `{name}`; available: {}",
                    Network::bundled_names().collect::<Vec<_>>().join(", ")
                )
            })?,
            _ => {}
        }

        let d = &self.demand;
        if d.path.is_some() {
            check(
                d.n_agents.is_none() && d.window.is_none() && d.od.is_empty(),
                "demand",
                || "`path` excludes `n_agents`, `window` and `od`".into(),
            )?;
        } else {
            check(d.n_agents.is_some_and(|n| n >= 1), "demand.n_agents", || {
                "must be at least 1 when no demand file is given".into()
            })?;
            check(!d.od.is_empty(), "demand.od", || "at least one OD pair is required".into())?;
            for od in &d.od {
                check(od.weight.is_finite() && od.weight >= 0.0, "demand.od.weight", || {
                    format!("must be finite and nonnegative, got {}", od.weight)
                })?;
            }
            check(d.od.iter().any(|od| od.weight > 0.0), "demand.od.weight", || "all weights are zero".into())?;
            if let Some([a, b]) = d.window {
                check(a <= b, "demand.window", || format!("start {a} exceeds end {b}"))?;
            }
        }
        if let Some(w) = d.window_secs {
            check(w.is_finite() && w > 0.0, "demand.window_secs", || format!("must be positive, got {w}"))?;
        }

        let r = &self.routes;
        check(r.k >= 1, "routes.k", || "must be at least 1".into())?;
        check(r.penalty.is_finite() && r.penalty > 1.0, "routes.penalty", || {
            format!("must exceed 1, got {}", r.penalty)
        })?;
        check(r.max_detour.is_finite() && r.max_detour >= 1.0, "routes.max_detour", || {
            format!("must be at least 1, got {}", r.max_detour)
        })?;

        in_field("traffic", self.traffic.validate())?;

        let h = &self.humans;
        check(h.learn_rate > 0.0 && h.learn_rate <= 1.0, "humans.learn_rate", || {
            format!("must be in (0, 1], got {}", h.learn_rate)
        })?;
        check(h.logit_scale >= 0.0, "humans.logit_scale", || format!("must be >= 0, got {}", h.logit_scale))?;
        check(h.discount > 0.0 && h.discount <= 1.0, "humans.discount", || {
            format!("must be in (0, 1], got {}", h.discount)
        })?;
        check((0.0..1.0).contains(&h.time_mult_spread), "humans.time_mult_spread", || {
            format!("must be in [0, 1), got {}", h.time_mult_spread)
        })?;

        let m = &self.mutation;
        if m.share.is_some() && m.ids.is_some() {
            return Err(Error::config("mutation", "set only one of `share` and `ids`"));
        }
        if let Some(s) = m.share {
            check((0.0..=1.0).contains(&s), "mutation.share", || format!("must be in [0, 1], got {s}"))?;
        }

        let t = &self.training;
        if t.episodes > 0 {
            in_field("training", t.schedule().validate())?;
        }
        Ok(())
    }

    pub fn load_network(&self) -> Result<Network> {
        match (&self.network.bundled, &self.network.path) {
            (Some(name), _) => in_field("network.bundled", Network::bundled(name)),
            (None, Some(path)) => in_field("network.path", Network::load(path)),
            (None, None) => Err(Error::config("network", "set `bundled` or `path`")),
        }
    }

    /// Agents and the BPR window length in seconds.
    pub fn build_demand(&self, net: &Network) -> Result<(Vec<AgentSpec>, f64)> {
        let d = &self.demand;
        let (agents, span) = match &d.path {
            Some(path) => {
                let agents = in_field("demand.path", load_demand(path, net))?;
                let lo = agents.iter().map(|a| a.departure).min().unwrap_or(0);
                let hi = agents.iter().map(|a| a.departure).max().unwrap_or(0);
                (agents, hi - lo)
            }
            None => {
                let window = d.window.unwrap_or([0, 0]);
                let cfg = DemandConfig {
                    n_agents: d.n_agents.unwrap_or(0),
                    od_pairs: d.od.clone(),
                    window,
                    seed: self.seed,
                };
                (in_field("demand", generate_demand(net, &cfg))?, window[1] - window[0])
            }
        };
        check(!agents.is_empty(), "demand", || "no agents".into())?;
        Ok((agents, d.window_secs.unwrap_or((span as f64).max(1.0))))
    }

    pub fn build_env(&self) -> Result<TrafficEnv> {
        let net = self.load_network()?;
        let (agents, window_secs) = self.build_demand(&net)?;
        let routes = match &self.routes.path {
            Some(p) => Some(in_field("routes.path", load_routes(&net, p))?),
            None => None,
        };
        let h = &self.humans;
        let mutation = match (&self.mutation.share, &self.mutation.ids) {
            (_, Some(ids)) => MutationSpec::Ids(ids.clone()),
            (Some(s), None) => MutationSpec::Share(*s),
            (None, None) => MutationSpec::Share(0.0),
        };
        let cfg = EnvConfig {
            network: Arc::new(net),
            agents,
            route_params: RouteGenParams {
                k: self.routes.k,
                penalty: self.routes.penalty,
                max_detour: self.routes.max_detour,
            },
            routes,
            traffic: self.traffic,
            window_secs,
            humans: HumanSettings {
                params: HumanModelParams {
                    model: h.model,
                    learn_rate: h.learn_rate,
                    logit_scale: h.logit_scale,
                    discount: h.discount,
                    time_mult: 1.0,
                },
                time_mult_spread: h.time_mult_spread,
                learn_in_training: h.learn_in_training,
                learn_in_testing: h.learn_in_testing,
            },
            mutation,
            av_behavior: self.mutation.behavior,
            seed: self.seed,
        };
        TrafficEnv::new(cfg)
    }
}

fn unknown_field_hint(e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Everything a run produced, kept in memory.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub seed: u64,
    pub algorithm: LearnerKind,
    pub mutated: Vec<AgentId>,
    /// Pooled over the last human-only episodes; absent when there were none.
    pub human_baseline: Option<KpiAggregate>,
    /// Mean AV reward per training episode.
    pub training_trace: Vec<f64>,
    pub testing: Option<KpiAggregate>,
    pub recorder: Recorder,
    pub policies: Policies,
}

pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut env = cfg.build_env()?;
    let mut recorder = Recorder::new(env.network());

    for _ in 0..cfg.humans.episodes {
        let outcome = env.play_episode(|_, _| unreachable!("no AVs before mutation"))?;
        recorder.record_outcome(env.network(), &outcome)?;
    }
    let tail_start = recorder.len().saturating_sub(BASELINE_EPISODES);
    let human_baseline = if recorder.is_empty() {
        None
    } else {
        Some(KpiAggregate::over(&recorder.episodes()[tail_start..])?)
    };
    if let Some(b) = &human_baseline {
        info!("human-only baseline: mean travel time {:.3}", b.mean_tt_all);
    }

    let mutated = env.mutation()?;
    info!("mutated {} of {} agents", mutated.len(), env.agents().len());

    let kind = cfg.training.algorithm;
    let (mut policies, training_trace) = if cfg.training.episodes > 0 {
        let out = train(&mut env, kind, &cfg.training.schedule(), Some(&mut recorder))?;
        (out.policies, out.trace)
    } else {
        (Policies::for_env(&env, kind), Vec::new())
    };

    let testing = if cfg.testing.episodes > 0 {
        Some(evaluate(&mut env, &mut policies, cfg.testing.episodes, Some(&mut recorder))?)
    } else {
        None
    };
    debug_assert!(env.phase() != Phase::HumanOnly);

    Ok(RunReport {
        seed: cfg.seed,
        algorithm: kind,
        mutated,
        human_baseline,
        training_trace,
        testing,
        recorder,
        policies,
    })
}

fn ensure_empty_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::config(
                "output.dir",
                format!("{} is not empty; refusing to overwrite", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the standard artifact set for a finished run into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, report: &RunReport, dir: &Path) -> Result<()> {
    report.recorder.flush(dir)?;
    if !report.recorder.is_empty() {
        let summary = summarize(&report.recorder)?;
        summary.write_json(&dir.join("kpis.json"))?;
        render_charts(&summary, &dir.join("charts"))?;
    }
    let path = dir.join("policies.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report.policies.write_csv(std::io::BufWriter::new(file))?;

    let mut echo = cfg.clone();
    echo.output.dir = None;
    let path = dir.join("config.toml");
    std::fs::write(&path, echo.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

/// Runs one experiment and writes its artifacts into `out`, which must be
/// empty or absent.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    ensure_empty_dir(out)?;
    let report = run_in_memory(cfg)?;
    write_artifacts(cfg, &report, out)?;
    Ok(report)
}

/// Runs one isolated replication per seed in parallel, each into
/// `out/seed_{seed}`.
pub fn run_replications(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    ensure_empty_dir(out)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            run_experiment(&c, &out.join(format!("seed_{seed}")))
        })
        .collect()
}

/// Mean testing AV reward per algorithm and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: BTreeMap<LearnerKind, Vec<f64>>,
}

impl ComparisonTable {
    pub fn mean(&self, kind: LearnerKind) -> Option<f64> {
        let v = self.rows.get(&kind)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "algorithm")?;
        for s in &self.seeds {
            write!(f, ",seed_{s}")?;
        }
        writeln!(f, ",mean")?;
        for (kind, values) in &self.rows {
            write!(f, "{kind}")?;
            for v in values {
                write!(f, ",{v:.4}")?;
            }
            writeln!(f, ",{:.4}", self.mean(*kind).unwrap_or(f64::NAN))?;
        }
        Ok(())
    }
}

/// Runs every (algorithm, seed) pair in memory and tabulates the mean AV
/// reward over the testing episodes.
pub fn compare_algorithms(cfg: &ExperimentConfig, algorithms: &[LearnerKind], seeds: &[u64]) -> Result<ComparisonTable> {
    if algorithms.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one algorithm and one seed".into()));
    }
    check(cfg.testing.episodes > 0, "testing.episodes", || "comparison needs testing episodes".into())?;
    let jobs: Vec<(LearnerKind, u64)> = algorithms
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<((LearnerKind, u64), f64)> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let mut c = cfg.clone();
            c.seed = seed;
            c.training.algorithm = kind;
            let report = run_in_memory(&c)?;
            let reward = report
                .testing
                .and_then(|t| t.mean_av_reward)
                .ok_or_else(|| Error::config("mutation", "comparison needs at least one AV"))?;
            Ok(((kind, seed), reward))
        })
        .collect::<Result<_>>()?;
    let mut rows: BTreeMap<LearnerKind, Vec<f64>> = BTreeMap::new();
    for ((kind, _), r) in results {
        rows.entry(kind).or_default().push(r);
    }
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3

[network]
bundled = "two_route"

[demand]
n_agents = 6
window = [0, 600]
od = [{ origin = "O", dest = "D" }]

[humans]
episodes = 5

[mutation]
share = 0.5
behavior = "selfish"

[training]
algorithm = "iql"
episodes = 20

[testing]
episodes = 3
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.routes, RoutesSection::default());
        assert_eq!(cfg.traffic, TrafficModel::default());
        assert_eq!(cfg.humans.model, HumanModel::WeightedAverage);
        assert_eq!(cfg.training.eps_end, 0.05);
    }

    #[test]
    fn share_out_of_range_names_field() {
        let text = BASE.replace("share = 0.5", "share = 1.5");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "mutation.share"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = BASE.replace("episodes = 3", "episodes = 3\nbogus = 1");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn pipeline_counts_episodes() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let report = run_in_memory(&cfg).unwrap();
        assert_eq!(report.recorder.len(), 5 + 20 + 3);
        assert_eq!(report.mutated.len(), 3);
        assert_eq!(report.training_trace.len(), 20);
        assert_eq!(report.human_baseline.unwrap().episodes, 5);
        assert_eq!(report.testing.unwrap().episodes, 3);
    }

    #[test]
    fn degenerate_run_is_valid() {
        let text = BASE
            .replace("episodes = 5", "episodes = 0")
            .replace("share = 0.5", "share = 0.0");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let report = run_in_memory(&cfg).unwrap();
        assert!(report.human_baseline.is_none());
        assert!(report.mutated.is_empty());
        assert_eq!(report.recorder.len(), 23);
    }

    #[test]
    fn refuses_nonempty_output() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "").unwrap();
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "output.dir"));
    }
}
