//! Episode records, KPI aggregation, and artifact writers (CSV, JSON, SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::demand::{AgentId, AgentKind};
use crate::error::{Error, Result};
use crate::marlenv::{EpisodeOutcome, Phase};
use crate::netgraph::Network;

const EPISODE_HEADER: [&str; 10] = [
    "episode",
    "phase",
    "id",
    "kind",
    "origin",
    "dest",
    "route_index",
    "departure",
    "travel_time",
    "reward",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AgentRecord {
    pub id: AgentId,
    pub kind: AgentKind,
    pub origin: String,
    pub dest: String,
    pub route_index: usize,
    pub departure: u64,
    pub travel_time: f64,
    /// AVs only.
    pub reward: Option<f64>,
}

impl AgentRecord {
    pub fn od_key(&self) -> String {
        format!("{}->{}", self.origin, self.dest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub phase: Phase,
    pub agents: Vec<AgentRecord>,
}

/// Append-only store of episode records plus per-episode edge flows.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    episodes: Vec<EpisodeRecord>,
    edge_ids: Vec<String>,
    flows: Vec<(u64, Vec<u32>)>,
}

impl Recorder {
    pub fn new(net: &Network) -> Self {
        Recorder {
            episodes: Vec::new(),
            edge_ids: net.edges().iter().map(|e| e.id.clone()).collect(),
            flows: Vec::new(),
        }
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn record(&mut self, rec: EpisodeRecord) -> Result<()> {
        if rec.agents.is_empty() {
            return Err(Error::InvalidArgument(format!("episode {} has no agents", rec.episode)));
        }
        if let Some(first) = self.episodes.first() {
            let mut expected: Vec<AgentId> = first.agents.iter().map(|a| a.id).collect();
            let mut got: Vec<AgentId> = rec.agents.iter().map(|a| a.id).collect();
            expected.sort_unstable();
            got.sort_unstable();
            if expected != got {
                return Err(Error::InvalidArgument(format!(
                    "episode {} has a different agent set than earlier episodes",
                    rec.episode
                )));
            }
        }
        if let Some(a) = rec.agents.iter().find(|a| !(a.travel_time > 0.0 && a.travel_time.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "agent {} has invalid travel time {}",
                a.id, a.travel_time
            )));
        }
        self.episodes.push(rec);
        Ok(())
    }

    pub fn record_outcome(&mut self, net: &Network, out: &EpisodeOutcome) -> Result<()> {
        let agents = out
            .agents
            .iter()
            .map(|a| AgentRecord {
                id: a.id,
                kind: a.kind,
                origin: net.node(a.origin).id.clone(),
                dest: net.node(a.dest).id.clone(),
                route_index: a.route_index,
                departure: a.departure,
                travel_time: a.travel_time,
                reward: a.reward,
            })
            .collect();
        self.record(EpisodeRecord {
            episode: out.day,
            phase: out.phase,
            agents,
        })?;
        self.flows.push((out.day, out.edge_flows.clone()));
        Ok(())
    }

    pub fn write_episodes_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EPISODE_HEADER)?;
        for ep in &self.episodes {
            for a in &ep.agents {
                w.write_record([
                    ep.episode.to_string(),
                    ep.phase.to_string(),
                    a.id.to_string(),
                    a.kind.to_string(),
                    a.origin.clone(),
                    a.dest.clone(),
                    a.route_index.to_string(),
                    a.departure.to_string(),
                    a.travel_time.to_string(),
                    a.reward.map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<episodes csv>", e))?;
        Ok(())
    }

    pub fn write_flows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "edge", "flow"])?;
        for (episode, flows) in &self.flows {
            for (edge, flow) in self.edge_ids.iter().zip(flows) {
                w.write_record([episode.to_string(), edge.clone(), flow.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<flows csv>", e))?;
        Ok(())
    }

    /// Writes `episodes.csv` and `edge_flows.csv` into `dir`.
    pub fn flush(&self, dir: &Path) -> Result<()> {
        let path = dir.join("episodes.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_episodes_csv(std::io::BufWriter::new(file))?;
        let path = dir.join("edge_flows.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_flows_csv(std::io::BufWriter::new(file))
    }

    /// Rebuilds the episode records from an `episodes.csv` body. Edge flows
    /// are not part of that file and stay empty.
    pub fn read_episodes_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != EPISODE_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{}`", EPISODE_HEADER.join(",")),
            });
        }
        let mut rec = Recorder::default();
        let mut current: Option<EpisodeRecord> = None;
        for row in reader.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str| Error::Parse {
                line,
                msg: format!("bad {what} `{}`", &row[EPISODE_HEADER.iter().position(|h| *h == what).unwrap_or(0)]),
            };
            let episode: u64 = row[0].parse().map_err(|_| bad("episode"))?;
            let phase: Phase = row[1].parse().map_err(|_| bad("phase"))?;
            let agent = AgentRecord {
                id: row[2].parse().map_err(|_| bad("id"))?,
                kind: row[3].parse().map_err(|_| bad("kind"))?,
                origin: row[4].to_string(),
                dest: row[5].to_string(),
                route_index: row[6].parse().map_err(|_| bad("route_index"))?,
                departure: row[7].parse().map_err(|_| bad("departure"))?,
                travel_time: row[8].parse().map_err(|_| bad("travel_time"))?,
                reward: match &row[9] {
                    "" => None,
                    s => Some(s.parse().map_err(|_| bad("reward"))?),
                },
            };
            match current.as_mut() {
                Some(ep) if ep.episode == episode => ep.agents.push(agent),
                _ => {
                    if let Some(done) = current.take() {
                        rec.record(done)?;
                    }
                    current = Some(EpisodeRecord {
                        episode,
                        phase,
                        agents: vec![agent],
                    });
                }
            }
        }
        if let Some(done) = current {
            rec.record(done)?;
        }
        Ok(rec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::read_episodes_csv(&text)
    }
}

/// KPIs pooled over a set of episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct KpiAggregate {
    pub episodes: usize,
    pub mean_tt_human: Option<f64>,
    pub mean_tt_av: Option<f64>,
    pub mean_tt_all: f64,
    pub mean_av_reward: Option<f64>,
    /// Human mean over AV mean; absent without both groups.
    pub ratio_human_av: Option<f64>,
    /// Per OD key (`origin->dest`), the share of agents on each route index.
    pub route_fractions: BTreeMap<String, Vec<f64>>,
}

fn route_widths(records: &[EpisodeRecord]) -> BTreeMap<String, usize> {
    let mut widths = BTreeMap::new();
    for a in records.iter().flat_map(|e| &e.agents) {
        let w = widths.entry(a.od_key()).or_insert(0);
        *w = (*w).max(a.route_index + 1);
    }
    widths
}

impl KpiAggregate {
    pub fn over(records: &[EpisodeRecord]) -> Result<Self> {
        Self::with_widths(records, &route_widths(records))
    }

    fn with_widths(records: &[EpisodeRecord], widths: &BTreeMap<String, usize>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("no episodes to summarize".into()));
        }
        let (mut hu_sum, mut hu_n, mut av_sum, mut av_n) = (0.0, 0usize, 0.0, 0usize);
        let (mut rw_sum, mut rw_n) = (0.0, 0usize);
        let mut route_counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for a in records.iter().flat_map(|e| &e.agents) {
            match a.kind {
                AgentKind::Human => {
                    hu_sum += a.travel_time;
                    hu_n += 1;
                }
                AgentKind::Av => {
                    av_sum += a.travel_time;
                    av_n += 1;
                }
            }
            if let Some(r) = a.reward {
                rw_sum += r;
                rw_n += 1;
            }
            let key = a.od_key();
            let width = widths.get(&key).copied().unwrap_or(0).max(a.route_index + 1);
            let counts = route_counts.entry(key).or_insert_with(|| vec![0; width]);
            if counts.len() < width {
                counts.resize(width, 0);
            }
            counts[a.route_index] += 1;
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let mean_tt_human = mean(hu_sum, hu_n);
        let mean_tt_av = mean(av_sum, av_n);
        let route_fractions = route_counts
            .into_iter()
            .map(|(k, counts)| {
                let total: usize = counts.iter().sum();
                (k, counts.iter().map(|&c| c as f64 / total as f64).collect())
            })
            .collect();
        Ok(KpiAggregate {
            episodes: records.len(),
            mean_tt_human,
            mean_tt_av,
            mean_tt_all: mean(hu_sum + av_sum, hu_n + av_n).unwrap_or(0.0),
            mean_av_reward: mean(rw_sum, rw_n),
            ratio_human_av: mean_tt_human.zip(mean_tt_av).map(|(h, a)| h / a),
            route_fractions,
        })
    }

    fn to_json(&self) -> Value {
        json!({
            "episodes": self.episodes,
            "mean_travel_time": {
                "human": self.mean_tt_human.map(sig6),
                "av": self.mean_tt_av.map(sig6),
                "all": sig6(self.mean_tt_all),
            },
            "mean_av_reward": self.mean_av_reward.map(sig6),
            "ratio_human_av": self.ratio_human_av.map(sig6),
            "route_fractions": self.route_fractions.iter()
                .map(|(k, v)| (k.clone(), Value::from(v.iter().map(|&x| sig6(x)).collect::<Vec<_>>())))
                .collect::<Map<String, Value>>(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeKpi {
    pub episode: u64,
    pub phase: Phase,
    pub kpi: KpiAggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KpiSummary {
    pub episodes: Vec<EpisodeKpi>,
    pub phases: BTreeMap<Phase, KpiAggregate>,
}

pub fn summarize(store: &Recorder) -> Result<KpiSummary> {
    let records = store.episodes();
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize an empty store".into()));
    }
    let widths = route_widths(records);
    let episodes = records
        .iter()
        .map(|r| {
            Ok(EpisodeKpi {
                episode: r.episode,
                phase: r.phase,
                kpi: KpiAggregate::with_widths(std::slice::from_ref(r), &widths)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_phase: BTreeMap<Phase, Vec<EpisodeRecord>> = BTreeMap::new();
    for r in records {
        by_phase.entry(r.phase).or_default().push(r.clone());
    }
    let phases = by_phase
        .into_iter()
        .map(|(p, recs)| Ok((p, KpiAggregate::with_widths(&recs, &widths)?)))
        .collect::<Result<_>>()?;
    Ok(KpiSummary { episodes, phases })
}

/// Rounds to six significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

impl KpiSummary {
    /// Pretty JSON with sorted keys and floats rounded to six significant digits.
    pub fn to_json_string(&self) -> String {
        let episodes: Vec<Value> = self
            .episodes
            .iter()
            .map(|e| {
                let mut v = e.kpi.to_json();
                let obj = v.as_object_mut().expect("object");
                obj.remove("episodes");
                obj.insert("episode".into(), json!(e.episode));
                obj.insert("phase".into(), json!(e.phase.as_str()));
                v
            })
            .collect();
        let phases: Map<String, Value> = self
            .phases
            .iter()
            .map(|(p, k)| (p.as_str().to_string(), k.to_json()))
            .collect();
        let doc = json!({ "episodes": episodes, "phases": phases });
        let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Series {
    name: String,
    points: Vec<(f64, Option<f64>)>,
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn line_chart(title: &str, y_label: &str, x_range: (u64, u64), y_fixed: Option<(f64, f64)>, series: &[Series]) -> String {
    const W: f64 = 760.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 170.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;

    let ys = series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1));
    let (mut y_min, mut y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if let Some(fixed) = y_fixed {
        (y_min, y_max) = fixed;
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        let pad = if y_min.abs() > 1.0 { y_min.abs() * 0.05 } else { 0.5 };
        y_min -= pad;
        y_max += pad;
    }
    let (x0, x1) = (x_range.0 as f64, x_range.1 as f64);
    let sx = |x: f64| {
        if x1 > x0 {
            LEFT + (x - x0) / (x1 - x0) * plot_w
        } else {
            LEFT + plot_w / 2.0
        }
    };
    let sy = |y: f64| TOP + (y_max - y) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + plot_w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );

    // X ticks: up to five evenly spaced integer episodes including both ends.
    let mut xticks: Vec<u64> = (0..5)
        .map(|i| x_range.0 + ((x_range.1 - x_range.0) as f64 * i as f64 / 4.0).round() as u64)
        .collect();
    xticks.dedup();
    for t in xticks {
        let x = sx(t as f64);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text class="xtick" x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            TOP + plot_h + 18.0
        );
    }
    for i in 0..5 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT,
            LEFT + plot_w
        );
        let _ = writeln!(
            svg,
            r#"<text class="ytick" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text>"#,
        LEFT + plot_w / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Split the series at missing values.
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            match y {
                Some(y) => runs.last_mut().expect("nonempty").push((sx(x), sy(y))),
                None if !runs.last().expect("nonempty").is_empty() => runs.push(Vec::new()),
                None => {}
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            if run.len() == 1 {
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, run[0].0, run[0].1);
            } else {
                let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the three standard charts into `dir` and returns their paths.
pub fn render_charts(summary: &KpiSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.episodes.is_empty() {
        return Err(Error::InvalidArgument("summary has no episodes".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = summary.episodes.iter().map(|e| e.episode).min().unwrap_or(1);
    let last = summary.episodes.iter().map(|e| e.episode).max().unwrap_or(1);
    let x_range = (first, last);
    let series = |name: &str, f: &dyn Fn(&KpiAggregate) -> Option<f64>| Series {
        name: name.to_string(),
        points: summary.episodes.iter().map(|e| (e.episode as f64, f(&e.kpi))).collect(),
    };

    let travel = line_chart(
        "Mean travel time",
        "seconds",
        x_range,
        None,
        &[
            series("human", &|k| k.mean_tt_human),
            series("av", &|k| k.mean_tt_av),
            series("all", &|k| Some(k.mean_tt_all)),
        ],
    );
    let rewards = line_chart("Mean AV reward", "reward", x_range, None, &[series("av", &|k| k.mean_av_reward)]);

    let mut route_series = Vec::new();
    let widths: BTreeMap<&String, usize> = summary
        .episodes
        .iter()
        .flat_map(|e| e.kpi.route_fractions.iter().map(|(k, v)| (k, v.len())))
        .fold(BTreeMap::new(), |mut m, (k, w)| {
            let e = m.entry(k).or_insert(0);
            *e = (*e).max(w);
            m
        });
    for (od, width) in widths {
        for r in 0..width {
            route_series.push(series(&format!("{od} #{r}"), &|k| {
                k.route_fractions.get(od).map(|v| v.get(r).copied().unwrap_or(0.0))
            }));
        }
    }
    let routes = line_chart("Route choice fractions", "fraction", x_range, Some((0.0, 1.0)), &route_series);

    let mut paths = Vec::new();
    for (name, body) in [("travel_times.svg", travel), ("rewards.svg", rewards), ("route_choices.svg", routes)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
