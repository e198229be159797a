use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use routesim::demand::{generate_demand, load_demand, write_demand_csv, DemandConfig, OdWeight};
use routesim::experiment::{compare_algorithms, run_experiment, run_replications, ExperimentConfig};
use routesim::learners::LearnerKind;
use routesim::pathgen::{generate_routes, write_routes_csv, RouteGenParams, RouteTable};
use routesim::recorder::{render_charts, summarize, Recorder};
use routesim::Network;

#[derive(Parser)]
#[command(name = "routesim", version, about = "Day-to-day route choice with human drivers and learning AVs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.dir`. Must be empty or absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of parallel replications, seeded from the config seed upward.
        #[arg(long)]
        replications: Option<usize>,
        /// Explicit replication seeds.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sample a demand CSV.
    GenDemand {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Departure window in seconds, inclusive.
        #[arg(long, num_args = 2, value_names = ["START", "END"], default_values_t = [0, 600])]
        window: Vec<u64>,
        /// OD pair as ORIGIN:DEST or ORIGIN:DEST:WEIGHT; repeatable.
        #[arg(long)]
        od: Vec<String>,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate route sets for OD pairs and write them as CSV.
    GenPaths {
        #[command(flatten)]
        net: NetArgs,
        /// Take OD pairs from a demand CSV.
        #[arg(long)]
        demand: Option<PathBuf>,
        /// OD pair as ORIGIN:DEST; repeatable.
        #[arg(long)]
        od: Vec<String>,
        #[arg(long, default_value_t = RouteGenParams::default().k)]
        k: usize,
        #[arg(long, default_value_t = RouteGenParams::default().penalty)]
        penalty: f64,
        #[arg(long, default_value_t = RouteGenParams::default().max_detour)]
        max_detour: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render charts and KPIs from an episodes CSV.
    Plot {
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate mean testing AV reward per algorithm over several seeds.
    Compare {
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values = ["iql", "vdn", "random"])]
        algorithms: Vec<LearnerKind>,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NetArgs {
    /// Network CSV file.
    #[arg(long, conflicts_with = "bundled")]
    network: Option<PathBuf>,
    /// Name of a bundled network.
    #[arg(long)]
    bundled: Option<String>,
}

impl NetArgs {
    fn load(&self) -> Result<Network> {
        match (&self.network, &self.bundled) {
            (Some(path), _) => Network::load(path).with_context(|| format!("loading network {}", path.display())),
            (None, Some(name)) => Ok(Network::bundled(name)?),
            (None, None) => Ok(Network::bundled("two_route")?),
        }
    }
}

fn parse_od(spec: &str) -> Result<OdWeight> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [o, d] => Ok(OdWeight { origin: o.to_string(), dest: d.to_string(), weight: 1.0 }),
        [o, d, w] => Ok(OdWeight {
            origin: o.to_string(),
            dest: d.to_string(),
            weight: w.parse().with_context(|| format!("bad OD weight in `{spec}`"))?,
        }),
        _ => bail!("OD pair `{spec}` is not ORIGIN:DEST[:WEIGHT]"),
    }
}

/// First node to last node, the convention of the bundled networks.
fn default_od(net: &Network) -> Result<OdWeight> {
    let (first, last) = (net.nodes().first(), net.nodes().last());
    match (first, last) {
        (Some(o), Some(d)) if o.id != d.id => Ok(OdWeight { origin: o.id.clone(), dest: d.id.clone(), weight: 1.0 }),
        _ => bail!("network has fewer than two nodes; pass --od"),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn init_logging() -> Result<()> {
    let level = std::env::var("ROUTESIM_LOG").unwrap_or_else(|_| "error".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        bail!("ROUTESIM_LOG must be one of error, info, debug (got `{level}`)");
    }
    env_logger::Builder::new().parse_filters(&level).init();
    Ok(())
}

fn run(config: &Path, out: Option<PathBuf>, replications: Option<usize>, seeds: Vec<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| anyhow!("config error in `output.dir`: no output directory; set it or pass --out"))?;

    let seeds = match (replications, seeds.is_empty()) {
        (Some(n), false) if n != seeds.len() => bail!("--replications {n} does not match {} seeds", seeds.len()),
        (_, false) => seeds,
        (Some(0), true) => bail!("--replications must be at least 1"),
        (Some(n), true) if n > 1 => (0..n as u64).map(|i| cfg.seed + i).collect(),
        _ => Vec::new(),
    };

    if seeds.is_empty() {
        let report = run_experiment(&cfg, &out)?;
        println!("wrote {}", out.display());
        if let Some(b) = report.human_baseline.as_ref().and_then(|k| k.mean_tt_human) {
            println!("human-only baseline mean travel time: {b:.3} s");
        }
        if let Some(t) = &report.testing {
            if let Some(h) = t.mean_tt_human {
                println!("testing human mean travel time: {h:.3} s");
            }
            if let Some(r) = t.mean_av_reward {
                println!("testing mean AV reward: {r:.3}");
            }
            if let Some(r) = t.ratio_human_av {
                println!("testing human/AV travel-time ratio: {r:.4}");
            }
        }
    } else {
        let reports = run_replications(&cfg, &seeds, &out)?;
        for r in &reports {
            let reward = r.testing.as_ref().and_then(|k| k.mean_av_reward);
            match reward {
                Some(v) => println!("seed {}: testing mean AV reward {v:.3}", r.seed),
                None => println!("seed {}: done", r.seed),
            }
        }
        println!("wrote {} replications under {}", reports.len(), out.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    init_logging()?;
    match Cli::parse().command {
        Command::Run { config, out, replications, seeds } => run(&config, out, replications, seeds),
        Command::GenDemand { net, n, seed, window, od, out } => {
            let network = net.load()?;
            let od_pairs = if od.is_empty() {
                vec![default_od(&network)?]
            } else {
                od.iter().map(|s| parse_od(s)).collect::<Result<_>>()?
            };
            let cfg = DemandConfig { n_agents: n, od_pairs, window: [window[0], window[1]], seed };
            let agents = generate_demand(&network, &cfg)?;
            write_demand_csv(&network, &agents, output(out.as_deref())?)?;
            info!("generated {} agents", agents.len());
            Ok(())
        }
        Command::GenPaths { net, demand, od, k, penalty, max_detour, out } => {
            let network = net.load()?;
            let params = RouteGenParams { k, penalty, max_detour };
            params.validate()?;
            let mut pairs = Vec::new();
            if let Some(path) = &demand {
                let agents = load_demand(path, &network)?;
                pairs.extend(agents.iter().map(|a| (a.origin, a.dest)));
            }
            for s in &od {
                let w = parse_od(s)?;
                pairs.push((network.node_idx(&w.origin)?, network.node_idx(&w.dest)?));
            }
            if pairs.is_empty() {
                let w = default_od(&network)?;
                pairs.push((network.node_idx(&w.origin)?, network.node_idx(&w.dest)?));
            }
            let mut table = RouteTable::new();
            for (o, d) in pairs {
                if let std::collections::btree_map::Entry::Vacant(slot) = table.entry((o, d)) {
                    slot.insert(generate_routes(&network, o, d, &params)?);
                }
            }
            write_routes_csv(&network, &table, output(out.as_deref())?)?;
            Ok(())
        }
        Command::Plot { episodes, out } => {
            let store = Recorder::load(&episodes)?;
            let summary = summarize(&store)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            summary.write_json(&out.join("kpis.json"))?;
            for p in render_charts(&summary, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Compare { config, seeds, algorithms, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let table = compare_algorithms(&cfg, &algorithms, &seeds)?;
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, table.to_string()).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
    }
}
