//! Brute-force oracles and shared generators for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use routesim::demand::{AgentKind, AgentSpec};
use routesim::humans::{choice_probabilities, CostBeliefs, HumanModel, HumanModelParams};
use routesim::learners::{iql_update, vdn_update, QTable};
use routesim::marlenv::{EnvConfig, HumanSettings, MutationSpec, ObsKey, TrafficEnv};
use routesim::netgraph::{EdgeIdx, EdgeSpec, Network, Node, NodeIdx};
use routesim::pathgen::{Route, RouteGenParams};
use routesim::recorder::{summarize, AgentRecord, EpisodeRecord, Recorder};
use routesim::traffic::{simulate, Assignment, TrafficModel, Trip};
use routesim::{Behavior, Phase};

/// Builds a network on nodes `v0..v{n-1}`. Self-loops are skipped.
pub fn network_from(n: usize, edges: &[(usize, usize, u32, u32)]) -> Network {
    let nodes = (0..n)
        .map(|i| Node {
            id: format!("v{i}"),
            x: None,
            y: None,
        })
        .collect();
    let specs = edges
        .iter()
        .filter(|(a, b, _, _)| a != b)
        .enumerate()
        .map(|(i, &(a, b, len, speed))| EdgeSpec {
            id: format!("e{i}"),
            from: format!("v{a}"),
            to: format!("v{b}"),
            length: len as f64,
            speed: speed as f64,
            capacity: 100.0,
        })
        .collect();
    Network::new(nodes, specs).expect("generated network is valid")
}

pub fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, u32, u32)>)> {
    (2usize..=10).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec((0..n, 0..n, 1u32..50, 1u32..4), 1..=3 * n),
        )
    })
}

/// Every simple path from `o` to `d`, by depth-first enumeration.
pub fn simple_paths(net: &Network, o: NodeIdx, d: NodeIdx) -> Vec<Vec<EdgeIdx>> {
    fn dfs(net: &Network, at: NodeIdx, d: NodeIdx, seen: &mut Vec<bool>, path: &mut Vec<EdgeIdx>, out: &mut Vec<Vec<EdgeIdx>>) {
        if at == d {
            out.push(path.clone());
            return;
        }
        for &e in net.outgoing(at) {
            let to = net.edge(e).to;
            if !seen[to.0] {
                seen[to.0] = true;
                path.push(e);
                dfs(net, to, d, seen, path, out);
                path.pop();
                seen[to.0] = false;
            }
        }
    }
    let mut seen = vec![false; net.nodes().len()];
    seen[o.0] = true;
    let mut out = Vec::new();
    dfs(net, o, d, &mut seen, &mut Vec::new(), &mut out);
    out
}

pub fn path_cost(weights: &[f64], path: &[EdgeIdx]) -> f64 {
    path.iter().map(|e| weights[e.0]).sum()
}

/// Congested time of one edge from first principles.
pub fn bpr_oracle(t0: f64, alpha: f64, beta: f64, count: u32, window_secs: f64, capacity: f64) -> f64 {
    let hourly = count as f64 * 3600.0 / window_secs.max(1.0);
    t0 * (1.0 + alpha * (hourly / capacity).powf(beta))
}

/// Two-route network route times when `n0` of `n` agents take the faster route.
pub fn two_route_times(n0: u32, n: u32, window_secs: f64) -> (f64, f64) {
    let t0 = 2.0 * bpr_oracle(50.0, 0.15, 4.0, n0, window_secs, 60.0);
    let t1 = 2.0 * bpr_oracle(60.0, 0.15, 4.0, n - n0, window_secs, 60.0);
    (t0, t1)
}

/// Split minimizing the route time gap, among all n + 1 candidates.
pub fn equilibrium_split(n: u32, window_secs: f64) -> u32 {
    (0..=n)
        .min_by(|&a, &b| {
            let gap = |k| {
                let (x, y) = two_route_times(k, n, window_secs);
                (x - y).abs()
            };
            gap(a).total_cmp(&gap(b))
        })
        .expect("nonempty")
}

/// Independent single-edge point queue: FIFO by (departure, index).
pub fn queue_oracle(departures: &[u64], t0: f64, capacity: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..departures.len()).collect();
    order.sort_by_key(|&i| (departures[i], i));
    let headway = 3600.0 / capacity;
    let mut exits = vec![0.0; departures.len()];
    let mut last = f64::NEG_INFINITY;
    for i in order {
        let exit = (departures[i] as f64 + t0).max(last + headway);
        exits[i] = exit;
        last = exit;
    }
    exits
}

pub fn trips_for<'a>(routes: &[&'a Route], departures: &[u64]) -> Vec<Trip<'a>> {
    routes
        .iter()
        .zip(departures)
        .enumerate()
        .map(|(i, (r, &dep))| Trip {
            agent: i as u64,
            kind: AgentKind::Human,
            route_index: 0,
            route: r,
            departure: dep,
        })
        .collect()
}

pub fn human(id: u64, net: &Network, o: &str, d: &str, departure: u64) -> AgentSpec {
    AgentSpec {
        id,
        origin: net.node_idx(o).unwrap(),
        dest: net.node_idx(d).unwrap(),
        departure,
        kind: AgentKind::Human,
        behavior: None,
        weights: None,
    }
}

pub fn env_config(net: Network, agents: Vec<AgentSpec>, window_secs: f64, seed: u64) -> EnvConfig {
    EnvConfig {
        network: std::sync::Arc::new(net),
        agents,
        route_params: RouteGenParams::default(),
        routes: None,
        traffic: TrafficModel::default(),
        window_secs,
        humans: HumanSettings::default(),
        mutation: MutationSpec::Share(0.0),
        av_behavior: Behavior::Selfish,
        seed,
    }
}

// ---- property bodies shared by the property tests and the acceptance runner ----

pub fn arb_logit() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (proptest::collection::vec(1.0f64..500.0, 1..8), 0.0f64..2.0)
}

pub fn prop_logit((costs, scale): (Vec<f64>, f64)) -> Result<(), TestCaseError> {
    let n = costs.len();
    let beliefs = CostBeliefs {
        costs: costs.clone(),
        counts: vec![0; n],
    };
    let params = HumanModelParams {
        model: HumanModel::WeightedAverage,
        logit_scale: scale,
        ..HumanModelParams::default()
    };
    let p = choice_probabilities(&beliefs, &params);
    prop_assert_eq!(p.len(), n);
    prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    for i in 0..n {
        for j in 0..n {
            if costs[i] < costs[j] {
                prop_assert!(p[i] >= p[j] - 1e-12, "cheaper route {} less likely than {}", i, j);
            }
        }
    }
    Ok(())
}

pub fn arb_queue() -> impl Strategy<Value = Vec<u64>> {
    proptest::collection::vec(0u64..300, 1..40)
}

/// Single-edge point queue: exits follow entry order and match the oracle.
pub fn prop_fifo(departures: Vec<u64>) -> Result<(), TestCaseError> {
    let net = Network::bundled("single_edge").unwrap();
    let route = Route::new(&net, vec![EdgeIdx(0)]).unwrap();
    let refs: Vec<&Route> = departures.iter().map(|_| &route).collect();
    let asg = Assignment {
        trips: trips_for(&refs, &departures),
        window_secs: 300.0,
    };
    let res = simulate(&net, &TrafficModel::PointQueue, &asg).unwrap();
    let arrivals = res.arrivals.expect("point queue reports arrivals");
    let expected = queue_oracle(&departures, 100.0, 100.0);
    for (a, e) in arrivals.iter().zip(&expected) {
        prop_assert!((a - e).abs() < 1e-9, "arrival {} vs oracle {}", a, e);
    }
    let mut order: Vec<usize> = (0..departures.len()).collect();
    order.sort_by_key(|&i| (departures[i], i));
    for w in order.windows(2) {
        prop_assert!(arrivals[w[0]] <= arrivals[w[1]]);
    }
    for (i, &dep) in departures.iter().enumerate() {
        prop_assert!(arrivals[i] >= dep as f64 + 100.0 - 1e-9);
        prop_assert!((res.travel_times[i] - (arrivals[i] - dep as f64)).abs() < 1e-9);
    }
    Ok(())
}

pub fn arb_flows() -> impl Strategy<Value = (Vec<(usize, usize)>, bool)> {
    (
        proptest::collection::vec((0usize..9, 0usize..9), 1..30),
        any::<bool>(),
    )
}

/// Random shortest-path trips on the 3x3 grid: edge flows balance at every node.
pub fn prop_flow_conservation((pairs, queue): (Vec<(usize, usize)>, bool)) -> Result<(), TestCaseError> {
    let net = Network::bundled("grid3").unwrap();
    let weights = net.fftimes();
    let mut routes = Vec::new();
    for &(a, b) in &pairs {
        if a == b {
            continue;
        }
        let o = NodeIdx(a);
        let d = NodeIdx(b);
        let p = net.shortest_path(o, d, &weights).unwrap();
        routes.push(Route::new(&net, p.edges).unwrap());
    }
    if routes.is_empty() {
        return Ok(());
    }
    let refs: Vec<&Route> = routes.iter().collect();
    let deps: Vec<u64> = (0..routes.len() as u64).collect();
    let asg = Assignment {
        trips: trips_for(&refs, &deps),
        window_secs: 600.0,
    };
    let model = if queue { TrafficModel::PointQueue } else { TrafficModel::default() };
    let res = simulate(&net, &model, &asg).unwrap();
    let mut balance = vec![0i64; net.nodes().len()];
    for (e, &f) in net.edges().iter().zip(&res.edge_flows) {
        balance[e.from.0] -= f as i64;
        balance[e.to.0] += f as i64;
    }
    for r in &routes {
        balance[r.origin.0] += 1;
        balance[r.dest.0] -= 1;
    }
    prop_assert!(balance.iter().all(|&b| b == 0), "imbalance {:?}", balance);
    let total: u32 = res.edge_flows.iter().sum();
    prop_assert_eq!(total as usize, routes.iter().map(|r| r.edges.len()).sum::<usize>());
    Ok(())
}

pub fn arb_q() -> impl Strategy<Value = (f64, Vec<f64>, f64, usize)> {
    (
        -500.0f64..0.0,
        proptest::collection::vec(-1000.0f64..1000.0, 1..200),
        0.001f64..=1.0,
        1usize..5,
    )
}

/// IQL values stay inside the hull of the initial value and the rewards;
/// the VDN sum does too when `n * eta <= 1`.
pub fn prop_q_bounded((init, rewards, eta, n): (f64, Vec<f64>, f64, usize)) -> Result<(), TestCaseError> {
    let key = ObsKey { bucket: 0, bins: vec![0] };
    let lo = rewards.iter().copied().fold(init, f64::min);
    let hi = rewards.iter().copied().fold(init, f64::max);
    let mut q = QTable::new(&[-init]);
    for &r in &rewards {
        iql_update(&mut q, &key, 0, r, eta);
        let v = q.value(&key, 0);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "Q {} outside [{}, {}]", v, lo, hi);
    }

    let eta_v = eta / n as f64;
    let mut tables: Vec<QTable> = (0..n).map(|_| QTable::new(&[-init / n as f64])).collect();
    let keys = vec![key.clone(); n];
    let actions = vec![0; n];
    for &r in &rewards {
        vdn_update(&mut tables, &keys, &actions, r, eta_v).unwrap();
        let sum: f64 = tables.iter().map(|t| t.value(&key, 0)).sum();
        prop_assert!(sum >= lo - 1e-6 && sum <= hi + 1e-6, "VDN sum {} outside [{}, {}]", sum, lo, hi);
    }
    Ok(())
}

pub fn arb_mutation() -> impl Strategy<Value = (Vec<u64>, f64, u64)> {
    (
        proptest::collection::vec(0u64..1200, 1..40),
        0.0f64..=1.0,
        any::<u64>(),
    )
}

/// Mutation converts `round(share * n)` humans and leaves ODs and departures alone.
pub fn prop_mutation((departures, share, seed): (Vec<u64>, f64, u64)) -> Result<(), TestCaseError> {
    let net = Network::bundled("three_route").unwrap();
    let agents: Vec<AgentSpec> = departures
        .iter()
        .enumerate()
        .map(|(i, &dep)| human(i as u64 * 3 + 1, &net, "O", "D", dep))
        .collect();
    let mut cfg = env_config(net, agents.clone(), 1200.0, seed);
    cfg.mutation = MutationSpec::Share(share);
    let mut env = TrafficEnv::new(cfg).unwrap();
    env.play_episode(|_, _| 0).unwrap();
    let mutated = env.mutation().unwrap();
    prop_assert_eq!(env.phase(), Phase::Training);
    prop_assert_eq!(mutated.len(), (share * agents.len() as f64).round() as usize);
    for before in &agents {
        let after = &env.agent(before.id).unwrap().spec;
        prop_assert_eq!(after.origin, before.origin);
        prop_assert_eq!(after.dest, before.dest);
        prop_assert_eq!(after.departure, before.departure);
        let is_av = mutated.contains(&before.id);
        prop_assert_eq!(after.kind == AgentKind::Av, is_av);
        if is_av {
            prop_assert_eq!(after.behavior, Some(Behavior::Selfish));
        }
    }
    Ok(())
}

pub fn arb_records() -> impl Strategy<Value = Vec<Vec<(bool, usize, usize, f64)>>> {
    // Per episode, per agent: (is_av, od index, route index, travel time).
    (1usize..12, 1usize..6).prop_flat_map(|(agents, episodes)| {
        proptest::collection::vec(
            proptest::collection::vec((any::<bool>(), 0usize..2, 0usize..3, 1.0f64..1000.0), agents..=agents),
            episodes..=episodes,
        )
    })
}

pub fn build_store(eps: &[Vec<(bool, usize, usize, f64)>]) -> Recorder {
    let mut store = Recorder::default();
    for (e, agents) in eps.iter().enumerate() {
        let agents = agents
            .iter()
            .enumerate()
            .map(|(i, &(av, od, route, tt))| AgentRecord {
                id: i as u64,
                kind: if av { AgentKind::Av } else { AgentKind::Human },
                origin: ["O", "P"][od].into(),
                dest: "D".into(),
                route_index: route,
                departure: i as u64 * 10,
                travel_time: tt,
                reward: av.then_some(-tt),
            })
            .collect();
        store
            .record(EpisodeRecord {
                episode: e as u64 + 1,
                phase: Phase::HumanOnly,
                agents,
            })
            .unwrap();
    }
    store
}

/// Route fractions sum to one per OD and KPI means match a direct recount.
pub fn prop_choice_fractions(eps: Vec<Vec<(bool, usize, usize, f64)>>) -> Result<(), TestCaseError> {
    let store = build_store(&eps);
    let summary = summarize(&store).unwrap();
    for (ep, kpi) in eps.iter().zip(&summary.episodes) {
        for fr in kpi.kpi.route_fractions.values() {
            prop_assert!((fr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mean = |pick: &dyn Fn(bool) -> bool| {
            let v: Vec<f64> = ep.iter().filter(|a| pick(a.0)).map(|a| a.3).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-9,
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(kpi.kpi.mean_tt_human, mean(&|av| !av)));
        prop_assert!(close(kpi.kpi.mean_tt_av, mean(&|av| av)));
        prop_assert!(close(Some(kpi.kpi.mean_tt_all), mean(&|_| true)));
        let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for a in ep {
            let c = counts.entry(format!("{}->D", ["O", "P"][a.1])).or_insert_with(|| vec![0; 3]);
            c[a.2] += 1;
        }
        for (od, c) in counts {
            let n: usize = c.iter().sum();
            let fr = &kpi.kpi.route_fractions[&od];
            for (r, &k) in c.iter().enumerate() {
                let got = fr.get(r).copied().unwrap_or(0.0);
                prop_assert!((got - k as f64 / n as f64).abs() < 1e-9);
            }
        }
    }
    Ok(())
}
