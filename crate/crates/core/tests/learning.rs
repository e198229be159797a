mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routesim::demand::AgentKind;
use routesim::humans::{choice_probabilities, choose_route, CostBeliefs, HumanModelParams};
use routesim::learners::{evaluate, iql_update, select_action, train, vdn_update, LearnerKind, QTable, TrainSchedule};
use routesim::marlenv::{ObsKey, TrafficEnv};
use routesim::netgraph::Network;
use routesim::recorder::Recorder;
use routesim::Behavior;

/// Pearson statistic against expected counts.
fn chi_square(observed: &[u64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum()
}

#[test]
fn full_exploration_is_uniform() {
    let q = QTable::new(&[100.0, 110.0, 120.0]);
    let key = ObsKey { bucket: 0, bins: vec![0, 0, 0] };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0u64; 3];
    for _ in 0..10_000 {
        counts[select_action(&q, &key, 1.0, &mut rng)] += 1;
    }
    // 13.82 is the 0.999 quantile with two degrees of freedom.
    let stat = chi_square(&counts, &[10_000.0 / 3.0; 3]);
    assert!(stat < 13.82, "chi-square {stat} for {counts:?}");
}

#[test]
fn logit_sampling_matches_probabilities() {
    let b = CostBeliefs { costs: vec![100.0, 105.0, 112.0], counts: vec![0; 3] };
    let p = HumanModelParams::default();
    let probs = choice_probabilities(&b, &p);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = [0u64; 3];
    let n = 20_000;
    for _ in 0..n {
        counts[choose_route(&b, &p, &mut rng)] += 1;
    }
    let expected: Vec<f64> = probs.iter().map(|q| q * n as f64).collect();
    let stat = chi_square(&counts, &expected);
    assert!(stat < 13.82, "chi-square {stat}: {counts:?} vs {expected:?}");
}

#[test]
fn iql_bandit_finds_better_arm() {
    let rewards = [-130.0, -95.0];
    let key = ObsKey { bucket: 0, bins: vec![0, 0] };
    let mut q = QTable::new(&[100.0, 120.0]);
    let schedule = TrainSchedule { episodes: 500, ..TrainSchedule::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in 0..schedule.episodes {
        let a = select_action(&q, &key, schedule.epsilon(e), &mut rng);
        iql_update(&mut q, &key, a, rewards[a], schedule.learn_rate);
    }
    assert_eq!(select_action(&q, &key, 0.0, &mut rng), 1);
}

#[test]
fn single_selfish_av_learns_fastest_route() {
    let net = Network::bundled("three_route").unwrap();
    let mut agent = human(0, &net, "O", "D", 0);
    agent.kind = AgentKind::Av;
    agent.behavior = Some(Behavior::Selfish);
    let mut env = TrafficEnv::new(env_config(net.clone(), vec![agent], 600.0, 3)).unwrap();
    env.mutation().unwrap();
    let schedule = TrainSchedule { episodes: 500, ..TrainSchedule::default() };
    let out = train(&mut env, LearnerKind::Iql, &schedule, None).unwrap();
    assert_eq!(out.trace.len(), 500);
    let mut policies = out.policies;
    let mut rec = Recorder::new(&net);
    evaluate(&mut env, &mut policies, 3, Some(&mut rec)).unwrap();
    assert!(rec.episodes().iter().all(|e| e.agents[0].route_index == 0));
}

#[test]
fn vdn_keeps_symmetric_agents_symmetric() {
    let key = ObsKey { bucket: 0, bins: vec![1, 0] };
    let mut tables = vec![QTable::new(&[100.0, 120.0]); 3];
    let keys = vec![key.clone(); 3];
    for (i, r) in [-300.0, -280.0, -350.0, -310.0].into_iter().enumerate() {
        let a = i % 2;
        vdn_update(&mut tables, &keys, &[a, a, a], r, 0.1).unwrap();
        assert!(tables.windows(2).all(|w| w[0] == w[1]));
    }
}

fn two_route_env(n: u64, share: f64, seed: u64) -> TrafficEnv {
    let net = Network::bundled("two_route").unwrap();
    let agents = (0..n).map(|i| human(i, &net, "O", "D", i * 600 / n)).collect();
    let mut cfg = env_config(net, agents, 600.0, seed);
    cfg.mutation = routesim::marlenv::MutationSpec::Share(share);
    TrafficEnv::new(cfg).unwrap()
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut env = two_route_env(12, 0.5, 77);
        for _ in 0..20 {
            env.play_episode(|_, _| 0).unwrap();
        }
        env.mutation().unwrap();
        let schedule = TrainSchedule { episodes: 50, ..TrainSchedule::default() };
        train(&mut env, LearnerKind::Vdn, &schedule, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.policies.tables, b.policies.tables);

    let mut env = two_route_env(4, 0.5, 1);
    env.mutation().unwrap();
    let one = TrainSchedule { episodes: 1, ..TrainSchedule::default() };
    assert_eq!(train(&mut env, LearnerKind::Iql, &one, None).unwrap().trace.len(), 1);
}

#[test]
fn greedy_testing_with_frozen_humans_repeats() {
    let mut env = two_route_env(10, 0.3, 5);
    for _ in 0..10 {
        env.play_episode(|_, _| 0).unwrap();
    }
    env.mutation().unwrap();
    let schedule = TrainSchedule { episodes: 30, ..TrainSchedule::default() };
    let mut policies = train(&mut env, LearnerKind::Iql, &schedule, None).unwrap().policies;
    let mut rec = Recorder::new(env.network());
    let kpi = evaluate(&mut env, &mut policies, 5, Some(&mut rec)).unwrap();
    let first = &rec.episodes()[0].agents;
    assert!(rec.episodes().iter().all(|e| &e.agents == first));
    assert!(kpi.ratio_human_av.unwrap() > 0.0);
}

#[test]
fn policies_csv_round_trip() {
    let mut env = two_route_env(8, 0.5, 12);
    env.mutation().unwrap();
    let schedule = TrainSchedule { episodes: 40, ..TrainSchedule::default() };
    let trained = train(&mut env, LearnerKind::Iql, &schedule, None).unwrap().policies;
    let mut buf = Vec::new();
    trained.write_csv(&mut buf).unwrap();
    let mut fresh = routesim::learners::Policies::for_env(&env, LearnerKind::Iql);
    fresh.read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(fresh.tables, trained.tables);
}

/// Share of agents on the faster route over the final ten days.
fn final_split(env: &mut TrafficEnv, days: usize) -> f64 {
    let mut on_fast = 0;
    for day in 0..days {
        let out = env.play_episode(|_, _| unreachable!()).unwrap();
        if day + 10 >= days {
            on_fast += out.agents.iter().filter(|a| a.route_index == 0).count();
        }
    }
    on_fast as f64 / 10.0
}

/// Identical greedy drivers start with identical beliefs, observe the same
/// route times, and therefore switch routes together. The split cannot get
/// within one agent of the equilibrium; see the decisions ledger.
#[test]
#[ignore = "unattainable with identical greedy drivers: the whole population flips routes in lockstep"]
fn greedy_humans_reach_equilibrium() {
    let net = Network::bundled("two_route").unwrap();
    let agents = (0..20).map(|i| human(i, &net, "O", "D", i * 30)).collect();
    let mut cfg = env_config(net, agents, 600.0, 42);
    cfg.humans.params.logit_scale = f64::INFINITY;
    let mut env = TrafficEnv::new(cfg).unwrap();
    let split = final_split(&mut env, 200);
    let ue = equilibrium_split(20, 600.0) as f64;
    assert!((split - ue).abs() <= 1.0, "split {split} vs equilibrium {ue}");
}

/// What greedy drivers do instead: every day all twenty share one route.
#[test]
fn greedy_humans_move_in_lockstep() {
    let net = Network::bundled("two_route").unwrap();
    let agents = (0..20).map(|i| human(i, &net, "O", "D", i * 30)).collect();
    let mut cfg = env_config(net, agents, 600.0, 42);
    cfg.humans.params.logit_scale = f64::INFINITY;
    let mut env = TrafficEnv::new(cfg).unwrap();
    for _ in 0..50 {
        let out = env.play_episode(|_, _| unreachable!()).unwrap();
        let first = out.agents[0].route_index;
        assert!(out.agents.iter().all(|a| a.route_index == first));
    }
}

/// Logit drivers with heterogeneous sensitivity settle near the equilibrium.
#[test]
fn logit_humans_settle_near_equilibrium() {
    let ue = equilibrium_split(20, 600.0) as f64;
    for seed in [1, 2, 3] {
        let net = Network::bundled("two_route").unwrap();
        let agents = (0..20).map(|i| human(i, &net, "O", "D", i * 30)).collect();
        let mut cfg = env_config(net, agents, 600.0, seed);
        cfg.humans.time_mult_spread = 0.5;
        let mut env = TrafficEnv::new(cfg).unwrap();
        let split = final_split(&mut env, 200);
        assert!((split - ue).abs() <= 2.0, "seed {seed}: split {split} vs equilibrium {ue}");
    }
}
