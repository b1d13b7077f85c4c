use std::collections::HashMap;

use asyncdrop::data::gen_blobs;
use asyncdrop::nn::{MlpLoss, MlpModel};
use asyncdrop::sim::{build_clients, run, run_threaded, staleness_histogram, EventKind, SimConfig, SimOutcome};
use asyncdrop::strategies::{MlpTask, StrategyKind, StrategySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 96;

fn task(num_shards: usize) -> (MlpTask, Vec<Vec<usize>>) {
    let data = gen_blobs(SAMPLES, 8, 4, 1.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = MlpModel::random(&mut rng, 8, 16, 4).unwrap();
    let task = MlpTask::new(model, MlpLoss::Mse, &data, None).unwrap();
    let shards = (0..num_shards).map(|c| (0..SAMPLES).filter(|i| i % num_shards == c).collect()).collect();
    (task, shards)
}

fn sim(num_clients: usize, active: usize, levels: usize, ratio: f64, max_updates: u64) -> SimConfig {
    SimConfig {
        num_clients,
        active_clients: active,
        levels,
        speed_ratio: ratio,
        compute_delay: 1.0,
        comm_delay: 0.0,
        max_updates,
        seed: 5,
        ..SimConfig::default()
    }
}

fn spec(kind: StrategyKind) -> StrategySpec {
    let mut s = StrategySpec::new(kind);
    s.local_iters = 1;
    s.batch_size = Some(4);
    s
}

fn go(config: &SimConfig, kind: StrategyKind) -> SimOutcome {
    let (task, shards) = task(config.num_clients);
    run(config, &spec(kind), &task, &shards).unwrap()
}

fn completions(out: &SimOutcome) -> Vec<(usize, u64)> {
    out.trace
        .iter()
        .filter_map(|r| Some((r.client_id?, r.staleness?)))
        .collect()
}

#[test]
fn two_client_hand_trace() {
    let out = go(&sim(2, 2, 2, 10.0, 11), StrategyKind::AsyncFedAvg);
    let rows = completions(&out);
    let clients: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let staleness: Vec<u64> = rows.iter().map(|r| r.1).collect();
    assert_eq!(clients, [0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0]);
    assert_eq!(staleness, [0, 0, 0, 0, 0, 0, 0, 0, 0, 9, 1]);
    assert_eq!(out.end_time, 10.0);
}

#[test]
fn equal_speeds_settle_at_active_minus_one() {
    let out = go(&sim(4, 4, 1, 1.0, 40), StrategyKind::AsyncFedAvg);
    let rows = completions(&out);
    assert_eq!(rows.len(), 40);
    assert_eq!(rows[..4].iter().map(|r| r.1).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert!(rows[4..].iter().all(|r| r.1 == 3), "{rows:?}");
}

#[test]
fn staleness_bound_is_respected() {
    for bound in [0, 1, 2, 4] {
        let mut config = sim(8, 8, 4, 5.0, 60);
        config.staleness_bound = Some(bound);
        let out = go(&config, StrategyKind::AsyncDrop);
        let hist = staleness_histogram(&out.trace);
        assert!(hist.max.unwrap() <= bound, "bound {bound}: {hist:?}");
        assert_eq!(hist.counts.values().sum::<usize>(), 60);
    }
}

#[test]
fn recorded_staleness_matches_event_replay() {
    let out = go(&sim(8, 5, 4, 5.0, 50), StrategyKind::AsyncDrop);
    let mut dispatched_at: HashMap<u64, u64> = HashMap::new();
    let mut commits = 0u64;
    let mut replayed = Vec::new();
    for e in &out.events {
        match e.kind {
            EventKind::Dispatch => {
                dispatched_at.insert(e.sequence_no, commits);
            }
            EventKind::Complete => {
                replayed.push((e.client_id, commits - dispatched_at[&e.sequence_no]));
                commits += 1;
            }
        }
    }
    assert_eq!(replayed, completions(&out));
    for w in out.events.windows(2) {
        assert!(w[0].time <= w[1].time);
    }
}

#[test]
fn work_is_conserved() {
    let config = sim(6, 6, 3, 4.0, 45);
    let out = go(&config, StrategyKind::AsyncFedAvg);
    let profiles = build_clients(&config);
    let total_rounds: u64 = out.clients.iter().map(|c| c.rounds).sum();
    assert_eq!(total_rounds, 45);
    for (stats, p) in out.clients.iter().zip(&profiles) {
        let expected = stats.rounds as f64 * p.compute_time(1, 1.0);
        assert!((stats.compute_time - expected).abs() <= 1e-9 * (1.0 + expected));
        assert!(stats.compute_time + stats.comm_time <= out.end_time + 1e-9);
    }
}

#[test]
fn active_count_holds_between_time_groups() {
    let config = sim(10, 4, 5, 3.0, 70);
    let out = go(&config, StrategyKind::AsyncDrop);
    let mut in_flight: i64 = 0;
    let mut i = 0;
    while i < out.events.len() {
        let t = out.events[i].time;
        while i < out.events.len() && out.events[i].time == t {
            in_flight += match out.events[i].kind {
                EventKind::Dispatch => 1,
                EventKind::Complete => -1,
            };
            i += 1;
        }
        if t < out.end_time {
            assert_eq!(in_flight, 4, "at t = {t}");
        }
    }
    assert_eq!(in_flight as usize, out.truncated);
}

#[test]
fn masked_rounds_download_less() {
    let config = sim(8, 4, 4, 5.0, 40);
    let full = go(&config, StrategyKind::AsyncFedAvg);
    let masked = go(&config, StrategyKind::AsyncDrop);
    let by_index = |out: &SimOutcome| -> HashMap<u64, u64> {
        out.trace.iter().filter(|r| r.client_id.is_some()).map(|r| (r.event_index, r.cum_params_down)).collect()
    };
    let (f, m) = (by_index(&full), by_index(&masked));
    for k in 1..=40 {
        assert!(m[&k] < f[&k], "update {k}: {} vs {}", m[&k], f[&k]);
    }

    let mut unmasked = spec(StrategyKind::AsyncDrop);
    unmasked.keep_rate = 1.0;
    let (task, shards) = task(8);
    let same = run(&config, &unmasked, &task, &shards).unwrap();
    assert_eq!(by_index(&same), f);
}

#[test]
fn threaded_run_processes_the_whole_budget() {
    let config = sim(6, 3, 3, 2.0, 30);
    let (task, shards) = task(6);
    let report = run_threaded(&config, &spec(StrategyKind::AsyncDrop), &task, &shards).unwrap();
    assert_eq!(report.updates, 30);
    assert_eq!(report.final_version, 30);
    assert!(report.final_params.groups.iter().all(|g| g.values.iter().all(|v| v.is_finite())));
}
