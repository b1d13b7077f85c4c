//! Discrete-event simulation of heterogeneous asynchronous clients.
//!
//! A round's work is computed when the client is dispatched (that is when it fetches)
//! and merged when its completion event fires. Events at equal times pop in sequence
//! order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{ordered_mask, random_mask_with, DropoutMask, MaskMode};
use crate::metrics::MetricsRecord;
use crate::params::ModelParams;
use crate::store::{ConcurrentStore, GlobalStore, MergeOutcome};
use crate::strategies::{client_round, local_round, Aggregator, RoundResult, StrategyKind, StrategySpec, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub id: usize,
    /// 1 is the fastest level.
    pub capacity_level: usize,
    /// Simulated seconds per local iteration of the full model.
    pub compute_delay: f64,
    /// Simulated seconds per transferred parameter.
    pub comm_delay: f64,
    pub shard_id: usize,
}

impl ClientProfile {
    /// `l·compute_delay·kept_fraction + comm_delay·(down + up)`.
    pub fn round_duration(&self, local_iters: usize, kept_fraction: f64, down: u64, up: u64) -> f64 {
        self.compute_time(local_iters, kept_fraction) + self.comm_delay * (down + up) as f64
    }

    pub fn compute_time(&self, local_iters: usize, kept_fraction: f64) -> f64 {
        local_iters as f64 * self.compute_delay * kept_fraction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub num_clients: usize,
    pub active_clients: usize,
    pub levels: usize,
    /// Slowest over fastest delay.
    pub speed_ratio: f64,
    /// Fastest level's compute delay.
    pub compute_delay: f64,
    /// Fastest level's per-parameter communication delay.
    pub comm_delay: f64,
    /// Budget of processed client updates.
    pub max_updates: u64,
    /// Epoch budget of the fastest level, if any.
    pub epochs: Option<f64>,
    /// Bounded-staleness schedule: at most `E + 1` clients in flight, committed in
    /// dispatch order, so no update sees more than `E` foreign commits.
    pub staleness_bound: Option<u64>,
    /// Extra global evaluation every this many processed updates.
    pub eval_every: Option<u64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_clients: 104,
            active_clients: 8,
            levels: 8,
            speed_ratio: 5.0,
            compute_delay: 1.0,
            comm_delay: 1e-4,
            max_updates: 400,
            epochs: None,
            staleness_bound: None,
            eval_every: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config_key("num_clients", "must be at least 1"));
        }
        if self.active_clients == 0 {
            return Err(Error::config_key("active_clients", "must be at least 1"));
        }
        if self.active_clients > self.num_clients {
            return Err(Error::config_key("active_clients", "cannot exceed num_clients"));
        }
        if self.levels == 0 || self.levels > self.num_clients {
            return Err(Error::config_key("levels", "must be between 1 and num_clients"));
        }
        if !(self.speed_ratio >= 1.0 && self.speed_ratio.is_finite()) {
            return Err(Error::config_key("speed_ratio", "must be at least 1"));
        }
        if !(self.compute_delay >= 0.0 && self.compute_delay.is_finite()) {
            return Err(Error::config_key("compute_delay", "must be non-negative"));
        }
        if !(self.comm_delay >= 0.0 && self.comm_delay.is_finite()) {
            return Err(Error::config_key("comm_delay", "must be non-negative"));
        }
        if self.max_updates == 0 {
            return Err(Error::config_key("max_updates", "must be at least 1"));
        }
        if self.epochs.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::config_key("epochs", "must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config_key("eval_every", "must be at least 1"));
        }
        Ok(())
    }

    /// In-flight clients after applying the staleness bound.
    pub fn in_flight(&self) -> usize {
        match self.staleness_bound {
            Some(e) => self.active_clients.min(e.saturating_add(1).min(usize::MAX as u64) as usize),
            None => self.active_clients,
        }
    }
}

/// Round-robin level assignment with delays linear in level, from the fastest up to
/// `speed_ratio` times slower. Client `i` is bound to shard `i`.
pub fn build_clients(config: &SimConfig) -> Vec<ClientProfile> {
    let l = config.levels.max(1);
    (0..config.num_clients)
        .map(|id| {
            let level = id % l + 1;
            let factor = if l == 1 {
                1.0
            } else {
                1.0 + (config.speed_ratio - 1.0) * (level - 1) as f64 / (l - 1) as f64
            };
            ClientProfile {
                id,
                capacity_level: level,
                compute_delay: config.compute_delay * factor,
                comm_delay: config.comm_delay * factor,
                shard_id: id,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Dispatch,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub client_id: usize,
    pub sequence_no: u64,
}

/// Min-heap entry: earliest time first, then lowest sequence number.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    seq: u64,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientStats {
    pub rounds: u64,
    pub compute_time: f64,
    pub comm_time: f64,
    pub params_down: u64,
    pub params_up: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Vec<MetricsRecord>,
    pub final_params: ModelParams,
    pub clients: Vec<ClientStats>,
    pub events: Vec<SimEvent>,
    /// Rounds in flight when the run stopped; their work is discarded.
    pub truncated: usize,
    pub end_time: f64,
}

struct Flight {
    client: usize,
    result: RoundResult,
}

/// SplitMix64 finalizer, used to derive per-round seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Engine<'a> {
    config: &'a SimConfig,
    spec: &'a StrategySpec,
    task: &'a dyn Task,
    shards: &'a [Vec<usize>],
    clients: Vec<ClientProfile>,
    store: GlobalStore,
    agg: Aggregator,
    queues: Vec<VecDeque<usize>>,
    heap: BinaryHeap<Pending>,
    flights: HashMap<u64, Flight>,
    next_seq: u64,
    stats: Vec<ClientStats>,
    events: Vec<SimEvent>,
    trace: Vec<MetricsRecord>,
    updates: u64,
    cum_down: u64,
    cum_up: u64,
    fast_samples: usize,
    fast_total: usize,
    fast_epochs_seen: u64,
    barrier_levels: Vec<usize>,
}

impl Engine<'_> {
    fn take_client(&mut self, level: usize) -> Option<usize> {
        let l = self.queues.len();
        (0..l).find_map(|k| self.queues[(level - 1 + k) % l].pop_front())
    }

    fn dispatch(&mut self, level: usize, now: f64) -> Result<()> {
        let Some(c) = self.take_client(level) else {
            return Ok(());
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        let profile = &self.clients[c];
        let shard = self
            .shards
            .get(profile.shard_id)
            .ok_or_else(|| Error::config(format!("client {c} has no shard")))?;
        let result = client_round(self.spec, profile, self.config.levels, &self.store, self.task, shard, mix_seed(self.config.seed, seq))?;
        let r = &result.receipt;
        let duration = profile.round_duration(self.spec.local_iters, r.kept_fraction, r.params_down, r.params_up);
        self.events.push(SimEvent { time: now, kind: EventKind::Dispatch, client_id: c, sequence_no: seq });
        self.heap.push(Pending { time: now + duration, seq });
        self.flights.insert(seq, Flight { client: c, result });
        Ok(())
    }

    fn evaluate(&mut self, now: f64) -> Result<()> {
        let ev = self.task.evaluate(self.store.params())?;
        self.trace.push(MetricsRecord {
            sim_time: now,
            event_index: self.updates,
            global_version: self.store.version(),
            client_id: None,
            capacity_level: None,
            train_loss: ev.train_loss,
            test_loss: ev.test_loss,
            test_accuracy: ev.test_accuracy,
            cum_params_down: self.cum_down,
            cum_params_up: self.cum_up,
            staleness: None,
        });
        Ok(())
    }

    /// Merges one finished round. Returns true once the budget is exhausted.
    fn commit(&mut self, seq: u64, now: f64) -> Result<bool> {
        let Flight { client, mut result } = self.flights.remove(&seq).expect("flight exists for event");
        let profile = self.clients[client].clone();
        self.events.push(SimEvent { time: now, kind: EventKind::Complete, client_id: client, sequence_no: seq });
        let outcome = self.agg.merge_for(&mut self.store, &mut result.envelope)?;
        self.updates += 1;
        let r = result.receipt;
        self.cum_down += r.params_down;
        self.cum_up += r.params_up;
        let st = &mut self.stats[client];
        st.rounds += 1;
        st.compute_time += profile.compute_time(self.spec.local_iters, r.kept_fraction);
        st.comm_time += profile.comm_delay * (r.params_down + r.params_up) as f64;
        st.params_down += r.params_down;
        st.params_up += r.params_up;
        self.trace.push(MetricsRecord {
            sim_time: now,
            event_index: self.updates,
            global_version: self.store.version(),
            client_id: Some(client),
            capacity_level: Some(profile.capacity_level),
            train_loss: result.local_loss,
            test_loss: None,
            test_accuracy: None,
            cum_params_down: self.cum_down,
            cum_params_up: self.cum_up,
            staleness: result.envelope.staleness,
        });

        let mut evaluated = false;
        let mut done = self.updates >= self.config.max_updates;
        if profile.capacity_level == 1 && self.fast_total > 0 {
            self.fast_samples += result.samples_processed;
            let epochs = self.fast_samples as f64 / self.fast_total as f64;
            if epochs.floor() as u64 > self.fast_epochs_seen {
                self.fast_epochs_seen = epochs.floor() as u64;
                self.evaluate(now)?;
                evaluated = true;
            }
            if self.config.epochs.is_some_and(|budget| epochs >= budget) {
                done = true;
            }
        }
        if !evaluated && self.config.eval_every.is_some_and(|k| self.updates % k == 0) {
            self.evaluate(now)?;
            evaluated = true;
        }
        if done {
            if !evaluated {
                self.evaluate(now)?;
            }
            return Ok(true);
        }

        self.queues[profile.capacity_level - 1].push_back(client);
        if self.spec.kind == StrategyKind::SyncFedAvg {
            self.barrier_levels.push(profile.capacity_level);
            if matches!(outcome, MergeOutcome::Committed(_)) {
                for level in std::mem::take(&mut self.barrier_levels) {
                    self.dispatch(level, now)?;
                }
            }
        } else {
            self.dispatch(profile.capacity_level, now)?;
        }
        Ok(false)
    }
}

/// Runs the event loop until the update budget or the fastest level's epoch budget is
/// exhausted. `shards[k]` lists the training samples of shard `k`.
pub fn run(config: &SimConfig, spec: &StrategySpec, task: &dyn Task, shards: &[Vec<usize>]) -> Result<SimOutcome> {
    config.validate()?;
    spec.validate()?;
    if task.num_samples() == 0 {
        return Err(Error::config("empty dataset"));
    }
    let clients = build_clients(config);
    let mut queues = vec![VecDeque::new(); config.levels];
    for c in &clients {
        queues[c.capacity_level - 1].push_back(c.id);
    }
    let fast_total = clients
        .iter()
        .filter(|c| c.capacity_level == 1)
        .map(|c| shards.get(c.shard_id).map_or(0, Vec::len))
        .sum();
    let mut store = GlobalStore::new(task.initial_params(), task.unit_map().clone())?;
    if let Some(g) = spec.score_grouping(task.unit_map()) {
        store = store.with_scores(g)?;
    }
    let in_flight = config.in_flight();
    let mut engine = Engine {
        config,
        spec,
        task,
        shards,
        stats: vec![ClientStats::default(); clients.len()],
        clients,
        store,
        agg: Aggregator::new(spec.clone(), in_flight),
        queues,
        heap: BinaryHeap::new(),
        flights: HashMap::new(),
        next_seq: 0,
        events: Vec::new(),
        trace: Vec::new(),
        updates: 0,
        cum_down: 0,
        cum_up: 0,
        fast_samples: 0,
        fast_total,
        fast_epochs_seen: 0,
        barrier_levels: Vec::new(),
    };
    engine.evaluate(0.0)?;
    for i in 0..in_flight {
        engine.dispatch(i % config.levels + 1, 0.0)?;
    }
    let fifo = config.staleness_bound.is_some();
    let mut order: VecDeque<u64> = VecDeque::new();
    let mut ready: BTreeSet<u64> = BTreeSet::new();
    let mut now = 0.0;
    'outer: while let Some(ev) = engine.heap.pop() {
        now = ev.time;
        if !fifo {
            if engine.commit(ev.seq, now)? {
                break;
            }
            continue;
        }
        ready.insert(ev.seq);
        // Dispatch order of everything in flight, oldest first.
        let mut live: Vec<u64> = engine.flights.keys().copied().filter(|s| !order.contains(s)).collect();
        live.sort_unstable();
        order.extend(live);
        while let Some(&front) = order.front() {
            if !ready.remove(&front) {
                break;
            }
            order.pop_front();
            if engine.commit(front, now)? {
                break 'outer;
            }
            let mut live: Vec<u64> = engine.flights.keys().copied().filter(|s| !order.contains(s)).collect();
            live.sort_unstable();
            order.extend(live);
        }
    }
    let truncated = engine.flights.len();
    if truncated > 0 {
        log::info!("{truncated} in-flight rounds discarded at termination (t = {now})");
    }
    Ok(SimOutcome {
        trace: engine.trace,
        final_params: engine.store.fetch(),
        clients: engine.stats,
        events: engine.events,
        truncated,
        end_time: now,
    })
}

/// Exact counts of recorded staleness values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StalenessHistogram {
    pub counts: BTreeMap<u64, usize>,
    pub max: Option<u64>,
}

pub fn staleness_histogram(trace: &[MetricsRecord]) -> StalenessHistogram {
    let mut counts = BTreeMap::new();
    for d in trace.iter().filter_map(|r| r.staleness) {
        *counts.entry(d).or_insert(0) += 1;
    }
    let max = counts.keys().next_back().copied();
    StalenessHistogram { counts, max }
}

/// Result of the threaded demonstration.
#[derive(Debug, Clone)]
pub struct ThreadedReport {
    pub updates: u64,
    pub final_version: u64,
    pub max_staleness: u64,
    pub final_params: ModelParams,
}

/// One OS thread per active client against the per-group-locked store. Interleavings
/// are not deterministic; only liveness and counters are meaningful.
pub fn run_threaded(config: &SimConfig, spec: &StrategySpec, task: &dyn Task, shards: &[Vec<usize>]) -> Result<ThreadedReport> {
    config.validate()?;
    spec.validate()?;
    let mode = spec.effective_mask_mode();
    match spec.kind {
        StrategyKind::AsyncDrop | StrategyKind::AsyncFjord | StrategyKind::AsyncFedAvg | StrategyKind::AsyncFedProx => {}
        other => return Err(Error::config_key("strategy", format!("{other} has no threaded mode"))),
    }
    let clients = build_clients(config);
    let store = ConcurrentStore::new(task.initial_params(), task.unit_map().clone())?;
    let tickets = AtomicU64::new(0);
    let max_stale = AtomicU64::new(0);
    let units = task.unit_map().num_units();
    let worker = |slot: usize| -> Result<()> {
        let mut k = 0usize;
        loop {
            let ticket = tickets.fetch_add(1, AtomicOrdering::Relaxed);
            if ticket >= config.max_updates {
                return Ok(());
            }
            let client = &clients[(slot + k * config.active_clients) % clients.len()];
            k += 1;
            let seed = mix_seed(config.seed, ticket);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mask = match spec.kind {
                StrategyKind::AsyncDrop => random_mask_with(&mut rng, units, spec.keep_rate, mode)?,
                StrategyKind::AsyncFjord => ordered_mask(units, client.capacity_level, config.levels)?,
                _ => DropoutMask::all_kept(units, MaskMode::ExactK),
            };
            let fetched = store.fetch();
            let shard = &shards[client.shard_id];
            let mut r = local_round(spec, client.id, fetched, mask, store.unit_map(), task, shard, seed)?;
            store.masked_merge(&mut r.envelope, spec.alpha)?;
            max_stale.fetch_max(r.envelope.staleness.unwrap_or(0), AtomicOrdering::Relaxed);
        }
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.active_clients).map(|slot| s.spawn(move || worker(slot))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Contract("client thread panicked".into()))?)
            .collect::<Result<Vec<_>>>()
    })?;
    let final_version = store.version();
    Ok(ThreadedReport {
        updates: final_version,
        final_version,
        max_staleness: max_stale.load(AtomicOrdering::Relaxed),
        final_params: store.fetch(),
    })
}
