//! Deterministic discrete-event simulation of a federated deployment in
//! virtual time.
//!
//! The [`Simulation`] owns the event queue, the clients' random streams and
//! the in-flight jobs. The [`Server`] owns the global model and the
//! strategy, and produces the metrics log. Local training happens when a
//! client is dispatched, from the global model as of that instant; the
//! resulting update is held until its arrival event fires.
//!
//! Given the same inputs and seed, two runs produce bit-identical metrics,
//! traces and final models. Batches of dispatches train in parallel, but
//! results are collected in dispatch order and every random draw comes
//! from a per-client or server stream that does not depend on thread
//! scheduling.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::federation::{client_train, staleness, ClientState, FederationError, UpdateMessage};
use crate::metrics::MetricsRecord;
use crate::nn::{self, ModelArch, NnError, ParamVector};
use crate::strategies::{ArrivalOutcome, GlobalState, Protocol, RoundUpdate, Strategy, StrategyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid simulation setting: {0}")]
    Config(String),
    #[error("event queue is empty; the simulation was never seeded")]
    EmptyQueue,
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("writing trace to {path}: {source}")]
    TraceIo {
        path: std::path::PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Scheduler and local-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Virtual seconds to simulate.
    pub budget: f64,
    /// Latencies are drawn from `Uniform(0, latency_max)`.
    pub latency_max: f64,
    /// Draw a fresh latency on every dispatch instead of once per client.
    pub resample_latency: bool,
    /// Target fraction of clients training at any moment.
    pub concurrency: f64,
    /// Idle clients dispatched per top-up when below the concurrency target.
    pub resample_batch: usize,
    /// Evaluate every this many aggregations.
    pub eval_interval: u64,
    /// Stop after this many aggregations even if budget remains.
    pub max_aggregations: Option<u64>,
    pub lr: f64,
    /// Multiplicative learning-rate decay per global round, applied at dispatch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            budget: 1_296_000.0,
            latency_max: 5000.0,
            resample_latency: true,
            concurrency: 0.2,
            resample_batch: 50,
            eval_interval: 20,
            max_aggregations: None,
            lr: 0.01,
            lr_decay: 0.9999,
            batch_size: 32,
            local_steps: 5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return bad("budget must be finite and nonnegative");
        }
        if !(self.latency_max >= 0.0 && self.latency_max.is_finite()) {
            return bad("latency_max must be finite and nonnegative");
        }
        if self.latency_max == 0.0 && self.max_aggregations.is_none() {
            return bad("latency_max = 0 never advances the clock; set max_aggregations");
        }
        if !(self.concurrency > 0.0 && self.concurrency <= 1.0) {
            return bad("concurrency must lie in (0, 1]");
        }
        if self.resample_batch == 0 || self.eval_interval == 0 || self.batch_size == 0 || self.local_steps == 0 {
            return bad("resample_batch, eval_interval, batch_size and local_steps must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr must be finite and nonnegative, lr_decay in (0, 1]");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SERVER_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;

/// Initial global model for a run with this seed.
pub fn initial_model(arch: &ModelArch, seed: u64) -> ParamVector {
    arch.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival { client_id: usize },
    Eval,
    ResampleCheck,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    /// Insertion counter; breaks ties so equal-time events pop in FIFO order.
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue of events ordered by `(time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.next_seq,
            kind,
        });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Dispatch,
    Arrival,
    Round,
    Eval,
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceLine {
    pub time: f64,
    pub kind: TraceKind,
    pub client_id: Option<usize>,
    /// Global timestamp after the event was handled.
    pub t_g: u64,
    pub staleness: Option<u64>,
    pub beta: Option<f64>,
    pub corrected: Option<bool>,
    pub latency: Option<f64>,
    pub in_flight: usize,
}

pub fn write_trace(path: &Path, trace: &[TraceLine]) -> Result<()> {
    let io = |source| SimError::TraceIo {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    for line in trace {
        writer.serialize(line).map_err(io)?;
    }
    writer.flush().map_err(|e| io(e.into()))
}

/// Global model, strategy and evaluation bookkeeping.
pub struct Server<'a> {
    strategy: Box<dyn Strategy>,
    gs: GlobalState,
    arch: ModelArch,
    test: &'a Dataset,
    test_indices: Vec<usize>,
    eval_interval: u64,
    records: Vec<MetricsRecord>,
    last_eval_round: Option<u64>,
    window_staleness_sum: u64,
    window_arrivals: u64,
    window_max_staleness: u64,
    corrections: u64,
}

impl<'a> Server<'a> {
    pub fn new(strategy: Box<dyn Strategy>, w0: ParamVector, arch: ModelArch, test: &'a Dataset, eval_interval: u64) -> Result<Self> {
        if w0.len() != arch.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "initial model",
                expected: arch.param_count(),
                got: w0.len(),
            }
            .into());
        }
        if test.is_empty() {
            return Err(SimError::Config("test set is empty".into()));
        }
        if eval_interval == 0 {
            return Err(SimError::Config("eval_interval must be at least 1".into()));
        }
        Ok(Self {
            strategy,
            gs: GlobalState::new(w0),
            arch,
            test,
            test_indices: (0..test.len()).collect(),
            eval_interval,
            records: Vec::new(),
            last_eval_round: None,
            window_staleness_sum: 0,
            window_arrivals: 0,
            window_max_staleness: 0,
            corrections: 0,
        })
    }

    pub fn state(&self) -> &GlobalState {
        &self.gs
    }

    pub fn strategy(&self) -> &dyn Strategy {
        self.strategy.as_ref()
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn corrections(&self) -> u64 {
        self.corrections
    }

    fn note_staleness(&mut self, tau: u64) {
        self.window_staleness_sum += tau;
        self.window_arrivals += 1;
        self.window_max_staleness = self.window_max_staleness.max(tau);
    }

    fn check_advance(&self, before: u64, aggregated: bool) -> Result<()> {
        let expected = before + u64::from(aggregated);
        if self.gs.t_g != expected {
            return Err(SimError::Invariant(format!(
                "{} moved the global timestamp from {before} to {} (aggregated: {aggregated})",
                self.strategy.name(),
                self.gs.t_g
            )));
        }
        Ok(())
    }

    /// Hands one asynchronous arrival to the strategy.
    pub fn on_arrival(&mut self, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let before = self.gs.t_g;
        let tau = staleness(before, msg.trained_from)?;
        let outcome = self.strategy.on_update(&mut self.gs, msg)?;
        self.check_advance(before, outcome.aggregated)?;
        if outcome.staleness != tau {
            return Err(SimError::Invariant(format!(
                "strategy reported staleness {} but the server measured {tau}",
                outcome.staleness
            )));
        }
        self.note_staleness(tau);
        self.corrections += u64::from(outcome.corrected);
        Ok(outcome)
    }

    /// Hands one completed synchronous round to the strategy.
    pub fn on_round(&mut self, selected: &[usize], updates: &[RoundUpdate]) -> Result<()> {
        let before = self.gs.t_g;
        for u in updates {
            let tau = staleness(before, u.msg.trained_from)?;
            self.note_staleness(tau);
        }
        self.strategy.on_round(&mut self.gs, selected, updates)?;
        self.check_advance(before, true)
    }

    /// Whether the current round is due for a scheduled evaluation.
    pub fn eval_due(&self) -> bool {
        self.gs.t_g.is_multiple_of(self.eval_interval) && self.last_eval_round != Some(self.gs.t_g)
    }

    /// Evaluates the global model and appends a metrics row at `time`.
    ///
    /// A row at the same virtual time as the previous one replaces it, so
    /// the log stays strictly increasing in time.
    pub fn evaluate(&mut self, time: f64) -> Result<&MetricsRecord> {
        let (acc, loss) = nn::evaluate(&self.arch, &self.gs.w_g, self.test, &self.test_indices)?;
        let mean_staleness = if self.window_arrivals == 0 {
            0.0
        } else {
            self.window_staleness_sum as f64 / self.window_arrivals as f64
        };
        let record = MetricsRecord {
            virtual_time: time,
            round: self.gs.t_g,
            test_accuracy: acc,
            test_loss: loss,
            mean_staleness,
            max_staleness: self.window_max_staleness,
            corrections_applied: self.corrections,
        };
        match self.records.last_mut() {
            Some(last) if last.virtual_time == time => *last = record,
            Some(last) if last.virtual_time > time => {
                return Err(SimError::Invariant(format!(
                    "evaluation at {time} after one at {}",
                    last.virtual_time
                )))
            }
            _ => self.records.push(record),
        }
        self.last_eval_round = Some(self.gs.t_g);
        self.window_staleness_sum = 0;
        self.window_arrivals = 0;
        self.window_max_staleness = 0;
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn into_parts(self) -> (GlobalState, Vec<MetricsRecord>) {
        (self.gs, self.records)
    }
}

/// Feeds a recorded arrival stream to `strategy`, calling `observe` with the
/// global state after every arrival.
pub fn replay<F>(strategy: &mut dyn Strategy, gs: &mut GlobalState, arrivals: &[UpdateMessage], mut observe: F) -> Result<()>
where
    F: FnMut(&GlobalState, &ArrivalOutcome),
{
    for msg in arrivals {
        let outcome = strategy.on_update(gs, msg.clone())?;
        observe(gs, &outcome);
    }
    Ok(())
}

/// Counters from a finished run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub dispatches: u64,
    pub arrivals: u64,
    pub aggregations: u64,
    pub corrections: u64,
    pub events: u64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_state: GlobalState,
    pub final_time: f64,
    pub stats: RunStats,
    /// Present when tracing was enabled.
    pub trace: Vec<TraceLine>,
    /// Every asynchronous arrival in processing order, when recording was enabled.
    pub arrivals: Vec<UpdateMessage>,
}

struct RoundState {
    selected: Vec<usize>,
    updates: Vec<RoundUpdate>,
}

/// The event-driven scheduler.
pub struct Simulation<'a> {
    cfg: SimConfig,
    arch: ModelArch,
    train: &'a Dataset,
    shards: Vec<Vec<usize>>,
    server: Server<'a>,
    protocol: Protocol,
    queue: EventQueue,
    now: f64,
    client_rngs: Vec<ChaCha8Rng>,
    fixed_latency: Vec<f64>,
    server_rng: ChaCha8Rng,
    in_flight: Vec<Option<UpdateMessage>>,
    in_flight_count: usize,
    round: Option<RoundState>,
    stats: RunStats,
    tracing: bool,
    trace: Vec<TraceLine>,
    recording: bool,
    recorded: Vec<UpdateMessage>,
    correction_cost: f64,
}

impl<'a> Simulation<'a> {
    /// `shards[i]` lists client `i`'s sample indices into `train`.
    pub fn new(
        cfg: SimConfig,
        arch: ModelArch,
        strategy: Box<dyn Strategy>,
        w0: ParamVector,
        train: &'a Dataset,
        shards: Vec<Vec<usize>>,
        test: &'a Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() {
            return Err(SimError::Config("at least one client is required".into()));
        }
        if let Some(i) = shards.iter().position(Vec::is_empty) {
            return Err(FederationError::EmptyShard(i).into());
        }
        if let Some(&bad) = shards.iter().flatten().find(|&&i| i >= train.len()) {
            return Err(SimError::Config(format!(
                "shard index {bad} out of range for {} training samples",
                train.len()
            )));
        }
        if train.dim() != arch.input_dim() || test.dim() != arch.input_dim() {
            return Err(NnError::DimensionMismatch {
                what: "sample dimension",
                expected: arch.input_dim(),
                got: if train.dim() != arch.input_dim() { train.dim() } else { test.dim() },
            }
            .into());
        }
        let protocol = strategy.protocol();
        if let Protocol::Synchronous { client_fraction } = protocol {
            if !(client_fraction > 0.0 && client_fraction <= 1.0) {
                return Err(SimError::Config(format!("client fraction must lie in (0, 1], got {client_fraction}")));
            }
        }
        let m = shards.len();
        let mut client_rngs: Vec<ChaCha8Rng> = (0..m)
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64)))
            .collect();
        let fixed_latency = if cfg.resample_latency {
            Vec::new()
        } else {
            client_rngs
                .iter_mut()
                .map(|rng| draw_latency(rng, cfg.latency_max))
                .collect()
        };
        let server = Server::new(strategy, w0, arch.clone(), test, cfg.eval_interval)?;
        Ok(Self {
            server_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SERVER_STREAM)),
            cfg,
            arch,
            train,
            shards,
            server,
            protocol,
            queue: EventQueue::default(),
            now: 0.0,
            client_rngs,
            fixed_latency,
            in_flight: vec![None; m],
            in_flight_count: 0,
            round: None,
            stats: RunStats::default(),
            tracing: false,
            trace: Vec::new(),
            recording: false,
            recorded: Vec::new(),
            correction_cost: 0.0,
        })
    }

    /// Keep a [`TraceLine`] per event.
    pub fn with_trace(mut self, on: bool) -> Self {
        self.tracing = on;
        self
    }

    /// Keep every asynchronous arrival for later [`replay`].
    pub fn with_recording(mut self, on: bool) -> Self {
        self.recording = on;
        self
    }

    /// Virtual seconds the server is busy per distillation correction.
    pub fn with_correction_cost(mut self, seconds: f64) -> Result<Self> {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(SimError::Config(format!("correction cost must be finite and nonnegative, got {seconds}")));
        }
        self.correction_cost = seconds;
        Ok(self)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn server(&self) -> &Server<'a> {
        &self.server
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight_count
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    /// Target number of simultaneously training clients.
    pub fn concurrency_target(&self) -> usize {
        ((self.cfg.concurrency * self.shards.len() as f64).ceil() as usize).clamp(1, self.shards.len())
    }

    fn trace_line(&mut self, kind: TraceKind, client_id: Option<usize>) -> Option<&mut TraceLine> {
        if !self.tracing {
            return None;
        }
        self.trace.push(TraceLine {
            time: self.now,
            kind,
            client_id,
            t_g: self.server.gs.t_g,
            staleness: None,
            beta: None,
            corrected: None,
            latency: None,
            in_flight: self.in_flight_count,
        });
        self.trace.last_mut()
    }

    /// Queues the first dispatch and the initial evaluation.
    pub fn seed(&mut self) {
        self.queue.push(0.0, EventKind::ResampleCheck);
        self.queue.push(0.0, EventKind::Eval);
    }

    /// Trains `clients` from the current global model and schedules their arrivals.
    fn dispatch(&mut self, clients: &[usize]) -> Result<()> {
        let t_g = self.server.gs.t_g;
        let lr = self.cfg.lr * self.cfg.lr_decay.powf(t_g as f64);
        let mut jobs = Vec::with_capacity(clients.len());
        for &c in clients {
            if self.in_flight[c].is_some() {
                return Err(SimError::Invariant(format!("client {c} dispatched while already in flight")));
            }
            let rng = &mut self.client_rngs[c];
            let latency = if self.cfg.resample_latency {
                draw_latency(rng, self.cfg.latency_max)
            } else {
                self.fixed_latency[c]
            };
            let rng_seed = rng.random::<u64>();
            jobs.push((
                ClientState {
                    client_id: c,
                    shard: self.shards[c].clone(),
                    rng_seed,
                    local_lr: lr,
                    steps: self.cfg.local_steps,
                    batch_size: self.cfg.batch_size,
                },
                latency,
            ));
        }
        let (arch, train, w_g) = (&self.arch, self.train, &self.server.gs.w_g);
        let trained: Vec<UpdateMessage> = jobs
            .par_iter()
            .map(|(cs, _)| client_train(cs, w_g, t_g, arch, train))
            .collect::<Result<_, _>>()?;
        for (msg, (cs, latency)) in trained.into_iter().zip(&jobs) {
            let arrival = self.now + latency;
            self.in_flight[cs.client_id] = Some(msg.scheduled(self.now, arrival));
            self.in_flight_count += 1;
            self.stats.dispatches += 1;
            self.queue.push(arrival, EventKind::Arrival { client_id: cs.client_id });
            if let Some(line) = self.trace_line(TraceKind::Dispatch, Some(cs.client_id)) {
                line.latency = Some(*latency);
            }
        }
        Ok(())
    }

    /// Tops up in-flight clients to the concurrency target (asynchronous
    /// protocol) or starts the next round (synchronous protocol).
    fn enforce_concurrency(&mut self) -> Result<()> {
        match self.protocol {
            Protocol::Asynchronous => {
                let target = self.concurrency_target();
                while self.in_flight_count < target {
                    let idle: Vec<usize> = (0..self.shards.len()).filter(|&c| self.in_flight[c].is_none()).collect();
                    let take = self.cfg.resample_batch.min(idle.len());
                    let mut picked: Vec<usize> = index::sample(&mut self.server_rng, idle.len(), take)
                        .into_iter()
                        .map(|k| idle[k])
                        .collect();
                    picked.sort_unstable();
                    self.dispatch(&picked)?;
                }
            }
            Protocol::Synchronous { client_fraction } => {
                if self.round.is_none() {
                    let m = self.shards.len();
                    let take = ((client_fraction * m as f64).ceil() as usize).clamp(1, m);
                    let mut selected = index::sample(&mut self.server_rng, m, take).into_vec();
                    selected.sort_unstable();
                    self.dispatch(&selected)?;
                    self.round = Some(RoundState {
                        selected,
                        updates: Vec::with_capacity(take),
                    });
                }
            }
        }
        Ok(())
    }

    fn aggregations_exhausted(&self) -> bool {
        self.cfg.max_aggregations.is_some_and(|cap| self.server.gs.t_g >= cap)
    }

    fn after_aggregation(&mut self) -> Result<()> {
        self.stats.aggregations += 1;
        if self.server.eval_due() {
            self.server.evaluate(self.now)?;
            self.trace_line(TraceKind::Eval, None);
        }
        Ok(())
    }

    fn handle_arrival(&mut self, client_id: usize) -> Result<()> {
        let msg = self.in_flight[client_id]
            .take()
            .ok_or_else(|| SimError::Invariant(format!("arrival for client {client_id} with nothing in flight")))?;
        self.in_flight_count -= 1;
        self.stats.arrivals += 1;
        match self.protocol {
            Protocol::Asynchronous => {
                if self.recording {
                    self.recorded.push(msg.clone());
                }
                let outcome = self.server.on_arrival(msg)?;
                if outcome.corrected {
                    self.stats.corrections += 1;
                    // The server is busy distilling; later events wait.
                    self.now += self.correction_cost;
                }
                if let Some(line) = self.trace_line(TraceKind::Arrival, Some(client_id)) {
                    line.staleness = Some(outcome.staleness);
                    line.beta = outcome.beta;
                    line.corrected = Some(outcome.corrected);
                }
                if outcome.aggregated {
                    self.after_aggregation()?;
                }
            }
            Protocol::Synchronous { .. } => {
                let shard_size = self.shards[client_id].len();
                let round = self
                    .round
                    .as_mut()
                    .ok_or_else(|| SimError::Invariant("synchronous arrival outside a round".into()))?;
                round.updates.push(RoundUpdate { msg, shard_size });
                let done = round.updates.len() == round.selected.len();
                if let Some(line) = self.trace_line(TraceKind::Arrival, Some(client_id)) {
                    line.staleness = Some(0);
                }
                if done {
                    let mut round = self.round.take().expect("checked above");
                    round.updates.sort_by_key(|u| u.msg.client_id);
                    self.server.on_round(&round.selected, &round.updates)?;
                    self.trace_line(TraceKind::Round, None);
                    self.after_aggregation()?;
                }
            }
        }
        if !self.aggregations_exhausted() {
            self.enforce_concurrency()?;
        }
        Ok(())
    }

    /// Pops and handles the next event.
    pub fn step(&mut self) -> Result<Event> {
        let event = self.queue.pop().ok_or(SimError::EmptyQueue)?;
        self.now = self.now.max(event.time);
        self.stats.events += 1;
        match event.kind {
            EventKind::Arrival { client_id } => self.handle_arrival(client_id)?,
            EventKind::Eval => {
                self.server.evaluate(self.now)?;
                self.trace_line(TraceKind::Eval, None);
            }
            EventKind::ResampleCheck => self.enforce_concurrency()?,
        }
        Ok(event)
    }

    /// Runs until the budget or the aggregation cap is reached, then
    /// evaluates once more if the model changed since the last row.
    pub fn run(mut self) -> Result<SimOutcome> {
        if self.queue.is_empty() {
            self.seed();
        }
        loop {
            if self.aggregations_exhausted() || self.now > self.cfg.budget {
                break;
            }
            match self.queue.peek_time() {
                Some(t) if t.max(self.now) <= self.cfg.budget => {
                    self.step()?;
                }
                Some(_) => break,
                None => return Err(SimError::EmptyQueue),
            }
        }
        let end = if self.aggregations_exhausted() {
            self.now
        } else {
            self.cfg.budget.max(self.now)
        };
        if self.server.last_eval_round != Some(self.server.gs.t_g) {
            self.now = end;
            self.server.evaluate(end)?;
            self.trace_line(TraceKind::Eval, None);
        }
        self.stats.corrections = self.server.corrections();
        let (final_state, records) = self.server.into_parts();
        Ok(SimOutcome {
            records,
            final_state,
            final_time: end,
            stats: self.stats,
            trace: self.trace,
            arrivals: self.recorded,
        })
    }
}

fn draw_latency(rng: &mut ChaCha8Rng, latency_max: f64) -> f64 {
    if latency_max > 0.0 {
        rng.random_range(0.0..latency_max)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::distill::DistillConfig;
    use crate::nn::Activation;
    use crate::strategies::{StrategyContext, StrategyParams, StrategyRegistry};

    struct Fixture {
        train: Dataset,
        test: Dataset,
        distill: Dataset,
        shards: Vec<Vec<usize>>,
        arch: ModelArch,
    }

    fn fixture(clients: usize) -> Fixture {
        let train = synth_blobs(3, 40, 4, 9).unwrap();
        let shards = (0..clients)
            .map(|c| (0..train.len()).filter(|i| i % clients == c).collect())
            .collect();
        Fixture {
            test: train.subset(&(0..30).collect::<Vec<_>>()),
            distill: train.subset(&[0, 50, 100]),
            train,
            shards,
            arch: ModelArch::new(vec![4, 6, 3], Activation::Relu).unwrap(),
        }
    }

    fn cfg() -> SimConfig {
        SimConfig {
            budget: 30_000.0,
            concurrency: 0.5,
            resample_batch: 2,
            eval_interval: 4,
            seed: 11,
            ..SimConfig::default()
        }
    }

    fn sim<'a>(f: &'a Fixture, name: &str, params: StrategyParams, cfg: SimConfig) -> Simulation<'a> {
        let ctx = StrategyContext {
            arch: f.arch.clone(),
            distill_set: f.distill.clone(),
            distill: DistillConfig::default(),
        };
        let strategy = StrategyRegistry::with_builtins().build(name, &params, &ctx).unwrap();
        let w0 = initial_model(&f.arch, cfg.seed);
        Simulation::new(cfg, f.arch.clone(), strategy, w0, &f.train, f.shards.clone(), &f.test)
            .unwrap()
            .with_trace(true)
    }

    #[test]
    fn queue_pops_by_time_then_insertion() {
        let mut q = EventQueue::default();
        q.push(5.0, EventKind::Eval);
        q.push(1.0, EventKind::Arrival { client_id: 2 });
        q.push(1.0, EventKind::Arrival { client_id: 1 });
        q.push(0.0, EventKind::ResampleCheck);
        let order: Vec<EventKind> = std::iter::from_fn(|| q.pop()).map(|e| e.kind).collect();
        assert_eq!(
            order,
            [
                EventKind::ResampleCheck,
                EventKind::Arrival { client_id: 2 },
                EventKind::Arrival { client_id: 1 },
                EventKind::Eval
            ]
        );
    }

    #[test]
    fn step_on_empty_queue_is_an_error() {
        let f = fixture(4);
        let mut s = sim(&f, "fedasync", StrategyParams::default(), cfg());
        assert!(matches!(s.step(), Err(SimError::EmptyQueue)));
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn rejects_bad_settings() {
        let f = fixture(4);
        let bad = SimConfig {
            concurrency: 0.0,
            ..cfg()
        };
        let ctx = StrategyContext {
            arch: f.arch.clone(),
            distill_set: f.distill.clone(),
            distill: DistillConfig::default(),
        };
        let build = || StrategyRegistry::with_builtins().build("fedasync", &StrategyParams::default(), &ctx).unwrap();
        let w0 = initial_model(&f.arch, 0);
        let r = Simulation::new(bad, f.arch.clone(), build(), w0.clone(), &f.train, f.shards.clone(), &f.test);
        assert!(matches!(r, Err(SimError::Config(_))));
        let mut shards = f.shards.clone();
        shards[2].clear();
        let r = Simulation::new(cfg(), f.arch.clone(), build(), w0.clone(), &f.train, shards, &f.test);
        assert!(matches!(r, Err(SimError::Federation(FederationError::EmptyShard(2)))));
        let zero_latency = SimConfig {
            latency_max: 0.0,
            ..cfg()
        };
        assert!(zero_latency.validate().is_err());
        let r = Simulation::new(cfg(), f.arch.clone(), build(), ParamVector::zeros(3), &f.train, f.shards.clone(), &f.test);
        assert!(matches!(r, Err(SimError::Nn(_))));
    }

    #[test]
    fn async_run_keeps_its_invariants() {
        let f = fixture(6);
        let out = sim(&f, "fedadt", StrategyParams::default(), cfg()).run().unwrap();
        assert!(out.stats.aggregations > 10);
        assert_eq!(out.final_state.t_g, out.stats.aggregations);
        assert_eq!(out.stats.arrivals, out.stats.aggregations);
        assert!(out.stats.corrections > 0);
        assert!(out.records.windows(2).all(|w| w[0].virtual_time < w[1].virtual_time));
        assert_eq!(out.records[0].virtual_time, 0.0);
        assert_eq!(out.records[0].round, 0);
        assert_eq!(out.records.last().unwrap().round, out.final_state.t_g);
        assert!(out.trace.windows(2).all(|w| w[0].time <= w[1].time));
        for line in out.trace.iter().filter(|l| l.kind == TraceKind::Dispatch) {
            let lat = line.latency.unwrap();
            assert!((0.0..5000.0).contains(&lat));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let f = fixture(6);
        let a = sim(&f, "fedadt", StrategyParams::default(), cfg()).run().unwrap();
        let b = sim(&f, "fedadt", StrategyParams::default(), cfg()).run().unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.trace, b.trace);
        assert!(a.final_state.w_g.bit_eq(&b.final_state.w_g));
        let c = sim(&f, "fedadt", StrategyParams::default(), SimConfig { seed: 12, ..cfg() }).run().unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn aggregation_cap_stops_the_run() {
        let f = fixture(6);
        let capped = SimConfig {
            max_aggregations: Some(7),
            budget: 1e9,
            ..cfg()
        };
        let out = sim(&f, "fedasync", StrategyParams::default(), capped).run().unwrap();
        assert_eq!(out.final_state.t_g, 7);
        assert_eq!(out.records.last().unwrap().round, 7);
    }

    #[test]
    fn fixed_latency_is_per_client() {
        let f = fixture(4);
        let fixed = SimConfig {
            resample_latency: false,
            ..cfg()
        };
        let out = sim(&f, "fedasync", StrategyParams::default(), fixed).run().unwrap();
        let mut seen: Vec<Option<f64>> = vec![None; 4];
        for line in out.trace.iter().filter(|l| l.kind == TraceKind::Dispatch) {
            let c = line.client_id.unwrap();
            let lat = line.latency.unwrap();
            assert_eq!(*seen[c].get_or_insert(lat), lat);
        }
    }

    #[test]
    fn synchronous_rounds_wait_for_every_selected_client() {
        let f = fixture(10);
        let params = StrategyParams {
            sync_fraction: 0.3,
            ..StrategyParams::default()
        };
        let out = sim(&f, "fedavg", params, cfg()).run().unwrap();
        assert!(out.final_state.t_g > 2);
        let mut arrivals_since_round = 0;
        let mut last_round_time = 0.0;
        let mut round_dispatch: Vec<f64> = Vec::new();
        for line in &out.trace {
            match line.kind {
                TraceKind::Dispatch => round_dispatch.push(line.time + line.latency.unwrap()),
                TraceKind::Arrival => {
                    arrivals_since_round += 1;
                    assert_eq!(line.staleness, Some(0));
                }
                TraceKind::Round => {
                    assert_eq!(arrivals_since_round, 3);
                    // the round closes at the slowest selected client
                    let slowest = round_dispatch.iter().cloned().fold(f64::MIN, f64::max);
                    assert_eq!(line.time, slowest);
                    assert!(line.time >= last_round_time);
                    last_round_time = line.time;
                    arrivals_since_round = 0;
                    round_dispatch.clear();
                }
                TraceKind::Eval => {}
            }
        }
    }

    #[test]
    fn correction_cost_delays_later_events() {
        let f = fixture(6);
        let free = sim(&f, "fedadt", StrategyParams::default(), cfg()).run().unwrap();
        let costly = sim(&f, "fedadt", StrategyParams::default(), cfg())
            .with_correction_cost(2000.0)
            .unwrap()
            .run()
            .unwrap();
        assert!(costly.stats.aggregations < free.stats.aggregations);
        assert!(costly.trace.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn replay_reproduces_the_run() {
        let f = fixture(6);
        let out = sim(&f, "fedasync", StrategyParams::default(), cfg())
            .with_recording(true)
            .run()
            .unwrap();
        assert_eq!(out.arrivals.len() as u64, out.stats.arrivals);
        let mut gs = GlobalState::new(initial_model(&f.arch, cfg().seed));
        let mut strategy = crate::strategies::FedAsync;
        replay(&mut strategy, &mut gs, &out.arrivals, |_, _| {}).unwrap();
        assert!(gs.w_g.bit_eq(&out.final_state.w_g));
        assert_eq!(gs.t_g, out.final_state.t_g);
    }

    #[test]
    fn trace_file_has_header_and_rows() {
        let f = fixture(4);
        let out = sim(&f, "fedasync", StrategyParams::default(), cfg()).run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&path, &out.trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "time,kind,client_id,t_g,staleness,beta,corrected,latency,in_flight"
        );
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }
}
