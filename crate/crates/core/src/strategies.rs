//! Server-side aggregation strategies.
//!
//! Every strategy implements [`Strategy`] and is constructed by name through
//! a [`StrategyRegistry`]. Asynchronous strategies consume one
//! [`UpdateMessage`] at a time via [`Strategy::on_update`]; synchronous ones
//! receive a whole round at once via [`Strategy::on_round`] and report
//! [`Protocol::Synchronous`] so the scheduler knows to run rounds.
//!
//! Built-ins:
//!
//! | name       | protocol | aggregation |
//! |------------|----------|-------------|
//! | `fedavg`   | sync     | shard-size weighted mean |
//! | `fedavgm`  | sync     | weighted mean applied through server momentum |
//! | `fedasync` | async    | staleness-weighted blend |
//! | `fedadt`   | async    | distillation correction of stale updates, then blend |
//! | `fedbuff`  | async    | buffer of K, aggregate and flush when full |
//! | `fedfa`    | async    | sliding window of K, aggregate on every arrival once full |
//!
//! `fedbuff` and `fedfa` are reference baselines reconstructed on a
//! best-effort basis; their parameters are exposed in [`StrategyParams`].

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::distill::{self, DistillConfig, DistillError};
use crate::federation::{beta_weight, blend_in_place, staleness, FederationError, UpdateMessage};
use crate::nn::{ModelArch, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("unknown strategy `{name}` (known: {known})")]
    Unknown { name: String, known: String },
    #[error("invalid parameter for {strategy}: {message}")]
    InvalidParameter { strategy: &'static str, message: String },
    #[error("{strategy} does not accept {what}")]
    WrongProtocol { strategy: &'static str, what: &'static str },
    #[error("synchronous round incomplete: {0}")]
    IncompleteRound(String),
}

pub type Result<T, E = StrategyError> = std::result::Result<T, E>;

/// The server's view of the model: parameters plus version counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub w_g: ParamVector,
    pub t_g: u64,
}

impl GlobalState {
    pub fn new(w_g: ParamVector) -> Self {
        Self { w_g, t_g: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    Asynchronous,
    /// Each round samples this fraction of clients and waits for all of them.
    Synchronous { client_fraction: f64 },
}

/// What happened when an update reached the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalOutcome {
    pub aggregated: bool,
    pub staleness: u64,
    /// Blend weight applied, if an aggregation happened.
    pub beta: Option<f64>,
    pub corrected: bool,
}

/// One client's contribution to a synchronous round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate {
    pub msg: UpdateMessage,
    pub shard_size: usize,
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    fn protocol(&self) -> Protocol {
        Protocol::Asynchronous
    }

    fn on_update(&mut self, gs: &mut GlobalState, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let _ = (gs, msg);
        Err(StrategyError::WrongProtocol {
            strategy: self.name(),
            what: "individual asynchronous updates",
        })
    }

    /// `selected` lists the clients dispatched this round; `updates` must
    /// hold exactly one update from each of them.
    fn on_round(&mut self, gs: &mut GlobalState, selected: &[usize], updates: &[RoundUpdate]) -> Result<()> {
        let _ = (gs, selected, updates);
        Err(StrategyError::WrongProtocol {
            strategy: self.name(),
            what: "synchronous rounds",
        })
    }
}

/// Tunables shared by the built-in strategies. Each strategy reads the
/// fields it needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    /// Buffer capacity K for `fedbuff` and window size for `fedfa`.
    pub buffer_size: usize,
    /// Server momentum for `fedavgm`.
    pub server_momentum: f64,
    /// Fraction of clients sampled per synchronous round.
    pub sync_fraction: f64,
    /// Whether `fedadt` runs its distillation correction. Turning it off
    /// leaves exactly `fedasync`.
    pub correction: bool,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            buffer_size: 10,
            server_momentum: 0.9,
            sync_fraction: 0.1,
            correction: true,
        }
    }
}

/// Shared inputs a strategy may need at construction.
#[derive(Debug, Clone)]
pub struct StrategyContext {
    pub arch: ModelArch,
    /// Server-held labeled distillation samples.
    pub distill_set: Dataset,
    pub distill: DistillConfig,
}

pub type StrategyFactory = fn(&StrategyParams, &StrategyContext) -> Result<Box<dyn Strategy>>;

/// Name-to-constructor table for strategies.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    factories: BTreeMap<&'static str, StrategyFactory>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with all six built-in strategies.
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        registry.register("fedavg", |p, _| Ok(Box::new(FedAvg::new(p, false)?)));
        registry.register("fedavgm", |p, _| Ok(Box::new(FedAvg::new(p, true)?)));
        registry.register("fedasync", |_, _| Ok(Box::new(FedAsync)));
        registry.register("fedadt", |p, ctx| Ok(Box::new(FedAdt::new(p, ctx)?)));
        registry.register("fedbuff", |p, _| Ok(Box::new(FedBuff::new(p)?)));
        registry.register("fedfa", |p, _| Ok(Box::new(FedFa::new(p)?)));
        registry
    }

    /// Adds or replaces a strategy constructor.
    pub fn register(&mut self, name: &'static str, factory: StrategyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, params: &StrategyParams, ctx: &StrategyContext) -> Result<Box<dyn Strategy>> {
        let factory = self.factories.get(name).ok_or_else(|| StrategyError::Unknown {
            name: name.to_string(),
            known: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(params, ctx)
    }
}

fn staleness_blend(gs: &mut GlobalState, w_i: &ParamVector, tau: u64) -> Result<f64> {
    let beta = beta_weight(tau);
    blend_in_place(&mut gs.w_g, w_i, beta)?;
    gs.t_g += 1;
    Ok(beta)
}

/// Blend every arrival in with weight `1 / sqrt(staleness + 1)`.
#[derive(Debug, Clone, Default)]
pub struct FedAsync;

impl Strategy for FedAsync {
    fn name(&self) -> &'static str {
        "fedasync"
    }

    fn on_update(&mut self, gs: &mut GlobalState, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let tau = staleness(gs.t_g, msg.trained_from)?;
        let beta = staleness_blend(gs, &msg.w_client, tau)?;
        Ok(ArrivalOutcome {
            aggregated: true,
            staleness: tau,
            beta: Some(beta),
            corrected: false,
        })
    }
}

/// Staleness-weighted blending with distillation-based correction of any
/// update more than one version behind.
#[derive(Debug, Clone)]
pub struct FedAdt {
    arch: ModelArch,
    distill_set: Dataset,
    cfg: DistillConfig,
    correction: bool,
}

impl FedAdt {
    pub fn new(params: &StrategyParams, ctx: &StrategyContext) -> Result<Self> {
        ctx.distill.validate()?;
        if params.correction && ctx.distill_set.is_empty() {
            return Err(StrategyError::InvalidParameter {
                strategy: "fedadt",
                message: "the distillation set is empty".into(),
            });
        }
        Ok(Self {
            arch: ctx.arch.clone(),
            distill_set: ctx.distill_set.clone(),
            cfg: ctx.distill.clone(),
            correction: params.correction,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }
}

impl Strategy for FedAdt {
    fn name(&self) -> &'static str {
        "fedadt"
    }

    fn on_update(&mut self, gs: &mut GlobalState, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let tau = staleness(gs.t_g, msg.trained_from)?;
        let corrected = self.correction && tau > 1;
        let w_i = if corrected {
            distill::correct(&msg.w_client, &gs.w_g, gs.t_g, &self.distill_set, &self.arch, &self.cfg)?
        } else {
            msg.w_client
        };
        let beta = staleness_blend(gs, &w_i, tau)?;
        Ok(ArrivalOutcome {
            aggregated: true,
            staleness: tau,
            beta: Some(beta),
            corrected,
        })
    }
}

fn check_buffer_size(strategy: &'static str, k: usize) -> Result<()> {
    if k == 0 {
        return Err(StrategyError::InvalidParameter {
            strategy,
            message: "buffer_size must be at least 1".into(),
        });
    }
    Ok(())
}

/// Averages the buffered models and blends them in with the mean
/// staleness weight of the buffer, measured at the current version.
fn aggregate_window<'a>(
    gs: &mut GlobalState,
    window: impl ExactSizeIterator<Item = &'a UpdateMessage>,
) -> Result<f64> {
    let count = window.len();
    let mut sum: Option<ParamVector> = None;
    let mut beta_sum = 0.0;
    for msg in window {
        beta_sum += beta_weight(staleness(gs.t_g, msg.trained_from)?);
        match sum.as_mut() {
            None => sum = Some(msg.w_client.clone()),
            Some(acc) => {
                for (a, v) in acc.as_mut_slice().iter_mut().zip(msg.w_client.as_slice()) {
                    *a += v;
                }
            }
        }
    }
    let mut mean = sum.expect("aggregate_window called with a nonempty window");
    let n = count as f64;
    mean.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    let beta = beta_sum / n;
    blend_in_place(&mut gs.w_g, &mean, beta)?;
    gs.t_g += 1;
    Ok(beta)
}

/// Collect K updates, aggregate them, empty the buffer.
#[derive(Debug, Clone)]
pub struct FedBuff {
    capacity: usize,
    buffer: Vec<UpdateMessage>,
}

impl FedBuff {
    pub fn new(params: &StrategyParams) -> Result<Self> {
        check_buffer_size("fedbuff", params.buffer_size)?;
        Ok(Self {
            capacity: params.buffer_size,
            buffer: Vec::with_capacity(params.buffer_size),
        })
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }
}

impl Strategy for FedBuff {
    fn name(&self) -> &'static str {
        "fedbuff"
    }

    fn on_update(&mut self, gs: &mut GlobalState, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let tau = staleness(gs.t_g, msg.trained_from)?;
        self.buffer.push(msg);
        if self.buffer.len() < self.capacity {
            return Ok(ArrivalOutcome {
                aggregated: false,
                staleness: tau,
                beta: None,
                corrected: false,
            });
        }
        let beta = aggregate_window(gs, self.buffer.iter())?;
        self.buffer.clear();
        Ok(ArrivalOutcome {
            aggregated: true,
            staleness: tau,
            beta: Some(beta),
            corrected: false,
        })
    }
}

/// FIFO window of the K most recent updates; once full, every arrival
/// evicts the oldest entry and aggregates the window.
#[derive(Debug, Clone)]
pub struct FedFa {
    capacity: usize,
    window: VecDeque<UpdateMessage>,
}

impl FedFa {
    pub fn new(params: &StrategyParams) -> Result<Self> {
        check_buffer_size("fedfa", params.buffer_size)?;
        Ok(Self {
            capacity: params.buffer_size,
            window: VecDeque::with_capacity(params.buffer_size),
        })
    }

    pub fn window_clients(&self) -> Vec<usize> {
        self.window.iter().map(|m| m.client_id).collect()
    }
}

impl Strategy for FedFa {
    fn name(&self) -> &'static str {
        "fedfa"
    }

    fn on_update(&mut self, gs: &mut GlobalState, msg: UpdateMessage) -> Result<ArrivalOutcome> {
        let tau = staleness(gs.t_g, msg.trained_from)?;
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(msg);
        if self.window.len() < self.capacity {
            return Ok(ArrivalOutcome {
                aggregated: false,
                staleness: tau,
                beta: None,
                corrected: false,
            });
        }
        let beta = aggregate_window(gs, self.window.iter())?;
        Ok(ArrivalOutcome {
            aggregated: true,
            staleness: tau,
            beta: Some(beta),
            corrected: false,
        })
    }
}

/// Shard-size weighted mean of the round's client models.
pub fn weighted_mean(updates: &[RoundUpdate]) -> Result<ParamVector> {
    let total: usize = updates.iter().map(|u| u.shard_size).sum();
    if updates.is_empty() || total == 0 {
        return Err(StrategyError::IncompleteRound("no samples behind this round's updates".into()));
    }
    let len = updates[0].msg.w_client.len();
    let mut acc = vec![0.0; len];
    for u in updates {
        if u.msg.w_client.len() != len {
            return Err(FederationError::from(crate::nn::NnError::DimensionMismatch {
                what: "round update",
                expected: len,
                got: u.msg.w_client.len(),
            })
            .into());
        }
        let weight = u.shard_size as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(u.msg.w_client.as_slice()) {
            *a += weight * v;
        }
    }
    Ok(ParamVector::from(acc))
}

/// Synchronous averaging, optionally through server momentum.
#[derive(Debug, Clone)]
pub struct FedAvg {
    momentum: Option<f64>,
    velocity: Option<ParamVector>,
    client_fraction: f64,
}

impl FedAvg {
    pub fn new(params: &StrategyParams, with_momentum: bool) -> Result<Self> {
        let name = if with_momentum { "fedavgm" } else { "fedavg" };
        if !(params.sync_fraction > 0.0 && params.sync_fraction <= 1.0) {
            return Err(StrategyError::InvalidParameter {
                strategy: name,
                message: format!("sync_fraction must lie in (0, 1], got {}", params.sync_fraction),
            });
        }
        if with_momentum && !(0.0..1.0).contains(&params.server_momentum) {
            return Err(StrategyError::InvalidParameter {
                strategy: name,
                message: format!("server_momentum must lie in [0, 1), got {}", params.server_momentum),
            });
        }
        Ok(Self {
            momentum: with_momentum.then_some(params.server_momentum),
            velocity: None,
            client_fraction: params.sync_fraction,
        })
    }
}

impl Strategy for FedAvg {
    fn name(&self) -> &'static str {
        if self.momentum.is_some() {
            "fedavgm"
        } else {
            "fedavg"
        }
    }

    fn protocol(&self) -> Protocol {
        Protocol::Synchronous {
            client_fraction: self.client_fraction,
        }
    }

    fn on_round(&mut self, gs: &mut GlobalState, selected: &[usize], updates: &[RoundUpdate]) -> Result<()> {
        let mut seen = vec![false; selected.len()];
        for u in updates {
            let slot = selected
                .iter()
                .position(|&c| c == u.msg.client_id)
                .ok_or_else(|| StrategyError::IncompleteRound(format!("client {} was not selected", u.msg.client_id)))?;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(StrategyError::IncompleteRound(format!(
                    "client {} reported twice",
                    u.msg.client_id
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(StrategyError::IncompleteRound(format!(
                "missing update from client {}",
                selected[missing]
            )));
        }

        let mean = weighted_mean(updates)?;
        match self.momentum {
            None => gs.w_g = mean,
            Some(mu) => {
                let velocity = self.velocity.get_or_insert_with(|| ParamVector::zeros(mean.len()));
                for ((v, g), m) in velocity
                    .as_mut_slice()
                    .iter_mut()
                    .zip(gs.w_g.as_mut_slice())
                    .zip(mean.as_slice())
                {
                    *v = mu * *v + (*g - m);
                    *g -= *v;
                }
            }
        }
        gs.t_g += 1;
        Ok(())
    }
}
