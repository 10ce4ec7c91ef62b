//! Client-side local training, staleness accounting and the staleness-decay
//! blend used by every asynchronous strategy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{self, cross_entropy, ModelArch, NnError, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("internal invariant violated: update trained from timestamp {trained_from} is newer than global timestamp {global}")]
    FutureTimestamp { global: u64, trained_from: u64 },
    #[error("blend weight must lie in [0, 1], got {0}")]
    BadBeta(f64),
    #[error("client {0} has an empty shard")]
    EmptyShard(usize),
    #[error("invalid client setting: {0}")]
    InvalidSetting(String),
}

pub type Result<T, E = FederationError> = std::result::Result<T, E>;

/// A trained client model on its way back to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub client_id: usize,
    pub w_client: ParamVector,
    /// Global timestamp of the model the client started from.
    pub trained_from: u64,
    pub dispatch_time: f64,
    pub arrival_time: f64,
}

impl UpdateMessage {
    pub fn scheduled(mut self, dispatch_time: f64, arrival_time: f64) -> Self {
        debug_assert!(arrival_time >= dispatch_time);
        self.dispatch_time = dispatch_time;
        self.arrival_time = arrival_time;
        self
    }
}

/// Everything a client needs for one round of local training.
///
/// `rng_seed` seeds the client's private minibatch stream for this job;
/// the scheduler derives a fresh one per dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<usize>,
    pub rng_seed: u64,
    pub local_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl ClientState {
    pub fn validate(&self) -> Result<()> {
        if self.shard.is_empty() {
            return Err(FederationError::EmptyShard(self.client_id));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(FederationError::InvalidSetting("steps and batch_size must be at least 1".into()));
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return Err(FederationError::InvalidSetting(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.local_lr
            )));
        }
        Ok(())
    }
}

/// Runs `steps` SGD steps from `w`, each on a minibatch of `batch_size`
/// shard indices drawn uniformly with replacement from the client's own
/// stream. `gradient` maps (params, minibatch) to the minibatch gradient.
pub fn client_train_with<G>(cs: &ClientState, w: &ParamVector, t: u64, mut gradient: G) -> Result<UpdateMessage>
where
    G: FnMut(&ParamVector, &[usize]) -> Result<ParamVector>,
{
    cs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cs.rng_seed);
    let mut y = w.clone();
    let mut batch = vec![0usize; cs.batch_size];
    for _ in 0..cs.steps {
        for slot in batch.iter_mut() {
            *slot = cs.shard[rng.random_range(0..cs.shard.len())];
        }
        let g = gradient(&y, &batch)?;
        nn::sgd_step_in_place(&mut y, &g, cs.local_lr)?;
    }
    Ok(UpdateMessage {
        client_id: cs.client_id,
        w_client: y,
        trained_from: t,
        dispatch_time: 0.0,
        arrival_time: 0.0,
    })
}

/// Local training with mean cross-entropy on the client's shard.
///
/// The returned message carries zero dispatch/arrival times; the scheduler
/// fills them in with [`UpdateMessage::scheduled`].
pub fn client_train(cs: &ClientState, w: &ParamVector, t: u64, arch: &ModelArch, ds: &Dataset) -> Result<UpdateMessage> {
    client_train_with(cs, w, t, |params, batch| {
        let inputs: Vec<&[f64]> = batch.iter().map(|&i| ds.sample(i)).collect();
        let (_, grad) = arch.mean_gradient(params, &inputs, |k, z| cross_entropy(z, ds.label(batch[k])))?;
        Ok(grad)
    })
}

/// Number of global versions between the client's snapshot and now.
pub fn staleness(global: u64, trained_from: u64) -> Result<u64> {
    global
        .checked_sub(trained_from)
        .ok_or(FederationError::FutureTimestamp { global, trained_from })
}

/// `1 / sqrt(tau + 1)`.
pub fn beta_weight(staleness: u64) -> f64 {
    1.0 / ((staleness as f64) + 1.0).sqrt()
}

/// `(1 - beta) * w_g + beta * w_i`, elementwise.
pub fn blend(w_g: &ParamVector, w_i: &ParamVector, beta: f64) -> Result<ParamVector> {
    let mut out = w_g.clone();
    blend_in_place(&mut out, w_i, beta)?;
    Ok(out)
}

pub fn blend_in_place(w_g: &mut ParamVector, w_i: &ParamVector, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(FederationError::BadBeta(beta));
    }
    if w_g.len() != w_i.len() {
        return Err(NnError::DimensionMismatch {
            what: "blended model",
            expected: w_g.len(),
            got: w_i.len(),
        }
        .into());
    }
    let keep = 1.0 - beta;
    for (g, i) in w_g.as_mut_slice().iter_mut().zip(w_i.as_slice()) {
        *g = keep * *g + beta * i;
    }
    Ok(())
}
