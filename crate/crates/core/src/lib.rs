//! Deterministic virtual-time simulator for asynchronous federated learning.
//!
//! A run loads or synthesizes a labeled dataset, splits it across clients
//! with a Dirichlet label skew, and replays client training and model
//! uploads as events on a virtual clock. A server-side strategy from the
//! [`strategies`] registry folds each arrival into the global model; the
//! [`sim`] engine evaluates the model on a held-out set at fixed intervals
//! and writes the log described in [`metrics`].
//!
//! The `fedadt` strategy corrects stale client models by distilling them
//! toward the current global model on a small server-held labeled set
//! before blending them in (see [`distill`]).

pub mod data;
pub mod distill;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod sim;
pub mod strategies;
