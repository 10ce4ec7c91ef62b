//! TOML run configuration and the glue that turns one into a finished run.
//!
//! ```toml
//! seed = 1
//!
//! [dataset]
//! kind = "synthetic"        # or "idx" with train_images/train_labels/test_images/test_labels
//! classes = 10
//! per_class = 600
//! dim = 32
//!
//! [model]
//! hidden = [64]
//!
//! [partition]
//! clients = 50
//! alpha = 0.1
//!
//! [sim]
//! budget = 200000.0
//!
//! [strategy]
//! name = "fedadt"
//!
//! [distill]
//! warmup_rounds = 1000
//! ```
//!
//! Every section and field is optional except `strategy.name`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, BlobSpec, DataError, Dataset, PartitionParams, PartitionSpec};
use crate::distill::DistillConfig;
use crate::metrics::MetricsError;
use crate::nn::{Activation, ModelArch, NnError};
use crate::sim::{self, derive_seed, SimConfig, SimError, SimOutcome, Simulation};
use crate::strategies::{StrategyContext, StrategyError, StrategyParams, StrategyRegistry};

/// Attempts at drawing a partition with no empty client before giving up.
pub const PARTITION_ATTEMPTS: u64 = 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    /// True for mistakes in the user's configuration rather than failures
    /// during the run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Self::Parse { .. }
                | Self::Config(_)
                | Self::Data(DataError::InvalidParameter(_) | DataError::SpecFormat { .. } | DataError::SpecInvariant(_))
                | Self::Strategy(StrategyError::Unknown { .. } | StrategyError::InvalidParameter { .. })
                | Self::Sim(SimError::Config(_))
        ) || matches!(self, Self::Strategy(StrategyError::Distill(crate::distill::DistillError::InvalidConfig(_))))
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs; see [`data::synth_blobs_with`].
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        center_spread: f64,
        /// Seed for the data itself; defaults to the run seed.
        data_seed: Option<u64>,
    },
    /// IDX image/label files, optionally gzip-compressed.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first this many training samples.
        max_train: Option<usize>,
        max_test: Option<usize>,
    },
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    600
}
fn default_dim() -> usize {
    32
}
fn default_spread() -> f64 {
    1.5
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic {
            classes: default_classes(),
            per_class: default_per_class(),
            dim: default_dim(),
            center_spread: default_spread(),
            data_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; empty gives a linear softmax classifier.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: f64,
    pub distill_frac: f64,
    /// Held-out test fraction; ignored for IDX data, which has its own test files.
    pub test_frac: f64,
    /// Load a partition from this file instead of drawing one.
    pub spec: Option<PathBuf>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 100,
            alpha: 0.1,
            distill_frac: 0.005,
            test_frac: 0.2,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    #[serde(flatten)]
    pub params: StrategyParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub metrics: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    /// `sim.seed` is ignored; the top-level `seed` drives everything.
    #[serde(default)]
    pub sim: SimConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse {
            path: origin.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Checks everything that can be checked before any data is loaded.
    pub fn validate(&self) -> Result<()> {
        if !StrategyRegistry::with_builtins().contains(&self.strategy.name) {
            let known: Vec<_> = StrategyRegistry::with_builtins().names().collect();
            return Err(StrategyError::Unknown {
                name: self.strategy.name.clone(),
                known: known.join(", "),
            }
            .into());
        }
        self.sim.validate()?;
        self.distill
            .validate()
            .map_err(|e| ExperimentError::Config(format!("[distill] {e}")))?;
        if self.model.hidden.contains(&0) {
            return Err(ExperimentError::Config("hidden layer widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Data, partition and model shape for one seed, shared by every strategy
/// run on it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub distill: Dataset,
    pub partition: PartitionSpec,
    pub arch: ModelArch,
}

fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    match cfg {
        DatasetConfig::Synthetic {
            classes,
            per_class,
            dim,
            center_spread,
            data_seed,
        } => {
            let ds = data::synth_blobs_with(&BlobSpec {
                class_count: *classes,
                per_class: *per_class,
                dim: *dim,
                center_spread: *center_spread,
                seed: data_seed.unwrap_or(seed),
            })?;
            Ok((ds, None))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            max_train,
            max_test,
        } => {
            let truncate = |ds: Dataset, max: Option<usize>| match max {
                Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
                _ => ds,
            };
            let train = truncate(data::load_idx(train_images, train_labels)?, *max_train);
            let test = truncate(data::load_idx(test_images, test_labels)?, *max_test);
            if train.dim() != test.dim() {
                return Err(ExperimentError::Config(format!(
                    "train images have {} features but test images have {}",
                    train.dim(),
                    test.dim()
                )));
            }
            Ok((train, Some(test)))
        }
    }
}

/// Draws a Dirichlet partition, re-drawing with a derived seed while some
/// client ends up empty.
pub fn partition_with_retries(ds: &Dataset, params: &PartitionParams) -> Result<PartitionSpec> {
    let mut last = None;
    for attempt in 0..PARTITION_ATTEMPTS {
        let seed = if attempt == 0 {
            params.seed
        } else {
            derive_seed(params.seed, attempt)
        };
        match data::dirichlet_partition(ds, &PartitionParams { seed, ..params.clone() }) {
            Ok(spec) => return Ok(spec),
            Err(e @ DataError::InfeasiblePartition { .. }) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Loads the data and draws (or reads) the partition for `seed`.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let (full, separate_test) = load_dataset(&cfg.dataset, seed)?;
    let partition = match &cfg.partition.spec {
        Some(path) => {
            let spec = PartitionSpec::read(path)?;
            if spec.sample_count != full.len() {
                return Err(ExperimentError::Config(format!(
                    "{} describes {} samples but the dataset has {}",
                    path.display(),
                    spec.sample_count,
                    full.len()
                )));
            }
            spec
        }
        None => partition_with_retries(
            &full,
            &PartitionParams {
                clients: cfg.partition.clients,
                alpha: cfg.partition.alpha,
                distill_frac: cfg.partition.distill_frac,
                test_frac: if separate_test.is_some() { 0.0 } else { cfg.partition.test_frac },
                seed,
            },
        )?,
    };
    let test = match separate_test {
        Some(t) => t,
        None => full.subset(&partition.test_indices),
    };
    if test.is_empty() {
        return Err(ExperimentError::Config("the test set is empty; raise partition.test_frac".into()));
    }
    let distill = full.subset(&partition.distill_indices);
    let mut sizes = vec![full.dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(full.class_count().max(test.class_count()));
    let arch = ModelArch::new(sizes, cfg.model.activation)?;
    Ok(Prepared {
        train: full,
        test,
        distill,
        partition,
        arch,
    })
}

impl Prepared {
    /// Runs `strategy` on this data with the given settings.
    pub fn run(
        &self,
        sim_cfg: &SimConfig,
        strategy: &StrategyConfig,
        distill: &DistillConfig,
        seed: u64,
        trace: bool,
    ) -> Result<SimOutcome> {
        self.run_with(&StrategyRegistry::with_builtins(), sim_cfg, strategy, distill, seed, trace)
    }

    /// Like [`Prepared::run`] but resolves the strategy in `registry`.
    pub fn run_with(
        &self,
        registry: &StrategyRegistry,
        sim_cfg: &SimConfig,
        strategy: &StrategyConfig,
        distill: &DistillConfig,
        seed: u64,
        trace: bool,
    ) -> Result<SimOutcome> {
        let ctx = StrategyContext {
            arch: self.arch.clone(),
            distill_set: self.distill.clone(),
            distill: distill.clone(),
        };
        let built = registry.build(&strategy.name, &strategy.params, &ctx)?;
        let sim_cfg = SimConfig {
            seed,
            ..sim_cfg.clone()
        };
        let w0 = sim::initial_model(&self.arch, seed);
        let outcome = Simulation::new(
            sim_cfg,
            self.arch.clone(),
            built,
            w0,
            &self.train,
            self.partition.client_shards.clone(),
            &self.test,
        )?
        .with_trace(trace)
        .with_correction_cost(distill.correction_cost)?
        .run()?;
        Ok(outcome)
    }
}

/// Prepares data and runs the configured strategy for one seed.
pub fn run_experiment(cfg: &RunConfig, seed: u64, trace: bool) -> Result<SimOutcome> {
    cfg.validate()?;
    prepare(cfg, seed)?.run(&cfg.sim, &cfg.strategy, &cfg.distill, seed, trace)
}
