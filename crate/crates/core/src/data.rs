//! Datasets, IDX ingestion, synthetic blobs and Dirichlet label-skew
//! partitioning.
//!
//! A [`PartitionSpec`] assigns every sample of a dataset to exactly one of:
//! a client shard, the server's distillation set, the test set. The server
//! sets are drawn first and uniformly; the remaining pool is split across
//! clients per class by a Dirichlet draw over clients.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated IDX file, need {needed} bytes but only {available} present")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("sample count mismatch: {images_path} holds {images} images but {labels_path} holds {labels} labels")]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid partition parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible partition: client {client} would receive no samples (seed {seed})")]
    InfeasiblePartition { client: usize, seed: u64 },
    #[error("partition spec line {line}: {message}")]
    SpecFormat { line: usize, message: String },
    #[error("partition spec violates an invariant: {0}")]
    SpecInvariant(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Row-major features in `[0, 1]` with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, class_count: usize) -> Result<Self> {
        if dim == 0 || class_count == 0 {
            return Err(DataError::InvalidDataset("dim and class_count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::InvalidDataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::InvalidDataset(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            class_count: self.class_count,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn require_len(bytes: &[u8], needed: usize, path: &Path) -> Result<()> {
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair (plain or gzip-compressed).
///
/// Pixels are scaled by 1/255; the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    // header fields are untrusted; saturate so absurd sizes read as truncation
    let dim = rows.saturating_mul(cols);
    require_len(&images, n_images.saturating_mul(dim).saturating_add(16), images_path)?;

    let labels_raw = read_file(labels_path)?;
    check_magic(&labels_raw, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&labels_raw, 4, labels_path)? as usize;
    require_len(&labels_raw, n_labels.saturating_add(8), labels_path)?;

    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images_path: images_path.to_path_buf(),
            labels_path: labels_path.to_path_buf(),
            images: n_images,
            labels: n_labels,
        });
    }
    if dim == 0 {
        return Err(DataError::InvalidDataset(format!(
            "{}: zero-sized images",
            images_path.display()
        )));
    }

    let features: Vec<f64> = images[16..16 + n_images * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[8..8 + n_labels].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, dim, class_count)
}

/// Shape of a synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of the class centres, in units of the per-sample noise.
    pub center_spread: f64,
    pub seed: u64,
}

/// Gaussian blobs with the default centre spread of 1.5 noise units.
pub fn synth_blobs(class_count: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with(&BlobSpec {
        class_count,
        per_class,
        dim,
        center_spread: 1.5,
        seed,
    })
}

/// One isotropic unit-variance Gaussian per class around a random centre,
/// then every feature min-max scaled to `[0, 1]`. Rows are grouped by class.
pub fn synth_blobs_with(spec: &BlobSpec) -> Result<Dataset> {
    if spec.class_count == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(DataError::InvalidParameter("blob counts must all be at least 1".into()));
    }
    if !(spec.center_spread >= 0.0 && spec.center_spread.is_finite()) {
        return Err(DataError::InvalidParameter("center_spread must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let n = spec.class_count * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            features.extend(center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
            labels.push(class);
        }
    }
    for d in 0..spec.dim {
        let col = features.iter().skip(d).step_by(spec.dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = hi - lo;
        for v in features.iter_mut().skip(d).step_by(spec.dim) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
    Dataset::new(features, labels, spec.dim, spec.class_count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionParams {
    pub clients: usize,
    pub alpha: f64,
    pub distill_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

/// Assignment of sample indices to clients and to the server-held sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub sample_count: usize,
    pub client_shards: Vec<Vec<usize>>,
    pub distill_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

/// Dirichlet(alpha, ..., alpha) sample over `k` components.
///
/// Built from normalized Gamma(alpha, 1) draws. If every draw underflows
/// to zero (possible for tiny alpha), all mass goes to one uniformly chosen
/// component, which is the limiting behaviour as alpha goes to 0.
fn dirichlet_weights<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        let mut w = vec![0.0; k];
        w[rng.random_range(0..k)] = 1.0;
        w
    }
}

/// Splits `ds` into test, distillation and per-client index sets.
///
/// Test indices (`round(test_frac * N)`) are drawn uniformly first, then the
/// distillation set (`round(distill_frac * pool)`) from the remaining
/// training pool. Everything left is dealt out class by class: a
/// Dirichlet draw over clients gives each client's share of that class.
pub fn dirichlet_partition(ds: &Dataset, params: &PartitionParams) -> Result<PartitionSpec> {
    let PartitionParams {
        clients,
        alpha,
        distill_frac,
        test_frac,
        seed,
    } = *params;
    if clients == 0 {
        return Err(DataError::InvalidParameter("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidParameter(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    for (name, f) in [("distill_frac", distill_frac), ("test_frac", test_frac)] {
        if !(0.0..0.5).contains(&f) {
            return Err(DataError::InvalidParameter(format!("{name} must lie in [0, 0.5), got {f}")));
        }
    }

    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let n_test = (test_frac * n as f64).round() as usize;
    let pool = &order[n_test..];
    let n_distill = (distill_frac * pool.len() as f64).round() as usize;
    let mut test_indices = order[..n_test].to_vec();
    let mut distill_indices = pool[..n_distill].to_vec();
    test_indices.sort_unstable();
    distill_indices.sort_unstable();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for &i in &pool[n_distill..] {
        by_class[ds.label(i)].push(i);
    }

    let mut client_shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for members in by_class.iter_mut() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        let weights = dirichlet_weights(&mut rng, alpha, clients);
        let total = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (client, w) in weights.iter().enumerate() {
            cumulative += w;
            let end = if client + 1 == clients {
                total
            } else {
                ((cumulative * total as f64).round() as usize).clamp(start, total)
            };
            client_shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for (client, shard) in client_shards.iter_mut().enumerate() {
        if shard.is_empty() {
            return Err(DataError::InfeasiblePartition { client, seed });
        }
        shard.sort_unstable();
    }

    Ok(PartitionSpec {
        sample_count: n,
        client_shards,
        distill_indices,
        test_indices,
        dirichlet_alpha: alpha,
        seed,
    })
}

impl PartitionSpec {
    pub fn clients(&self) -> usize {
        self.client_shards.len()
    }

    /// Checks disjointness, range and exact coverage of `0..sample_count`.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![false; self.sample_count];
        let sets = self
            .client_shards
            .iter()
            .chain([&self.distill_indices, &self.test_indices]);
        for set in sets {
            for &i in set {
                if i >= self.sample_count {
                    return Err(DataError::SpecInvariant(format!(
                        "index {i} out of range for {} samples",
                        self.sample_count
                    )));
                }
                if std::mem::replace(&mut owner[i], true) {
                    return Err(DataError::SpecInvariant(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = owner.iter().position(|o| !o) {
            return Err(DataError::SpecInvariant(format!("index {i} unassigned")));
        }
        if let Some(c) = self.client_shards.iter().position(Vec::is_empty) {
            return Err(DataError::SpecInvariant(format!("client {c} has an empty shard")));
        }
        Ok(())
    }

    /// Plain-text form: `key = value` lines, index lists space separated.
    pub fn to_text(&self) -> String {
        fn join(v: &[usize]) -> String {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        }
        let mut out = String::from("# fedsim partition spec v1\n");
        let _ = writeln!(out, "samples = {}", self.sample_count);
        let _ = writeln!(out, "clients = {}", self.clients());
        let _ = writeln!(out, "dirichlet_alpha = {}", self.dirichlet_alpha);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "test = {}", join(&self.test_indices));
        let _ = writeln!(out, "distill = {}", join(&self.distill_indices));
        for (c, shard) in self.client_shards.iter().enumerate() {
            let _ = writeln!(out, "client.{c} = {}", join(shard));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sample_count = None;
        let mut clients = None;
        let mut alpha = None;
        let mut seed = None;
        let mut test = None;
        let mut distill = None;
        let mut shards: Vec<Option<Vec<usize>>> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| DataError::SpecFormat {
                line: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_list = |v: &str| -> Result<Vec<usize>> {
                v.split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(format!("bad index `{t}`"))))
                    .collect()
            };
            match key {
                "samples" => sample_count = Some(value.parse().map_err(|_| bad("bad sample count".into()))?),
                "clients" => {
                    let m: usize = value.parse().map_err(|_| bad("bad client count".into()))?;
                    shards = vec![None; m];
                    clients = Some(m);
                }
                "dirichlet_alpha" => alpha = Some(value.parse().map_err(|_| bad("bad alpha".into()))?),
                "seed" => seed = Some(value.parse().map_err(|_| bad("bad seed".into()))?),
                "test" => test = Some(parse_list(value)?),
                "distill" => distill = Some(parse_list(value)?),
                k if k.starts_with("client.") => {
                    let c: usize = k["client.".len()..]
                        .parse()
                        .map_err(|_| bad(format!("bad client key `{k}`")))?;
                    let slot = shards
                        .get_mut(c)
                        .ok_or_else(|| bad(format!("client {c} listed before or beyond `clients`")))?;
                    if slot.replace(parse_list(value)?).is_some() {
                        return Err(bad(format!("client {c} listed twice")));
                    }
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }

        let missing = |what: &str| DataError::SpecFormat {
            line: 0,
            message: format!("missing `{what}`"),
        };
        let clients = clients.ok_or_else(|| missing("clients"))?;
        let client_shards = shards
            .into_iter()
            .enumerate()
            .map(|(c, s)| s.ok_or_else(|| missing(&format!("client.{c}"))))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(client_shards.len(), clients);
        let spec = PartitionSpec {
            sample_count: sample_count.ok_or_else(|| missing("samples"))?,
            client_shards,
            distill_indices: distill.ok_or_else(|| missing("distill"))?,
            test_indices: test.ok_or_else(|| missing("test"))?,
            dirichlet_alpha: alpha.ok_or_else(|| missing("dirichlet_alpha"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(clients: usize, alpha: f64, seed: u64) -> PartitionParams {
        PartitionParams {
            clients,
            alpha,
            distill_frac: 0.005,
            test_frac: 0.2,
            seed,
        }
    }

    #[test]
    fn dataset_rejects_inconsistent_shapes() {
        assert!(Dataset::new(vec![0.0; 5], vec![0, 1], 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![0, 2], 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![0, 1], 2, 2).is_ok());
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(2, 10, 3, 42).unwrap();
        let b = synth_blobs(2, 10, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 10);
        assert!((0..a.len()).all(|i| a.sample(i).iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, synth_blobs(2, 10, 3, 43).unwrap());
    }

    #[test]
    fn single_client_gets_the_whole_pool() {
        let ds = synth_blobs(3, 100, 2, 1).unwrap();
        let spec = dirichlet_partition(&ds, &params(1, 0.5, 9)).unwrap();
        assert_eq!(spec.test_indices.len(), 60);
        assert_eq!(spec.distill_indices.len(), 1); // round(0.005 * 240)
        assert_eq!(spec.client_shards[0].len(), 300 - 60 - 1);
        spec.validate().unwrap();
    }

    #[test]
    fn distill_split_size_follows_pool() {
        let ds = synth_blobs(10, 200, 2, 3).unwrap();
        let spec = dirichlet_partition(&ds, &params(5, 1.0, 4)).unwrap();
        let pool = 2000 - 400;
        assert_eq!(spec.distill_indices.len(), (0.005 * pool as f64).round() as usize);
        let total: usize = spec.client_shards.iter().map(Vec::len).sum::<usize>()
            + spec.distill_indices.len()
            + spec.test_indices.len();
        assert_eq!(total, 2000);
    }

    #[test]
    fn infeasible_partition_is_reported() {
        let ds = synth_blobs(2, 3, 2, 3).unwrap();
        let err = dirichlet_partition(&ds, &params(40, 0.1, 0)).unwrap_err();
        assert!(matches!(err, DataError::InfeasiblePartition { .. }), "{err}");
    }

    #[test]
    fn bad_parameters_rejected() {
        let ds = synth_blobs(2, 10, 2, 3).unwrap();
        assert!(dirichlet_partition(&ds, &params(0, 1.0, 0)).is_err());
        assert!(dirichlet_partition(&ds, &params(2, 0.0, 0)).is_err());
        let mut p = params(2, 1.0, 0);
        p.test_frac = 0.5;
        assert!(matches!(dirichlet_partition(&ds, &p), Err(DataError::InvalidParameter(_))));
    }

    #[test]
    fn large_alpha_tracks_global_proportions() {
        // Dirichlet(1000) concentrates tightly around uniform shares.
        let ds = synth_blobs(4, 1000, 2, 8).unwrap();
        for seed in 0..20 {
            let spec = dirichlet_partition(&ds, &params(10, 1000.0, seed)).unwrap();
            for shard in &spec.client_shards {
                for class in 0..4 {
                    let share = shard.iter().filter(|&&i| ds.label(i) == class).count() as f64 / shard.len() as f64;
                    assert!((share - 0.25).abs() <= 0.05, "seed {seed} class {class}: {share}");
                }
            }
        }
    }

    fn mean_label_entropy(ds: &Dataset, spec: &PartitionSpec) -> f64 {
        let mut total = 0.0;
        for shard in &spec.client_shards {
            let mut counts = vec![0usize; ds.class_count()];
            for &i in shard {
                counts[ds.label(i)] += 1;
            }
            let n = shard.len() as f64;
            total -= counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| (c as f64 / n) * (c as f64 / n).ln())
                .sum::<f64>();
        }
        total / spec.clients() as f64
    }

    #[test]
    fn smaller_alpha_is_more_heterogeneous() {
        let ds = synth_blobs(10, 300, 2, 2).unwrap();
        let mut low = 0.0;
        let mut high = 0.0;
        let mut seeds = 0;
        for seed in 0..40u64 {
            let (Ok(a), Ok(b)) = (
                dirichlet_partition(&ds, &params(10, 0.1, seed)),
                dirichlet_partition(&ds, &params(10, 1.0, seed)),
            ) else {
                continue;
            };
            low += mean_label_entropy(&ds, &a);
            high += mean_label_entropy(&ds, &b);
            seeds += 1;
        }
        assert!(seeds >= 10);
        assert!(low / (seeds as f64) < high / (seeds as f64));
    }

    #[test]
    fn spec_text_round_trip() {
        let ds = synth_blobs(3, 50, 2, 1).unwrap();
        let spec = dirichlet_partition(&ds, &params(4, 0.7, 5)).unwrap();
        let back = PartitionSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_text_rejects_overlap() {
        let text = "samples = 3\nclients = 1\ndirichlet_alpha = 1\nseed = 0\ntest = 0\ndistill = 0\nclient.0 = 1 2\n";
        assert!(matches!(PartitionSpec::from_text(text), Err(DataError::SpecInvariant(_))));
        let text = "samples = 3\nclients = 1\nnonsense\n";
        assert!(matches!(PartitionSpec::from_text(text), Err(DataError::SpecFormat { line: 3, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_disjoint_and_covering(clients in 1usize..12, alpha in 0.05f64..5.0, seed in any::<u64>()) {
            let ds = synth_blobs(5, 60, 2, 17).unwrap();
            match dirichlet_partition(&ds, &params(clients, alpha, seed)) {
                Ok(spec) => {
                    spec.validate().unwrap();
                    prop_assert!(spec.distill_indices.iter().all(|i| !spec.test_indices.contains(i)));
                    prop_assert_eq!(spec.clone(), dirichlet_partition(&ds, &params(clients, alpha, seed)).unwrap());
                }
                Err(DataError::InfeasiblePartition { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
