//! Datasets and client partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(invalid(
                "features",
                format!(
                    "{} values do not form {} rows of width {feature_dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Rows at `indices` with caller-supplied labels.
    pub fn batch_with_labels(&self, indices: &[usize], labels: Vec<usize>) -> Result<Batch<'_>> {
        Batch::new(indices.iter().map(|&i| self.row(i)).collect(), labels)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<'_> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(indices.iter().map(|&i| self.row(i)).collect(), labels).expect("rows and labels align")
    }

    pub fn all(&self) -> Batch<'_> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Overrides the class count, e.g. when a split happens to miss the
    /// highest label.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features[..n * self.feature_dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

/// Assignment of sample indices to clients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// True when the shards are disjoint and together cover `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.shards.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Random split into `k` shards whose sizes differ by at most one; the
/// first `n mod k` shards get the extra sample.
pub fn iid_partition(n: usize, k: usize, rng: &mut impl Rng) -> Result<Partition> {
    if k == 0 || n < k {
        return Err(invalid("clients", format!("cannot split {n} samples across {k} clients")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        shards.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition { shards })
}

/// Draws `p ~ Dir_k(alpha)` by normalizing independent Gamma(alpha) draws.
pub fn sample_dirichlet(k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid("alpha", e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Integer counts summing exactly to `n`, proportional to `proportions`:
/// floors first, then one extra each for the largest remainders (lowest
/// index wins ties).
pub fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Splits each class's (shuffled) samples across clients by the
/// proportions `proportions_for(class)`.
pub fn partition_by_class<R: Rng>(
    labels: &[usize],
    k: usize,
    rng: &mut R,
    mut proportions_for: impl FnMut(usize, &mut R) -> Result<Vec<f64>>,
) -> Result<Partition> {
    if k == 0 {
        return Err(invalid("clients", "need at least one client"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut shards = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let p = proportions_for(class, rng)?;
        members.shuffle(rng);
        let mut start = 0;
        for (shard, count) in shards.iter_mut().zip(largest_remainder(members.len(), &p)) {
            shard.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(Partition { shards })
}

/// Non-IID split: class `l`'s samples go to clients in proportions
/// `p_l ~ Dir_K(alpha)`. Classes without samples are skipped.
pub fn dirichlet_partition(labels: &[usize], k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    partition_by_class(labels, k, rng, |_, rng| sample_dirichlet(k, alpha, rng))
}

/// Redraws [`dirichlet_partition`] until every client holds at least
/// `min_size` samples.
pub fn dirichlet_partition_min_size(
    labels: &[usize],
    k: usize,
    alpha: f64,
    min_size: usize,
    rng: &mut impl Rng,
) -> Result<Partition> {
    const MAX_ATTEMPTS: usize = 1000;
    if labels.len() < k * min_size {
        return Err(invalid("clients", format!("{} samples cannot give {k} clients {min_size} each", labels.len())));
    }
    for _ in 0..MAX_ATTEMPTS {
        let p = dirichlet_partition(labels, k, alpha, rng)?;
        if p.shards.iter().all(|s| s.len() >= min_size) {
            return Ok(p);
        }
    }
    Err(invalid(
        "alpha",
        format!("no partition with {min_size}+ samples per client after {MAX_ATTEMPTS} draws"),
    ))
}

/// How the training set is split across clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid {},
    Dirichlet { alpha: f64 },
}

impl PartitionScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(invalid("alpha", format!("must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Splits `labels` across `k` clients; Dirichlet draws are repeated
    /// until no client is left empty.
    pub fn apply(&self, labels: &[usize], k: usize, rng: &mut impl Rng) -> Result<Partition> {
        match *self {
            Self::Iid {} => iid_partition(labels.len(), k, rng),
            Self::Dirichlet { alpha } => dirichlet_partition_min_size(labels, k, alpha, 1, rng),
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let header = |bytes: &[u8], path: &Path, words: usize| -> Result<Vec<u32>> {
        (0..words)
            .map(|w| read_u32(bytes, 4 * w).ok_or_else(|| idx_error(path, "truncated header")))
            .collect()
    };
    let ih = header(&images, images_path, 4)?;
    if ih[0] != IDX_IMAGES_MAGIC {
        return Err(idx_error(images_path, format!("bad magic {}, expected {IDX_IMAGES_MAGIC}", ih[0])));
    }
    let lh = header(&labels, labels_path, 2)?;
    if lh[0] != IDX_LABELS_MAGIC {
        return Err(idx_error(labels_path, format!("bad magic {}, expected {IDX_LABELS_MAGIC}", lh[0])));
    }
    let (n, rows, cols) = (ih[1] as usize, ih[2] as usize, ih[3] as usize);
    if lh[1] as usize != n {
        return Err(idx_error(labels_path, format!("{} labels for {n} images", lh[1])));
    }
    let pixels = n * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| idx_error(images_path, format!("truncated: need {pixels} pixel bytes")))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| idx_error(labels_path, format!("truncated: need {n} label bytes")))?;

    let features = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, rows * cols, num_classes)
}

/// Serializes images in IDX format.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for word in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

/// Serializes labels in IDX format.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Train images, train labels, test images, test labels.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Train and test splits of MNIST from a directory holding the four
/// standard uncompressed IDX files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let [train_x, train_y, test_x, test_y] = MNIST_FILES.map(|f| dir.join(f));
    let train = load_idx(train_x, train_y)?;
    let test = load_idx(test_x, test_y)?;
    Ok((train.with_num_classes(10)?, test.with_num_classes(10)?))
}

/// Isotropic unit-variance Gaussian blobs, `n_per_class` per class.
///
/// Class means sit `separation` apart: on scaled basis vectors when the
/// feature dimension allows one axis per class, otherwise evenly spaced
/// along the first axis.
pub fn synthetic_blobs(
    num_classes: usize,
    n_per_class: usize,
    feature_dim: usize,
    separation: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(invalid("classes", "need at least two classes"));
    }
    if feature_dim == 0 {
        return Err(invalid("features", "need at least one feature"));
    }
    let class_mean = |class: usize| -> Vec<f64> {
        let mut m = vec![0.0; feature_dim];
        if feature_dim >= num_classes {
            m[class] = separation / std::f64::consts::SQRT_2;
        } else {
            m[0] = separation * class as f64;
        }
        m
    };
    let n = num_classes * n_per_class;
    let mut features = Vec::with_capacity(n * feature_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mean = class_mean(class);
        features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
        labels.push(class);
    }
    Dataset::new(features, labels, feature_dim, num_classes)
}
