//! Datasets: CSV ingestion, synthetic generation, label similarity, and
//! seeded mini-batch sampling.

mod files;

pub use files::{load_csv, save_csv};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::SimilarityBlock;
use crate::matrix::Matrix;

/// Which role a dataset plays in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Query => write!(f, "query"),
            Split::Gallery => write!(f, "gallery"),
        }
    }
}

/// Feature vectors with label sets; the source of pairwise similarity
/// ground truth. Labels are stored sorted and deduplicated, and every
/// sample carries at least one label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    ids: Vec<u64>,
    features: Matrix,
    labels: Vec<Vec<u32>>,
    split: Split,
}

impl FeatureDataset {
    pub fn new(
        ids: Vec<u64>,
        features: Matrix,
        labels: Vec<Vec<u32>>,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 {
            return Err(Error::data("dataset must have at least one sample and one feature"));
        }
        if ids.len() != n || labels.len() != n {
            return Err(Error::data(format!(
                "ids ({}), labels ({}) and features ({}) disagree on sample count",
                ids.len(),
                labels.len(),
                n
            )));
        }
        if !features.is_finite() {
            return Err(Error::data("non-finite feature value"));
        }
        let mut labels = labels;
        for (i, ls) in labels.iter_mut().enumerate() {
            if ls.is_empty() {
                return Err(Error::data(format!("sample {} (id {}) has no labels", i, ids[i])));
            }
            ls.sort_unstable();
            ls.dedup();
        }
        Ok(FeatureDataset {
            ids,
            features,
            labels,
            split,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // invariant: N >= 1
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn split(&self) -> Split {
        self.split
    }

    #[inline]
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    #[inline]
    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }

    #[inline]
    pub fn label_set(&self, i: usize) -> &[u32] {
        &self.labels[i]
    }

    pub fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    /// Extracts the given rows into a new dataset tagged with `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<FeatureDataset> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::internal(format!("subset index {i} out of range")));
            }
            ids.push(self.ids[i]);
            labels.push(self.labels[i].clone());
            rows.push(self.features.row(i).to_vec());
        }
        FeatureDataset::new(ids, Matrix::from_rows(&rows)?, labels, split)
    }

    /// Returns a copy of this dataset with rows reordered by ascending id.
    pub fn sorted_by_id(&self) -> Result<FeatureDataset> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        self.subset(&order, self.split)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Label-set similarity: 1 iff the two sets share at least one label.
pub fn similarity(labels_i: &[u32], labels_j: &[u32]) -> Result<u8> {
    if labels_i.is_empty() || labels_j.is_empty() {
        return Err(Error::data("similarity of an empty label set is undefined"));
    }
    let hit = labels_i.iter().any(|l| labels_j.contains(l));
    Ok(u8::from(hit))
}

/// Parameters for the seeded Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub class_center_scale: f64,
    /// Probability that a sample receives one extra label from another class.
    pub multilabel_overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            samples_per_class: 500,
            dim: 32,
            cluster_spread: 0.8,
            class_center_scale: 1.0,
            multilabel_overlap: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(Error::config(
                "num_classes, samples_per_class and dim must be positive",
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config("cluster_spread must be positive"));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::config("class_center_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.multilabel_overlap) {
            return Err(Error::config("multilabel_overlap must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

/// Draws class centers from a seeded scaled normal, then samples each class
/// as center plus isotropic noise. With probability `multilabel_overlap` a
/// sample gets one extra label drawn uniformly from the other classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut centers = Matrix::zeros(spec.num_classes, spec.dim);
    for v in centers.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * spec.class_center_scale;
    }

    let n = spec.total_samples();
    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            let center = centers.row(class);
            let out = features.row_mut(row);
            for (o, &c) in out.iter_mut().zip(center.iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *o = c + z * spec.cluster_spread;
            }
            let mut ls = vec![class as u32];
            if spec.num_classes > 1 && rng.random::<f64>() < spec.multilabel_overlap {
                let mut extra = rng.random_range(0..spec.num_classes - 1);
                if extra >= class {
                    extra += 1;
                }
                ls.push(extra as u32);
            }
            labels.push(ls);
            row += 1;
        }
    }

    let ids = (0..n as u64).collect();
    FeatureDataset::new(ids, features, labels, Split::Train)
}

/// One sampled mini-batch: selected row indices, gathered features, and the
/// within-batch pairwise similarity block (symmetric, all-ones diagonal).
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub sim: SimilarityBlock,
}

/// Seeded epoch-wise batch sampler. Every epoch is one shuffled pass over
/// all training indices; the last batch of an epoch may be smaller.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(BatchSampler {
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Draws the next batch of the current epoch, reshuffling when a new
    /// epoch starts.
    pub fn sample_batch(&mut self, dataset: &FeatureDataset) -> Result<Batch> {
        if dataset.split() != Split::Train {
            return Err(Error::config(format!(
                "batches are sampled from the train split, got {}",
                dataset.split()
            )));
        }
        let n = dataset.len();
        if self.order.len() != n {
            if !self.order.is_empty() {
                return Err(Error::internal(
                    "sampler reused with a dataset of different size",
                ));
            }
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(n);
        let indices: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor >= n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }

        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| dataset.features().row(i).to_vec())
            .collect();
        let labels: Vec<Vec<u32>> = indices
            .iter()
            .map(|&i| dataset.label_set(i).to_vec())
            .collect();
        Ok(Batch {
            features: Matrix::from_rows(&rows)?,
            sim: SimilarityBlock::from_labels(&labels),
            indices,
        })
    }
}

/// Per-dimension z-scoring fitted on the train split and applied to every
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &FeatureDataset) -> Self {
        let (n, d) = dataset.features().shape();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(dataset.features().row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in dataset.features().row(i).iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, dataset: &mut FeatureDataset) -> Result<()> {
        if dataset.dim() != self.mean.len() {
            return Err(Error::config(format!(
                "standardizer fitted on {} dims, dataset has {}",
                self.mean.len(),
                dataset.dim()
            )));
        }
        let n = dataset.len();
        let features = dataset.features_mut();
        for i in 0..n {
            for (j, v) in features.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(())
    }
}

/// The three splits of one experiment.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: FeatureDataset,
    pub query: FeatureDataset,
    pub gallery: FeatureDataset,
}

impl DatasetBundle {
    /// Fits a standardizer on the train split and applies it to all three.
    pub fn standardize(&mut self) -> Result<Standardizer> {
        let standardizer = Standardizer::fit(&self.train);
        standardizer.apply(&mut self.train)?;
        standardizer.apply(&mut self.query)?;
        standardizer.apply(&mut self.gallery)?;
        Ok(standardizer)
    }
}

/// Seeded partition of one dataset into query / gallery / train splits.
///
/// Queries are sampled first; the gallery is everything else; the train set
/// is drawn from the gallery (so train and gallery overlap, while query
/// stays disjoint from both by id).
pub fn split_bundle(
    dataset: &FeatureDataset,
    query_count: usize,
    train_count: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    let n = dataset.len();
    if query_count == 0 || query_count >= n {
        return Err(Error::config(format!(
            "query_count must be in 1..{n}, got {query_count}"
        )));
    }
    let gallery_n = n - query_count;
    if train_count == 0 || train_count > gallery_n {
        return Err(Error::config(format!(
            "train_count must be in 1..={gallery_n}, got {train_count}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut query_idx: Vec<usize> = perm[..query_count].to_vec();
    let mut gallery_idx: Vec<usize> = perm[query_count..].to_vec();
    let mut train_idx: Vec<usize> = {
        let mut pool = gallery_idx.clone();
        pool.shuffle(&mut rng);
        pool.truncate(train_count);
        pool
    };
    query_idx.sort_unstable();
    gallery_idx.sort_unstable();
    train_idx.sort_unstable();

    Ok(DatasetBundle {
        train: dataset.subset(&train_idx, Split::Train)?,
        query: dataset.subset(&query_idx, Split::Query)?,
        gallery: dataset.subset(&gallery_idx, Split::Gallery)?,
    })
}
