//! Procedural latent-factor image datasets.
//!
//! A [`LatentFactorSpec`] declares independent generative factors and their
//! value grids; every grid combination renders to one image and every factor
//! doubles as a classification task whose label is that factor's index.
//! Splits are deterministic functions of (seed, ratio, spec).

mod export;
mod render;

pub use export::{export_dataset, import_dataset};
pub use render::render_image;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KfError, Result};
use crate::exec;

/// One generative factor: a name and its ordered value grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub values: Vec<f64>,
}

impl Factor {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Declarative description of a latent-factor image dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactorSpec {
    pub factors: Vec<Factor>,
    /// (height, width).
    pub image_size: (usize, usize),
    /// 1 (grayscale) or 3 (rgb).
    pub channels: usize,
}

impl LatentFactorSpec {
    pub fn new(factors: Vec<Factor>, image_size: (usize, usize), channels: usize) -> Result<Self> {
        let spec = Self { factors, image_size, channels };
        spec.validate()?;
        Ok(spec)
    }

    /// Sprite dataset over 2-D shapes: shape, scale, orientation and the two
    /// positions (3 x 6 x 40 x 32 x 32 = 737,280 combinations).
    pub fn dsprites() -> Self {
        Self {
            factors: vec![
                Factor::new("shape", vec![0.0, 1.0, 2.0]),
                Factor::new("scale", linspace(0.5, 1.0, 6)),
                Factor::new("orientation", linspace(0.0, std::f64::consts::TAU, 40)),
                Factor::new("pos_x", linspace(0.0, 1.0, 32)),
                Factor::new("pos_y", linspace(0.0, 1.0, 32)),
            ],
            image_size: (64, 64),
            channels: 1,
        }
    }

    /// Colored-patch scene dataset: floor/wall/object hues, scale, shape and
    /// orientation (10 x 10 x 10 x 8 x 4 x 15 = 480,000 combinations).
    pub fn shape3d() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            factors: vec![
                Factor::new("floor_hue", linspace(0.0, 1.0, 10)),
                Factor::new("wall_hue", linspace(0.0, 1.0, 10)),
                Factor::new("object_hue", linspace(0.0, 1.0, 10)),
                Factor::new("scale", linspace(0.0, 1.0, 8)),
                Factor::new("shape", vec![0.0, 1.0, 2.0, 3.0]),
                Factor::new("orientation", linspace(-30.0 * deg, 30.0 * deg, 15)),
            ],
            image_size: (64, 64),
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(KfError::invalid("spec needs at least one factor"));
        }
        for f in &self.factors {
            if f.cardinality() < 2 {
                return Err(KfError::invalid(format!(
                    "factor '{}' needs at least 2 values",
                    f.name
                )));
            }
        }
        let mut names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.factors.len() {
            return Err(KfError::invalid("factor names must be unique"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(KfError::invalid("channels must be 1 or 3"));
        }
        let (h, w) = self.image_size;
        if h < 2 || w < 2 {
            return Err(KfError::invalid("image_size must be at least 2x2"));
        }
        Ok(())
    }

    /// Total grid size = product of per-factor cardinalities.
    pub fn grid_size(&self) -> usize {
        self.factors.iter().map(Factor::cardinality).product()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(Factor::cardinality).collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.factors.len()
    }

    /// (channels, height, width) of one rendered sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.image_size.0, self.image_size.1)
    }

    fn check_index(&self, latent_index: &[usize]) -> Result<()> {
        if latent_index.len() != self.factors.len() {
            return Err(KfError::invalid(format!(
                "index has {} entries, spec has {} factors",
                latent_index.len(),
                self.factors.len()
            )));
        }
        for (f, &i) in self.factors.iter().zip(latent_index) {
            if i >= f.cardinality() {
                return Err(KfError::invalid(format!(
                    "index {i} out of range for factor '{}' ({} values)",
                    f.name,
                    f.cardinality()
                )));
            }
        }
        Ok(())
    }

    /// Decode a flat row-major grid position into per-factor indices.
    fn decode(&self, mut flat: usize) -> Vec<usize> {
        let cards = self.cardinalities();
        let mut idx = vec![0; cards.len()];
        for (slot, &card) in idx.iter_mut().zip(&cards).rev() {
            *slot = flat % card;
            flat /= card;
        }
        idx
    }
}

/// One rendered, labeled sample.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// (channels, height, width), values in [0, 1].
    pub image: Array3<f64>,
    pub latent_index: Vec<usize>,
    /// One classification label per factor: the factor's index.
    pub task_labels: Vec<usize>,
}

/// Deterministic train/test partition of a sample set.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
    pub ratio: f64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Enumerate the latent grid: every combination exactly once, or a seeded
/// uniform subsample without replacement.
pub fn build_latent_grid(
    spec: &LatentFactorSpec,
    subsample: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let total = spec.grid_size();
    match subsample {
        None => Ok((0..total).map(|flat| spec.decode(flat)).collect()),
        Some(count) => {
            if count > total {
                return Err(KfError::invalid(format!(
                    "subsample {count} exceeds grid size {total}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(|flat| spec.decode(flat)).collect())
        }
    }
}

/// Labels for one grid cell: each factor is a K-way task labeled by its own
/// index.
pub fn derive_task_labels(latent_index: &[usize], spec: &LatentFactorSpec) -> Result<Vec<usize>> {
    spec.check_index(latent_index)?;
    Ok(latent_index.to_vec())
}

/// Render one grid cell into a labeled sample. Pure in (spec, latent_index).
pub fn render_sample(spec: &LatentFactorSpec, latent_index: &[usize]) -> Result<LabeledSample> {
    spec.check_index(latent_index)?;
    let image = render_image(spec, latent_index);
    Ok(LabeledSample {
        image,
        task_labels: latent_index.to_vec(),
        latent_index: latent_index.to_vec(),
    })
}

/// Render a whole grid of samples (data-parallel over cells).
pub fn render_all(spec: &LatentFactorSpec, grid: &[Vec<usize>]) -> Result<Vec<LabeledSample>> {
    for idx in grid {
        spec.check_index(idx)?;
    }
    Ok(exec::map_slice(grid, |idx| LabeledSample {
        image: render_image(spec, idx),
        task_labels: idx.clone(),
        latent_index: idx.clone(),
    }))
}

/// Shuffle-split samples into round(ratio * N) train and the rest test.
/// Identical (seed, ratio, input order) yields identical membership.
pub fn split_dataset(samples: Vec<LabeledSample>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if samples.is_empty() {
        return Err(KfError::invalid("split_dataset: empty input"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(KfError::invalid(format!("ratio must be in (0, 1), got {ratio}")));
    }
    let n = samples.len();
    let n_train = ((ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut slots: Vec<Option<LabeledSample>> = samples.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (rank, &i) in order.iter().enumerate() {
        let s = slots[i].take().expect("each slot taken once");
        if rank < n_train {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok(DatasetSplit { train, test, seed, ratio })
}

/// Grid -> render -> split in one call.
pub fn generate_split(
    spec: &LatentFactorSpec,
    subsample: Option<usize>,
    seed: u64,
    ratio: f64,
) -> Result<DatasetSplit> {
    let grid = build_latent_grid(spec, subsample, seed)?;
    let samples = render_all(spec, &grid)?;
    split_dataset(samples, ratio, seed)
}
