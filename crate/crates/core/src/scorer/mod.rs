//! Sources of MC probability tensors: the built-in MC-dropout pixel classifier
//! and precomputed tensors produced by an external network.

mod builtin;
mod external;
pub mod tensor_file;

pub use builtin::{pixel_features, BuiltinScorer, PixelBatch, FEATURES};
pub use external::ExternalScorer;
pub use tensor_file::{load_external_tensor, store_tensor};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationSpec;
use crate::dataset_io::ClassId;
use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::uncertainty::{mean_prediction, McProbTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    TrainMiou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied once per evaluation period.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_period: usize,
    pub patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    /// Labeled pixels sampled per image per iteration; 0 uses all of them.
    pub pixels_per_image: usize,
}

impl Default for TrainConfig {
    /// Full-scale schedule.
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_decay: 0.99,
            weight_decay: 1e-4,
            batch_size: 16,
            max_iterations: 100_000,
            eval_period: 500,
            patience: 15,
            early_stop_metric: EarlyStopMetric::TrainMiou,
            pixels_per_image: 0,
        }
    }
}

impl TrainConfig {
    /// Laptop-sized schedule used by the desk-scale preset. The linear
    /// built-in model tolerates a far larger step than a deep network.
    pub fn desk() -> Self {
        Self {
            learning_rate: 4.0,
            lr_decay: 0.8,
            max_iterations: 5000,
            eval_period: 100,
            patience: 10,
            pixels_per_image: 64,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    Builtin,
    /// Tensors read from `<dir>/step<k>/<split>_<id>.mcpt`.
    External { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub mc_iterations: usize,
    pub dropout_rate: f64,
    pub train: TrainConfig,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Builtin,
            mc_iterations: 20,
            dropout_rate: 0.2,
            train: TrainConfig::default(),
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::Config(format!("dropout rate {} outside (0,1)", self.dropout_rate)));
        }
        if self.mc_iterations == 0 {
            return Err(Error::Config("mc_iterations must be at least 1".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_period == 0 || !(t.learning_rate > 0.0) {
            return Err(Error::Config("batch size, evaluation period and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Which collection a scored image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Pool,
    Test,
    /// Test-time augmented copy of a pool sample.
    Augmented,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Pool => "pool",
            Split::Test => "test",
            Split::Augmented => "augmented",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Split::Pool => 1,
            Split::Test => 2,
            Split::Augmented => 3,
        }
    }
}

/// Identity of an image being scored; keys dropout streams and external files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub split: Split,
    pub id: usize,
}

impl SampleKey {
    pub fn pool(id: usize) -> Self {
        Self { split: Split::Pool, id }
    }

    pub fn test(id: usize) -> Self {
        Self { split: Split::Test, id }
    }

    pub fn augmented(id: usize) -> Self {
        Self {
            split: Split::Augmented,
            id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub iterations: usize,
    /// Train mIoU at each evaluation checkpoint.
    pub train_miou: Vec<f64>,
}

impl TrainReport {
    pub fn final_train_miou(&self) -> f64 {
        self.train_miou.last().copied().unwrap_or(f64::NAN)
    }
}

pub trait Scorer: Send + Sync {
    fn classes(&self) -> usize;

    /// Selects the AL step used to key random streams and external files.
    fn set_step(&mut self, step: usize);

    /// Restores the seeded initial weights.
    fn reset(&mut self);

    /// `labeled` pairs each image with its pool sample id.
    fn train(&mut self, labeled: &[(usize, &RangeImage)], da: &[AugmentationSpec]) -> Result<TrainReport>;

    fn predict_mc(&self, img: &RangeImage, key: SampleKey, iterations: usize) -> Result<McProbTensor>;

    /// Point prediction used for mIoU; defaults to the argmax of the MC mean.
    fn predict(&self, img: &RangeImage, key: SampleKey, iterations: usize) -> Result<Vec<ClassId>> {
        let t = self.predict_mc(img, key, iterations)?;
        let mean = mean_prediction(&t);
        Ok(mean
            .chunks_exact(t.classes)
            .map(|p| argmax(p) as ClassId)
            .collect())
    }

    /// Serialized trained state, for scorers that have one.
    fn checkpoint(&self) -> Option<Vec<u8>> {
        None
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}
