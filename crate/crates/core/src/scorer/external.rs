//! Scorer backed by tensors written by an outside model.

use std::path::{Path, PathBuf};

use super::{tensor_file, SampleKey, Scorer, TrainReport};
use crate::augmentation::AugmentationSpec;
use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::uncertainty::McProbTensor;

/// Looks up `<dir>/step<kkk>/<split>_<id>.mcpt` for each request. Training is
/// done elsewhere, so `train` and `reset` only keep the step bookkeeping.
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    dir: PathBuf,
    classes: usize,
    step: usize,
}

impl ExternalScorer {
    pub fn new(dir: impl Into<PathBuf>, classes: usize) -> Self {
        Self {
            dir: dir.into(),
            classes,
            step: 0,
        }
    }

    pub fn tensor_path(dir: &Path, step: usize, key: SampleKey) -> PathBuf {
        dir.join(format!("step{step:03}"))
            .join(format!("{}_{:06}.mcpt", key.split.name(), key.id))
    }
}

impl Scorer for ExternalScorer {
    fn classes(&self) -> usize {
        self.classes
    }

    fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    fn reset(&mut self) {}

    fn train(&mut self, _labeled: &[(usize, &RangeImage)], _da: &[AugmentationSpec]) -> Result<TrainReport> {
        Ok(TrainReport::default())
    }

    fn predict_mc(&self, img: &RangeImage, key: SampleKey, _iterations: usize) -> Result<McProbTensor> {
        let path = Self::tensor_path(&self.dir, self.step, key);
        let t = tensor_file::load_external_tensor(&path)?;
        if t.width != img.width || t.height != img.height || t.classes != self.classes {
            return Err(Error::MalformedTensor(format!(
                "{}: tensor is {}x{}x{} but the image is {}x{} with {} classes",
                path.display(),
                t.width,
                t.height,
                t.classes,
                img.width,
                img.height,
                self.classes
            )));
        }
        Ok(t)
    }
}
