//! Segmentation and labeling-efficiency metrics.

use crate::dataset_io::{ClassId, IGNORE};
use crate::error::{Error, Result};
use crate::uncertainty::{bald_map, variance_map, HeuristicKind, McProbTensor};

/// Rows are target classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    fn check(&self, id: ClassId) -> Result<usize> {
        if (id as usize) < self.classes {
            Ok(id as usize)
        } else {
            Err(Error::BadClassId {
                id,
                classes: self.classes,
            })
        }
    }

    /// Adds one valid pixel. `IGNORE` targets are skipped.
    pub fn record(&mut self, target: ClassId, pred: ClassId) -> Result<()> {
        if target == IGNORE {
            return Ok(());
        }
        let (t, p) = (self.check(target)?, self.check(pred)?);
        self.counts[t * self.classes + p] += 1;
        Ok(())
    }

    /// Element-wise sum; used to combine shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes that never occur in target or prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &[ClassId], target: &[ClassId], valid: &[bool], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::BadParam(format!(
            "shape mismatch: {} predictions, {} targets, {} mask entries",
            pred.len(),
            target.len(),
            valid.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes);
    for ((&p, &t), &ok) in pred.iter().zip(target).zip(valid) {
        if ok {
            m.record(t, p)?;
        }
    }
    Ok(m)
}

/// Mean IoU over the classes with a non-empty union.
pub fn mean_iou(m: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = m.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// mIoU as a function of the number of labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    points: Vec<(usize, f64)>,
}

impl LearningCurve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::BadParam("learning curve sample counts must strictly increase".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn max_miou(&self) -> Option<f64> {
        self.points.iter().map(|p| p.1).reduce(f64::max)
    }

    /// Labeled-sample count at which the curve first reaches `level`,
    /// interpolating linearly from the preceding point.
    pub fn samples_to_reach(&self, level: f64) -> Result<f64> {
        let k = self
            .points
            .iter()
            .position(|&(_, m)| m >= level)
            .ok_or(Error::LevelUnreachable(level))?;
        let (n1, m1) = self.points[k];
        if k == 0 {
            return Ok(n1 as f64);
        }
        let (n0, m0) = self.points[k - 1];
        let frac = (level - m0) / (m1 - m0);
        Ok(n0 as f64 + frac * (n1 - n0) as f64)
    }
}

/// `n_baseline(a) / n_other(a)`: above 1 when `other` needs fewer labels.
pub fn labeling_efficiency(baseline: &LearningCurve, other: &LearningCurve, level: f64) -> Result<f64> {
    let nb = baseline.samples_to_reach(level)?;
    let no = other.samples_to_reach(level)?;
    if no <= 0.0 {
        return Err(Error::BadParam("curve reaches the level with zero samples".into()));
    }
    Ok(nb / no)
}

/// Mean of the variance or BALD pixel map over every valid pixel of every tensor.
pub fn mean_uncertainty_over_set(tensors: &[McProbTensor], kind: HeuristicKind) -> Result<f64> {
    if tensors.is_empty() {
        return Err(Error::BadParam("no tensors given".into()));
    }
    let map = match kind {
        HeuristicKind::Variance => variance_map,
        HeuristicKind::Bald => bald_map,
        other => return Err(Error::BadParam(format!("{other} is not a stability metric"))),
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for t in tensors {
        for s in map(t).valid_scores() {
            sum += s;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
