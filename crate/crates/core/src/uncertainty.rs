//! Pixel-wise acquisition heuristics over Monte-Carlo probability tensors,
//! per-sample aggregation and batch selection.
//!
//! Every heuristic map is oriented so that a higher score means a more
//! informative pixel. Natural logarithms are used throughout.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::PixelScoreMap;
use crate::rng::RngStream;

/// Tolerance on per-slice probability sums.
pub const SUM_TOLERANCE: f64 = 1e-5;

/// Largest class count the heuristics accept.
pub const MAX_CLASSES: usize = 64;

/// Per-pixel class probabilities for `iterations` stochastic forward passes.
///
/// `probs` is row-major over `(v, u, class, iteration)`.
#[derive(Debug, Clone, PartialEq)]
pub struct McProbTensor {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub iterations: usize,
    pub probs: Vec<f32>,
    pub valid: Vec<bool>,
}

impl McProbTensor {
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        iterations: usize,
        probs: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let t = Self {
            width,
            height,
            classes,
            iterations,
            probs,
            valid,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedTensor(m));
        if self.iterations < 1 || self.classes < 2 || self.classes > MAX_CLASSES {
            return bad(format!(
                "need T >= 1 and 2 <= C <= {MAX_CLASSES}, got T={} C={}",
                self.iterations, self.classes
            ));
        }
        let pixels = self.width * self.height;
        if self.probs.len() != pixels * self.classes * self.iterations || self.valid.len() != pixels {
            return bad("buffer sizes do not match dimensions".into());
        }
        for i in (0..pixels).filter(|&i| self.valid[i]) {
            for t in 0..self.iterations {
                let mut sum = 0.0;
                for c in 0..self.classes {
                    let p = self.prob(i, c, t) as f64;
                    if !(0.0..=1.0 + SUM_TOLERANCE).contains(&p) {
                        return bad(format!("pixel {i}: probability {p} outside [0,1]"));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > SUM_TOLERANCE {
                    return bad(format!("pixel {i}, pass {t}: probabilities sum to {sum}"));
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn prob(&self, pixel: usize, class: usize, iteration: usize) -> f32 {
        self.probs[(pixel * self.classes + class) * self.iterations + iteration]
    }

    /// The `C x T` block of one pixel.
    #[inline]
    pub fn pixel_block(&self, pixel: usize) -> &[f32] {
        let n = self.classes * self.iterations;
        &self.probs[pixel * n..(pixel + 1) * n]
    }

    fn score_map(&self, f: impl Fn(&[f32]) -> f64) -> PixelScoreMap {
        let scores = (0..self.pixels())
            .map(|i| if self.valid[i] { f(self.pixel_block(i)) } else { 0.0 })
            .collect();
        PixelScoreMap {
            width: self.width,
            height: self.height,
            scores,
            valid: self.valid.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Random,
    Certainty,
    Entropy,
    Variance,
    Bald,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 5] = [
        HeuristicKind::Random,
        HeuristicKind::Certainty,
        HeuristicKind::Entropy,
        HeuristicKind::Variance,
        HeuristicKind::Bald,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            HeuristicKind::Random => "random",
            HeuristicKind::Certainty => "certainty",
            HeuristicKind::Entropy => "entropy",
            HeuristicKind::Variance => "variance",
            HeuristicKind::Bald => "bald",
        }
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeuristicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown heuristic `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub sample_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    /// Diagnostic only.
    Mean,
}

fn mean_of_block(block: &[f32], classes: usize, iterations: usize, out: &mut [f64]) {
    for (c, slot) in out.iter_mut().enumerate().take(classes) {
        let row = &block[c * iterations..(c + 1) * iterations];
        *slot = row.iter().map(|&p| p as f64).sum::<f64>() / iterations as f64;
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `W x H x C` consensus probabilities, row-major over `(v, u, class)`.
pub fn mean_prediction(t: &McProbTensor) -> Vec<f64> {
    let mut out = vec![0.0; t.pixels() * t.classes];
    for i in 0..t.pixels() {
        mean_of_block(
            t.pixel_block(i),
            t.classes,
            t.iterations,
            &mut out[i * t.classes..(i + 1) * t.classes],
        );
    }
    out
}

pub fn entropy_map(t: &McProbTensor) -> PixelScoreMap {
    let (c, it) = (t.classes, t.iterations);
    t.score_map(|block| {
        let mut mean = [0.0; MAX_CLASSES];
        mean_of_block(block, c, it, &mut mean[..c]);
        -mean[..c].iter().map(|&p| plogp(p)).sum::<f64>()
    })
}

/// `1 - min_c max_t p[c, t]`.
pub fn certainty_map(t: &McProbTensor) -> PixelScoreMap {
    let (c, it) = (t.classes, t.iterations);
    t.score_map(|block| {
        let certainty = (0..c)
            .map(|k| block[k * it..(k + 1) * it].iter().fold(f32::MIN, |a, &b| a.max(b)) as f64)
            .fold(f64::INFINITY, f64::min);
        1.0 - certainty
    })
}

/// Class-averaged population variance of the MC probabilities.
pub fn variance_map(t: &McProbTensor) -> PixelScoreMap {
    let (c, it) = (t.classes, t.iterations);
    t.score_map(|block| {
        let mut total = 0.0;
        for k in 0..c {
            let row = &block[k * it..(k + 1) * it];
            let mean = row.iter().map(|&p| p as f64).sum::<f64>() / it as f64;
            total += row.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / it as f64;
        }
        total / c as f64
    })
}

/// Mutual information between the prediction and the model parameters:
/// entropy of the mean minus the mean per-pass entropy, floored at zero.
pub fn bald_map(t: &McProbTensor) -> PixelScoreMap {
    let (c, it) = (t.classes, t.iterations);
    t.score_map(|block| {
        let mut mean = [0.0; MAX_CLASSES];
        mean_of_block(block, c, it, &mut mean[..c]);
        let predictive = -mean[..c].iter().map(|&p| plogp(p)).sum::<f64>();
        let mut expected = 0.0;
        for pass in 0..it {
            expected -= (0..c).map(|k| plogp(block[k * it + pass] as f64)).sum::<f64>();
        }
        (predictive - expected / it as f64).max(0.0)
    })
}

/// Pixel map for an uncertainty heuristic; `None` for [`HeuristicKind::Random`].
pub fn heuristic_map(t: &McProbTensor, kind: HeuristicKind) -> Option<PixelScoreMap> {
    match kind {
        HeuristicKind::Random => None,
        HeuristicKind::Certainty => Some(certainty_map(t)),
        HeuristicKind::Entropy => Some(entropy_map(t)),
        HeuristicKind::Variance => Some(variance_map(t)),
        HeuristicKind::Bald => Some(bald_map(t)),
    }
}

/// Reduces a pixel map to one score; invalid pixels never contribute.
pub fn aggregate(map: &PixelScoreMap, method: Aggregation) -> f64 {
    let (sum, n) = map
        .valid_scores()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    match method {
        Aggregation::Sum => sum,
        Aggregation::Mean if n == 0 => 0.0,
        Aggregation::Mean => sum / n as f64,
    }
}

/// Picks up to `budget` sample ids, best first.
///
/// Uncertainty heuristics take the highest scores with ties going to the
/// smaller id. `Random` draws uniformly from the stream, independent of the
/// order in which scores are supplied.
pub fn rank_and_select(
    scores: &[SampleScore],
    budget: usize,
    kind: HeuristicKind,
    rng: &RngStream,
) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    if budget == 0 {
        return Err(Error::BadParam("budget must be at least 1".into()));
    }
    let take = budget.min(scores.len());
    if kind == HeuristicKind::Random {
        let mut ids: Vec<usize> = scores.iter().map(|s| s.sample_id).collect();
        ids.sort_unstable();
        let (chosen, _) = ids.partial_shuffle(&mut rng.rng(), take);
        return Ok(chosen.to_vec());
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    Ok(ranked.into_iter().take(take).map(|s| s.sample_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// One pixel, slices given as class vectors.
    fn single_pixel(slices: &[&[f32]]) -> McProbTensor {
        let c = slices[0].len();
        let t = slices.len();
        let mut probs = vec![0.0; c * t];
        for (pass, s) in slices.iter().enumerate() {
            for (k, &p) in s.iter().enumerate() {
                probs[k * t + pass] = p;
            }
        }
        McProbTensor::new(1, 1, c, t, probs, vec![true]).unwrap()
    }

    #[test]
    fn mean_prediction_cases() {
        assert_eq!(mean_prediction(&single_pixel(&[&[0.7, 0.3]])), vec![0.7f32 as f64, 0.3f32 as f64]);
        assert_eq!(mean_prediction(&single_pixel(&[&[1.0, 0.0], &[0.0, 1.0]])), vec![0.5, 0.5]);
        let p: &[f32] = &[0.25, 0.5, 0.25];
        assert_eq!(mean_prediction(&single_pixel(&[p, p, p])), vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn entropy_cases() {
        let u: &[f32] = &[0.25; 4];
        assert_abs_diff_eq!(entropy_map(&single_pixel(&[u])).scores[0], 4f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy_map(&single_pixel(&[&[0.0, 1.0, 0.0]])).scores[0], 0.0);
        let disagree = single_pixel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(entropy_map(&disagree).scores[0], 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn certainty_cases() {
        let onehot = single_pixel(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(certainty_map(&onehot).scores[0], 1.0);
        let uniform: &[f32] = &[0.25; 4];
        assert_abs_diff_eq!(certainty_map(&single_pixel(&[uniform, uniform])).scores[0], 0.75);
        let single = single_pixel(&[&[0.7, 0.3]]);
        assert_abs_diff_eq!(certainty_map(&single).scores[0], 0.7, epsilon = 1e-7);
    }

    #[test]
    fn variance_cases() {
        let p: &[f32] = &[0.2, 0.8];
        assert_eq!(variance_map(&single_pixel(&[p, p])).scores[0], 0.0);
        let disagree = single_pixel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(variance_map(&disagree).scores[0], 0.25);
    }

    #[test]
    fn bald_cases() {
        let p: &[f32] = &[0.1, 0.6, 0.3];
        assert_eq!(bald_map(&single_pixel(&[p, p, p])).scores[0], 0.0);
        let disagree = single_pixel(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(bald_map(&disagree).scores[0], 2f64.ln(), epsilon = 1e-12);
        assert_eq!(bald_map(&single_pixel(&[&[0.4, 0.6]])).scores[0], 0.0);
    }

    #[test]
    fn invalid_pixels_score_zero() {
        let t = McProbTensor::new(2, 1, 2, 1, vec![0.5, 0.5, 7.0, -3.0], vec![true, false]).unwrap();
        for kind in [HeuristicKind::Entropy, HeuristicKind::Variance, HeuristicKind::Bald, HeuristicKind::Certainty] {
            let m = heuristic_map(&t, kind).unwrap();
            assert_eq!(m.scores[1], 0.0);
            assert!(!m.valid[1]);
        }
    }

    #[test]
    fn tensor_validation() {
        assert!(McProbTensor::new(1, 1, 2, 1, vec![0.5, 0.6], vec![true]).is_err());
        assert!(McProbTensor::new(1, 1, 1, 1, vec![1.0], vec![true]).is_err());
        assert!(McProbTensor::new(1, 1, 2, 0, vec![], vec![true]).is_err());
        assert!(McProbTensor::new(1, 1, 2, 1, vec![0.5], vec![true]).is_err());
    }

    fn map(scores: &[f64], valid: &[bool]) -> PixelScoreMap {
        PixelScoreMap {
            width: scores.len(),
            height: 1,
            scores: scores.to_vec(),
            valid: valid.to_vec(),
        }
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate(&map(&[1.0, 2.0], &[false, false]), Aggregation::Sum), 0.0);
        assert_abs_diff_eq!(
            aggregate(&map(&[0.1, 0.1, 0.1, 5.0], &[true, true, true, false]), Aggregation::Sum),
            0.3,
            epsilon = 1e-15
        );
        let m = map(&[0.3, 1.7, 0.2], &[true, true, false]);
        let doubled = map(&[0.6, 3.4, 0.4], &[true, true, false]);
        assert_eq!(aggregate(&doubled, Aggregation::Sum), 2.0 * aggregate(&m, Aggregation::Sum));
        assert_eq!(aggregate(&m, Aggregation::Mean), 1.0);
    }

    fn scores(vals: &[f64]) -> Vec<SampleScore> {
        vals.iter()
            .enumerate()
            .map(|(sample_id, &score)| SampleScore { sample_id, score })
            .collect()
    }

    #[test]
    fn selection() {
        let rng = RngStream::new(1, 0, 0);
        assert_eq!(rank_and_select(&scores(&[5.0, 1.0, 9.0]), 2, HeuristicKind::Bald, &rng).unwrap(), vec![2, 0]);
        assert_eq!(rank_and_select(&scores(&[3.0; 5]), 2, HeuristicKind::Entropy, &rng).unwrap(), vec![0, 1]);
        assert_eq!(rank_and_select(&scores(&[1.0, 2.0]), 10, HeuristicKind::Variance, &rng).unwrap(), vec![1, 0]);
        assert!(matches!(rank_and_select(&[], 2, HeuristicKind::Bald, &rng), Err(Error::EmptyPool)));

        let pool = scores(&[0.0; 50]);
        let a = rank_and_select(&pool, 5, HeuristicKind::Random, &rng).unwrap();
        let mut reversed = pool.clone();
        reversed.reverse();
        assert_eq!(a, rank_and_select(&reversed, 5, HeuristicKind::Random, &rng).unwrap());
        assert_ne!(a, rank_and_select(&pool, 5, HeuristicKind::Random, &RngStream::new(2, 0, 0)).unwrap());
    }

    #[test]
    fn heuristic_names_parse() {
        for k in HeuristicKind::ALL {
            assert_eq!(k.name().parse::<HeuristicKind>().unwrap(), k);
        }
        assert_eq!("BALD".parse::<HeuristicKind>().unwrap(), HeuristicKind::Bald);
        assert!("margin".parse::<HeuristicKind>().is_err());
    }
}
