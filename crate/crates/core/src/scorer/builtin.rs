//! Per-pixel multinomial logistic model with dropout on its input features.
//!
//! Each pixel is described by its four channels plus the mean and variance of
//! range over its 3x3 valid neighbourhood. Dropout stays active at inference
//! to produce MC samples.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::{argmax, SampleKey, Scorer, ScorerConfig, TrainReport};
use crate::augmentation::{compose, AugmentationSpec};
use crate::dataset_io::{ClassId, IGNORE};
use crate::error::{Error, Result};
use crate::metrics::{mean_iou, ConfusionMatrix};
use crate::projection::RangeImage;
use crate::rng::RngStream;
use crate::uncertainty::McProbTensor;

pub const FEATURES: usize = 6;
// Features are centred on typical street-scene values, so a dropped feature
// reads as "typical" rather than as an extreme. Distances enter on a log
// scale so that far returns do not dominate the logits.
const XY_SCALE: f64 = 10.0;
const RANGE_CENTRE: f64 = 10.0;
const REMISSION_CENTRE: f64 = 0.5;
const REMISSION_SCALE: f64 = 0.25;
const LOG_VAR_CENTRE: f64 = 0.5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RALM";
const CHECKPOINT_VERSION: u32 = 1;

const SALT_INIT: u64 = 0x1A17;
const SALT_TRAIN: u64 = 0x7EA1;
const SALT_AUGMENT: u64 = 0xDA7A;
const SALT_MC: u64 = 0x3C3C;

/// Feature vector of pixel `i`; meaningful only for valid pixels.
pub fn pixel_features(img: &RangeImage, i: usize) -> [f64; FEATURES] {
    let (u, v) = (i % img.width, i / img.width);
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for dv in -1isize..=1 {
        let vv = v as isize + dv;
        if vv < 0 || vv >= img.height as isize {
            continue;
        }
        for du in -1isize..=1 {
            let uu = u as isize + du;
            if uu < 0 || uu >= img.width as isize {
                continue;
            }
            let j = vv as usize * img.width + uu as usize;
            if img.valid[j] {
                let r = img.range[j] as f64;
                n += 1.0;
                sum += r;
                sq += r * r;
            }
        }
    }
    let (mean, var) = if n > 0.0 {
        let m = sum / n;
        (m, (sq / n - m * m).max(0.0))
    } else {
        (0.0, 0.0)
    };
    [
        (img.x[i] as f64 / XY_SCALE).asinh(),
        (img.y[i] as f64 / XY_SCALE).asinh(),
        (img.range[i] as f64 / RANGE_CENTRE).ln(),
        (img.remission[i] as f64 - REMISSION_CENTRE) / REMISSION_SCALE,
        (mean / RANGE_CENTRE).ln(),
        var.ln_1p() - LOG_VAR_CENTRE,
    ]
}

/// Model inputs after dropout, with their targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelBatch {
    pub inputs: Vec<[f64; FEATURES]>,
    pub labels: Vec<ClassId>,
}

struct Dropout {
    drop_threshold: u64,
    scale: f64,
}

impl Dropout {
    fn new(rate: f64) -> Self {
        Self {
            drop_threshold: (rate * (1u64 << 32) as f64) as u64,
            scale: 1.0 / (1.0 - rate),
        }
    }

    #[inline]
    fn apply<R: RngCore + ?Sized>(&self, f: &[f64; FEATURES], rng: &mut R) -> [f64; FEATURES] {
        let mut out = [0.0; FEATURES];
        for (o, &x) in out.iter_mut().zip(f) {
            if (rng.next_u32() as u64) >= self.drop_threshold {
                *o = x * self.scale;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinScorer {
    classes: usize,
    config: ScorerConfig,
    seed: u64,
    step: usize,
    /// Row-major `classes x (FEATURES + 1)`; the last column is the bias.
    weights: Vec<f64>,
}

impl BuiltinScorer {
    pub fn new(classes: usize, config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut s = Self {
            classes,
            config,
            seed,
            step: 0,
            weights: Vec::new(),
        };
        s.reset();
        Ok(s)
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.classes * (FEATURES + 1) || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::BadParam("weight vector has the wrong size or non-finite entries".into()));
        }
        self.weights = weights;
        Ok(())
    }

    fn stream_seed(&self, salt: u64) -> u64 {
        RngStream::new(self.seed, self.step as u64, salt).rng().next_u64()
    }

    #[inline]
    fn logits(&self, x: &[f64; FEATURES], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * (FEATURES + 1)..(c + 1) * (FEATURES + 1)];
            let mut z = row[FEATURES];
            for f in 0..FEATURES {
                z += row[f] * x[f];
            }
            *o = z;
        }
    }

    /// In-place softmax; returns `log(sum(exp(z)))`.
    #[inline]
    fn softmax(z: &mut [f64]) -> f64 {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in z.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    /// Mean cross-entropy over the batch plus `weight_decay / 2 * |W|^2`
    /// (biases excluded), and its gradient with respect to the weights.
    pub fn loss_and_grad(&self, batch: &PixelBatch) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        let mut z = vec![0.0; self.classes];
        let n = batch.inputs.len().max(1) as f64;
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            self.logits(x, &mut z);
            let target_logit = z[y as usize];
            let lse = Self::softmax(&mut z);
            loss += lse - target_logit;
            for c in 0..self.classes {
                let d = (z[c] - if c == y as usize { 1.0 } else { 0.0 }) / n;
                let row = &mut grad[c * (FEATURES + 1)..(c + 1) * (FEATURES + 1)];
                for f in 0..FEATURES {
                    row[f] += d * x[f];
                }
                row[FEATURES] += d;
            }
        }
        loss /= n;
        let lambda = self.config.train.weight_decay;
        for c in 0..self.classes {
            for f in 0..FEATURES {
                let k = c * (FEATURES + 1) + f;
                loss += 0.5 * lambda * self.weights[k] * self.weights[k];
                grad[k] += lambda * self.weights[k];
            }
        }
        (loss, grad)
    }

    /// Deterministic (dropout-free) class scores of one pixel.
    pub fn pixel_probabilities(&self, img: &RangeImage, i: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.classes];
        self.logits(&pixel_features(img, i), &mut z);
        Self::softmax(&mut z);
        z
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, self.classes as u32, FEATURES as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], config: ScorerConfig, seed: u64) -> Result<Self> {
        let bad = |m: &str| Error::MalformedTensor(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        if word(0) != CHECKPOINT_VERSION as usize || word(2) != FEATURES {
            return Err(bad("unsupported version or feature layout"));
        }
        let classes = word(1);
        if bytes.len() != 16 + classes * (FEATURES + 1) * 8 {
            return Err(bad("payload length does not match class count"));
        }
        let weights = bytes[16..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut s = Self::new(classes, config, seed)?;
        s.set_weights(weights)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path, config: ScorerConfig, seed: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes, config, seed)
    }
}

fn labeled_pixels(img: &RangeImage) -> Vec<usize> {
    (0..img.len())
        .filter(|&i| img.valid[i] && img.labels[i] != IGNORE)
        .collect()
}

impl Scorer for BuiltinScorer {
    fn classes(&self) -> usize {
        self.classes
    }

    fn checkpoint(&self) -> Option<Vec<u8>> {
        Some(self.to_bytes())
    }

    fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    fn reset(&mut self) {
        let mut rng = RngStream::new(self.seed, 0, 0).fork(SALT_INIT).rng();
        let init = Normal::new(0.0, 0.01).expect("valid normal");
        self.weights = (0..self.classes * (FEATURES + 1)).map(|_| init.sample(&mut rng)).collect();
    }

    fn train(&mut self, labeled: &[(usize, &RangeImage)], da: &[AugmentationSpec]) -> Result<TrainReport> {
        let cfg = self.config.train.clone();
        let support: Vec<Vec<usize>> = labeled.iter().map(|(_, img)| labeled_pixels(img)).collect();
        if support.iter().all(|s| s.is_empty()) {
            return Err(Error::NoSupervision);
        }
        for (_, img) in labeled {
            if let Some(&bad) = img.labels.iter().find(|&&l| l != IGNORE && l as usize >= self.classes) {
                return Err(Error::BadClassId {
                    id: bad,
                    classes: self.classes,
                });
            }
        }
        // only images with supervision take part in batches
        let usable: Vec<usize> = (0..labeled.len()).filter(|&k| !support[k].is_empty()).collect();
        let cached: Vec<Vec<[f64; FEATURES]>> = if da.is_empty() {
            labeled
                .iter()
                .zip(&support)
                .map(|((_, img), pix)| pix.iter().map(|&i| pixel_features(img, i)).collect())
                .collect()
        } else {
            Vec::new()
        };

        let dropout = Dropout::new(self.config.dropout_rate);
        let train_seed = self.stream_seed(SALT_TRAIN);
        let augment_seed = self.stream_seed(SALT_AUGMENT);
        let mut lr = cfg.learning_rate;
        let mut confusion = ConfusionMatrix::new(self.classes);
        let mut report = TrainReport::default();
        let mut best = f64::NEG_INFINITY;
        let mut best_at = 0usize;
        let mut batch = PixelBatch::default();
        // dropout-free copies of the inputs, scored for the train mIoU
        let mut clean: Vec<[f64; FEATURES]> = Vec::new();
        let mut z = vec![0.0; self.classes];

        for it in 0..cfg.max_iterations {
            let mut rng = RngStream::new(train_seed, 0, it as u64).rng();
            let picks: Vec<usize> = (0..cfg.batch_size)
                .map(|_| usable[rng.random_range(0..usable.len())])
                .collect();
            batch.inputs.clear();
            batch.labels.clear();
            clean.clear();
            for (slot, &k) in picks.iter().enumerate() {
                let (id, img) = labeled[k];
                let mut push = |feat: [f64; FEATURES], label: ClassId, rng: &mut dyn RngCore| {
                    batch.inputs.push(dropout.apply(&feat, rng));
                    batch.labels.push(label);
                    clean.push(feat);
                };
                if da.is_empty() {
                    let pix = &support[k];
                    if cfg.pixels_per_image == 0 {
                        for (p, &i) in pix.iter().enumerate() {
                            push(cached[k][p], img.labels[i], &mut rng);
                        }
                    } else {
                        for _ in 0..cfg.pixels_per_image {
                            let p = rng.random_range(0..pix.len());
                            push(cached[k][p], img.labels[pix[p]], &mut rng);
                        }
                    }
                } else {
                    let donor = labeled[picks[(slot + 1) % picks.len()]].1;
                    let stream = RngStream::new(augment_seed, id as u64, it as u64);
                    let aug = compose(da, img, Some(donor), &stream)?;
                    let pix = labeled_pixels(&aug);
                    if pix.is_empty() {
                        continue;
                    }
                    if cfg.pixels_per_image == 0 {
                        for &i in &pix {
                            push(pixel_features(&aug, i), aug.labels[i], &mut rng);
                        }
                    } else {
                        for _ in 0..cfg.pixels_per_image {
                            let i = pix[rng.random_range(0..pix.len())];
                            push(pixel_features(&aug, i), aug.labels[i], &mut rng);
                        }
                    }
                }
            }
            if !batch.inputs.is_empty() {
                for (x, &y) in clean.iter().zip(&batch.labels) {
                    self.logits(x, &mut z);
                    confusion.record(y, argmax(&z) as ClassId)?;
                }
                let (_, grad) = self.loss_and_grad(&batch);
                for (w, g) in self.weights.iter_mut().zip(&grad) {
                    *w -= lr * g;
                }
            }
            report.iterations = it + 1;

            if (it + 1) % cfg.eval_period == 0 {
                let miou = mean_iou(&confusion).unwrap_or(0.0);
                report.train_miou.push(miou);
                confusion = ConfusionMatrix::new(self.classes);
                lr *= cfg.lr_decay;
                if miou > best {
                    best = miou;
                    best_at = it + 1;
                } else if it + 1 - best_at >= cfg.patience * cfg.eval_period {
                    break;
                }
            }
        }
        if report.train_miou.is_empty() || report.iterations % cfg.eval_period != 0 {
            report.train_miou.push(mean_iou(&confusion).unwrap_or(0.0));
        }
        Ok(report)
    }

    fn predict_mc(&self, img: &RangeImage, key: SampleKey, iterations: usize) -> Result<McProbTensor> {
        if iterations == 0 {
            return Err(Error::BadParam("need at least one MC iteration".into()));
        }
        let (c_n, t_n) = (self.classes, iterations);
        let dropout = Dropout::new(self.config.dropout_rate);
        let seed = self.stream_seed(SALT_MC ^ key.split.salt());
        let mut rng = RngStream::new(seed, key.id as u64, 0).rng();
        let mut probs = vec![0f32; img.len() * c_n * t_n];
        let mut z = vec![0.0; c_n];
        for i in 0..img.len() {
            if !img.valid[i] {
                continue;
            }
            let f = pixel_features(img, i);
            let block = &mut probs[i * c_n * t_n..(i + 1) * c_n * t_n];
            for t in 0..t_n {
                self.logits(&dropout.apply(&f, &mut rng), &mut z);
                Self::softmax(&mut z);
                for c in 0..c_n {
                    block[c * t_n + t] = z[c] as f32;
                }
            }
        }
        Ok(McProbTensor {
            width: img.width,
            height: img.height,
            classes: c_n,
            iterations: t_n,
            probs,
            valid: img.valid.clone(),
        })
    }

    fn predict(&self, img: &RangeImage, _key: SampleKey, _iterations: usize) -> Result<Vec<ClassId>> {
        let mut z = vec![0.0; self.classes];
        Ok((0..img.len())
            .map(|i| {
                if img.valid[i] {
                    self.logits(&pixel_features(img, i), &mut z);
                    argmax(&z) as ClassId
                } else {
                    IGNORE
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::TrainConfig;

    fn config() -> ScorerConfig {
        ScorerConfig {
            mc_iterations: 4,
            train: TrainConfig {
                learning_rate: 0.5,
                max_iterations: 400,
                eval_period: 20,
                patience: 5,
                pixels_per_image: 64,
                batch_size: 4,
                ..TrainConfig::default()
            },
            ..ScorerConfig::default()
        }
    }

    /// Two classes split by remission.
    fn separable(w: usize, h: usize, phase: usize) -> RangeImage {
        let mut img = RangeImage::empty(w, h);
        for i in 0..w * h {
            let class = ((i + phase) / 3) % 2;
            img.valid[i] = true;
            img.range[i] = 10.0;
            img.x[i] = 10.0;
            img.remission[i] = if class == 0 { 0.1 } else { 0.9 };
            img.labels[i] = class as ClassId;
        }
        img
    }

    #[test]
    fn mc_slices_are_distributions() {
        let model = BuiltinScorer::new(3, config(), 1).unwrap();
        let img = separable(16, 4, 0);
        let t = model.predict_mc(&img, SampleKey::pool(0), 5).unwrap();
        t.validate().unwrap();
        assert_eq!(t, model.predict_mc(&img, SampleKey::pool(0), 5).unwrap());
    }

    #[test]
    fn learns_separable_classes() {
        let mut model = BuiltinScorer::new(2, config(), 3).unwrap();
        let imgs: Vec<RangeImage> = (0..4).map(|k| separable(32, 4, k)).collect();
        let labeled: Vec<(usize, &RangeImage)> = imgs.iter().enumerate().collect();
        let report = model.train(&labeled, &[]).unwrap();
        assert!(report.final_train_miou() > 0.9, "{report:?}");
        let pred = model.predict(&imgs[0], SampleKey::test(0), 1).unwrap();
        assert_eq!(pred, imgs[0].labels);
    }

    #[test]
    fn reset_restores_initial_weights() {
        let mut model = BuiltinScorer::new(2, config(), 3).unwrap();
        let fresh = model.weights().to_vec();
        let imgs = [separable(8, 2, 0)];
        let labeled: Vec<(usize, &RangeImage)> = imgs.iter().enumerate().collect();
        model.train(&labeled, &[]).unwrap();
        assert_ne!(model.weights(), fresh.as_slice());
        model.reset();
        assert_eq!(model.weights(), fresh.as_slice());
    }

    #[test]
    fn unsupervised_images_are_rejected() {
        let mut model = BuiltinScorer::new(2, config(), 3).unwrap();
        let mut img = separable(8, 2, 0);
        img.labels.fill(IGNORE);
        assert!(matches!(model.train(&[(0, &img)], &[]), Err(Error::NoSupervision)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = BuiltinScorer::new(4, config(), 9).unwrap();
        let back = BuiltinScorer::from_bytes(&model.to_bytes(), config(), 9).unwrap();
        assert_eq!(back.weights(), model.weights());
        assert!(BuiltinScorer::from_bytes(&model.to_bytes()[..20], config(), 9).is_err());
    }
}
