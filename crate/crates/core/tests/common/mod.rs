//! Independent scalar oracles and random generators shared by the
//! integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use range_al::dataset_io::ClassId;
use range_al::scorer::{BuiltinScorer, PixelBatch, ScorerConfig, FEATURES};
use range_al::uncertainty::McProbTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with Dirichlet-like random slices; some pixels invalid, some slices
/// sharply peaked, some exactly one-hot.
pub fn random_tensor(r: &mut impl Rng, w: usize, h: usize, c: usize, t: usize) -> McProbTensor {
    let mut probs = vec![0f32; w * h * c * t];
    let mut valid = vec![false; w * h];
    for px in 0..w * h {
        valid[px] = r.random::<f64>() > 0.1;
        let style = r.random_range(0..4);
        for it in 0..t {
            let mut v: Vec<f64> = (0..c)
                .map(|_| match style {
                    0 => r.random::<f64>(),
                    1 => r.random::<f64>().powi(6),
                    _ => -r.random::<f64>().max(1e-300).ln(),
                })
                .collect();
            if style == 3 && r.random::<bool>() {
                let k = r.random_range(0..c);
                v = (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect();
            }
            let s: f64 = v.iter().sum();
            if s <= 0.0 {
                v = vec![1.0 / c as f64; c];
            } else {
                v.iter_mut().for_each(|x| *x /= s);
            }
            for (k, p) in v.iter().enumerate() {
                probs[(px * c + k) * t + it] = *p as f32;
            }
        }
    }
    McProbTensor::new(w, h, c, t, probs, valid).expect("generated tensor is valid")
}

/// Probability of `class` at `pixel` in MC pass `pass`.
fn p(t: &McProbTensor, pixel: usize, class: usize, pass: usize) -> f64 {
    t.prob(pixel, class, pass) as f64
}

fn class_means(t: &McProbTensor, pixel: usize) -> Vec<f64> {
    (0..t.classes)
        .map(|k| {
            let mut s = 0.0;
            for pass in 0..t.iterations {
                s += p(t, pixel, k, pass);
            }
            s / t.iterations as f64
        })
        .collect()
}

fn shannon(v: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in v {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

pub fn oracle_entropy(t: &McProbTensor, pixel: usize) -> f64 {
    shannon(&class_means(t, pixel))
}

pub fn oracle_variance(t: &McProbTensor, pixel: usize) -> f64 {
    let means = class_means(t, pixel);
    let mut acc = 0.0;
    for (k, m) in means.iter().enumerate() {
        let mut s = 0.0;
        for pass in 0..t.iterations {
            let d = p(t, pixel, k, pass) - m;
            s += d * d;
        }
        acc += s / t.iterations as f64;
    }
    acc / t.classes as f64
}

/// Unclipped mutual information.
pub fn oracle_bald(t: &McProbTensor, pixel: usize) -> f64 {
    let mut expected = 0.0;
    for pass in 0..t.iterations {
        let slice: Vec<f64> = (0..t.classes).map(|k| p(t, pixel, k, pass)).collect();
        expected += shannon(&slice);
    }
    oracle_entropy(t, pixel) - expected / t.iterations as f64
}

pub fn oracle_certainty(t: &McProbTensor, pixel: usize) -> f64 {
    let mut lowest_peak = f64::INFINITY;
    for k in 0..t.classes {
        let mut peak = f64::NEG_INFINITY;
        for pass in 0..t.iterations {
            peak = peak.max(p(t, pixel, k, pass));
        }
        lowest_peak = lowest_peak.min(peak);
    }
    1.0 - lowest_peak
}

/// Pixel `(u, v)` straight from the projection formula, without clamping
/// shortcuts or shared helpers.
pub fn oracle_pixel(x: f64, y: f64, z: f64, fov_up_deg: f64, fov_down_deg: f64, w: usize, h: usize) -> (usize, usize) {
    let pi = std::f64::consts::PI;
    let up = fov_up_deg * pi / 180.0;
    let fov = (fov_up_deg.abs() + fov_down_deg.abs()) * pi / 180.0;
    let r = (x * x + y * y + z * z).sqrt();
    let mut yaw = y.atan2(x);
    if yaw == -pi {
        yaw = pi;
    }
    let pitch = (z / r).asin();
    let uf = (0.5 * (1.0 - yaw / pi) * w as f64).floor();
    let vf = ((1.0 - (pitch + up) / fov) * h as f64).floor();
    let u = if uf < 0.0 { 0 } else if uf > (w - 1) as f64 { w - 1 } else { uf as usize };
    let v = if vf < 0.0 { 0 } else if vf > (h - 1) as f64 { h - 1 } else { vf as usize };
    (u, v)
}

/// Mean IoU by counting pixels class by class; classes absent from both
/// prediction and target are skipped.
pub fn oracle_miou(pred: &[ClassId], target: &[ClassId], valid: &[bool], classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..classes as ClassId {
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..pred.len() {
            if !valid[i] || target[i] as usize >= classes {
                continue;
            }
            let a = pred[i] == c;
            let b = target[i] == c;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            n += 1;
        }
    }
    sum / n as f64
}

/// Scorer with random weights and a random labeled batch.
pub fn random_problem(seed: u64, classes: usize, n: usize) -> (BuiltinScorer, PixelBatch) {
    let mut r = rng(seed);
    let mut cfg = ScorerConfig::default();
    cfg.train.weight_decay = r.random_range(0.0..0.1);
    let mut s = BuiltinScorer::new(classes, cfg, seed).unwrap();
    let w: Vec<f64> = (0..classes * (FEATURES + 1)).map(|_| r.random_range(-1.0..1.0)).collect();
    s.set_weights(w).unwrap();
    let batch = PixelBatch {
        inputs: (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(-2.0..2.0)))
            .collect(),
        labels: (0..n).map(|_| r.random_range(0..classes as ClassId)).collect(),
    };
    (s, batch)
}

/// Largest component-wise relative error of the analytic gradient.
pub fn gradient_error(s: &BuiltinScorer, batch: &PixelBatch) -> f64 {
    let (_, grad) = s.loss_and_grad(batch);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..grad.len() {
        let mut probe = s.clone();
        let mut w = s.weights().to_vec();
        w[k] += h;
        probe.set_weights(w.clone()).unwrap();
        let plus = probe.loss_and_grad(batch).0;
        w[k] -= 2.0 * h;
        probe.set_weights(w).unwrap();
        let minus = probe.loss_and_grad(batch).0;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}
