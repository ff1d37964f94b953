//! Seeded range-image augmentations.
//!
//! Masking transforms invalidate pixels in every plane at once, so the image
//! and its target always agree on which pixels exist. All randomness comes
//! from an explicit generator; the same generator state gives the same output.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset_io::ClassId;
use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::rng::RngStream;

/// Whether Gaussian noise parameters are variances or standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    #[default]
    Variance,
    StdDev,
}

impl NoiseScale {
    fn std_dev(self, value: f64) -> f64 {
        match self {
            NoiseScale::Variance => value.sqrt(),
            NoiseScale::StdDev => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    RandomDropoutMask {
        p_min: f64,
        p_max: f64,
    },
    CoarseDropout(CoarseDropoutParams),
    GaussianDepthNoise {
        var_min: f64,
        var_max: f64,
        #[serde(default)]
        scale: NoiseScale,
    },
    GaussianRemissionNoise {
        var_min: f64,
        var_max: f64,
        #[serde(default)]
        scale: NoiseScale,
    },
    CyclicShift {
        max_degrees: f64,
    },
    InstanceCutPaste {
        classes: Vec<ClassId>,
        /// Chance that each eligible source instance is pasted.
        #[serde(default = "half")]
        instance_probability: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseDropoutParams {
    pub min_holes: usize,
    pub max_holes: usize,
    pub min_height: usize,
    pub max_height: usize,
    pub min_width: usize,
    pub max_width: usize,
}

impl Default for CoarseDropoutParams {
    fn default() -> Self {
        Self {
            min_holes: 2,
            max_holes: 5,
            min_height: 1,
            max_height: 16,
            min_width: 1,
            max_width: 64,
        }
    }
}

impl CoarseDropoutParams {
    /// Rescales hole sizes from a 1024x64 image to `width x height`.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / 1024.0;
        let sy = height as f64 / 64.0;
        let scale = |v: usize, s: f64| ((v as f64 * s).round() as usize).max(1);
        let max_height = scale(self.max_height, sy);
        let max_width = scale(self.max_width, sx);
        Self {
            min_height: self.min_height.min(max_height),
            max_height,
            min_width: self.min_width.min(max_width),
            max_width,
            ..*self
        }
    }
}

impl Augmentation {
    pub fn random_dropout_mask() -> Self {
        Augmentation::RandomDropoutMask { p_min: 0.1, p_max: 0.5 }
    }

    pub fn coarse_dropout() -> Self {
        Augmentation::CoarseDropout(CoarseDropoutParams::default())
    }

    pub fn gaussian_depth_noise() -> Self {
        Augmentation::GaussianDepthNoise {
            var_min: 0.05,
            var_max: 0.1,
            scale: NoiseScale::Variance,
        }
    }

    pub fn gaussian_remission_noise() -> Self {
        Augmentation::GaussianRemissionNoise {
            var_min: 0.5,
            var_max: 1.0,
            scale: NoiseScale::Variance,
        }
    }

    pub fn cyclic_shift() -> Self {
        Augmentation::CyclicShift { max_degrees: 22.5 }
    }

    pub fn instance_cut_paste(classes: Vec<ClassId>) -> Self {
        Augmentation::InstanceCutPaste {
            classes,
            instance_probability: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::RandomDropoutMask { .. } => "random_dropout_mask",
            Augmentation::CoarseDropout(_) => "coarse_dropout",
            Augmentation::GaussianDepthNoise { .. } => "gaussian_depth_noise",
            Augmentation::GaussianRemissionNoise { .. } => "gaussian_remission_noise",
            Augmentation::CyclicShift { .. } => "cyclic_shift",
            Augmentation::InstanceCutPaste { .. } => "instance_cut_paste",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |lo: f64, hi: f64, what: &str| {
            if lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::BadParam(format!("{what}: bad range [{lo}, {hi}]")))
            }
        };
        match self {
            Augmentation::RandomDropoutMask { p_min, p_max } => {
                range(*p_min, *p_max, "dropout probability")?;
                if *p_max > 1.0 {
                    return Err(Error::BadParam(format!("dropout probability {p_max} > 1")));
                }
            }
            Augmentation::CoarseDropout(c) => {
                if c.min_holes > c.max_holes || c.min_height > c.max_height || c.min_width > c.max_width {
                    return Err(Error::BadParam(format!("coarse dropout: min above max in {c:?}")));
                }
            }
            Augmentation::GaussianDepthNoise { var_min, var_max, .. } => range(*var_min, *var_max, "depth noise")?,
            Augmentation::GaussianRemissionNoise { var_min, var_max, .. } => {
                range(*var_min, *var_max, "remission noise")?
            }
            Augmentation::CyclicShift { max_degrees } => range(0.0, *max_degrees, "cyclic shift")?,
            Augmentation::InstanceCutPaste {
                instance_probability, ..
            } => range(*instance_probability, 1.0, "instance probability")?,
        }
        Ok(())
    }

    /// Draws parameters from `rng` and applies the transform.
    pub fn apply(&self, img: &RangeImage, donor: Option<&RangeImage>, rng: &mut impl Rng) -> Result<RangeImage> {
        let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        match self {
            Augmentation::RandomDropoutMask { p_min, p_max } => {
                let p = uniform(rng, *p_min, *p_max);
                random_dropout_mask(img, p, rng)
            }
            Augmentation::CoarseDropout(params) => Ok(coarse_dropout(img, params, rng).0),
            Augmentation::GaussianDepthNoise { var_min, var_max, scale } => {
                let sd = scale.std_dev(uniform(rng, *var_min, *var_max));
                Ok(gaussian_depth_noise(img, sd * sd, rng))
            }
            Augmentation::GaussianRemissionNoise { var_min, var_max, scale } => {
                let sd = scale.std_dev(uniform(rng, *var_min, *var_max));
                Ok(gaussian_remission_noise(img, sd * sd, rng))
            }
            Augmentation::CyclicShift { max_degrees } => {
                let angle = uniform(rng, -max_degrees, *max_degrees);
                Ok(cyclic_shift(img, angle))
            }
            Augmentation::InstanceCutPaste {
                classes,
                instance_probability,
            } => match donor {
                Some(src) => instance_cut_paste(img, src, classes, *instance_probability, rng),
                None => Ok(img.clone()),
            },
        }
    }
}

/// One transform of a pipeline with its per-sample application chance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub transform: Augmentation,
    pub probability: f64,
}

impl AugmentationSpec {
    pub fn new(transform: Augmentation, probability: f64) -> Self {
        Self { transform, probability }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::BadParam(format!(
                "{}: application probability {} outside [0,1]",
                self.transform.name(),
                self.probability
            )));
        }
        self.transform.validate()
    }
}

/// Drops every valid pixel independently with probability `p`.
pub fn random_dropout_mask(img: &RangeImage, p: f64, rng: &mut impl Rng) -> Result<RangeImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::BadParam(format!("dropout probability {p} outside [0,1]")));
    }
    let mut out = img.clone();
    if p == 0.0 {
        return Ok(out);
    }
    for i in 0..out.len() {
        if rng.random::<f64>() < p && out.valid[i] {
            out.invalidate(i);
        }
    }
    Ok(out)
}

/// Axis-aligned rectangle `[u0, u0 + width) x [v0, v0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hole {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl Hole {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        (self.u0..self.u0 + self.width).contains(&u) && (self.v0..self.v0 + self.height).contains(&v)
    }
}

/// Masks out between `min_holes` and `max_holes` rectangles; returns them alongside.
pub fn coarse_dropout(img: &RangeImage, params: &CoarseDropoutParams, rng: &mut impl Rng) -> (RangeImage, Vec<Hole>) {
    let mut out = img.clone();
    let holes = rng.random_range(params.min_holes..=params.max_holes);
    let mut rects = Vec::with_capacity(holes);
    if out.is_empty() {
        return (out, rects);
    }
    for _ in 0..holes {
        let height = rng.random_range(params.min_height..=params.max_height).clamp(1, out.height);
        let width = rng.random_range(params.min_width..=params.max_width).clamp(1, out.width);
        let v0 = rng.random_range(0..=out.height - height);
        let u0 = rng.random_range(0..=out.width - width);
        for v in v0..v0 + height {
            for u in u0..u0 + width {
                let i = out.idx(u, v);
                out.invalidate(i);
            }
        }
        rects.push(Hole { u0, v0, width, height });
    }
    (out, rects)
}

/// Adds `N(0, variance)` to the range of every valid pixel, keeping it positive.
/// The x/y channels are left as they were.
pub fn gaussian_depth_noise(img: &RangeImage, variance: f64, rng: &mut impl Rng) -> RangeImage {
    let mut out = img.clone();
    if variance <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, variance.sqrt()).expect("finite std dev");
    for i in 0..out.len() {
        if out.valid[i] {
            let r = out.range[i] as f64 + noise.sample(rng);
            out.range[i] = r.max(1e-3) as f32;
        }
    }
    out
}

/// Adds `N(0, variance)` to the remission of every valid pixel, clamped to `[0, 1]`.
pub fn gaussian_remission_noise(img: &RangeImage, variance: f64, rng: &mut impl Rng) -> RangeImage {
    let mut out = img.clone();
    if variance <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, variance.sqrt()).expect("finite std dev");
    for i in 0..out.len() {
        if out.valid[i] {
            out.remission[i] = (out.remission[i] as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Column offset equivalent to an azimuth rotation of `angle_deg`.
pub fn shift_columns(angle_deg: f64, width: usize) -> isize {
    (angle_deg / 360.0 * width as f64).round() as isize
}

/// Rolls every plane horizontally as if the scene were rotated by `angle_deg`
/// about the vertical axis (counter-clockwise seen from above).
///
/// A counter-clockwise rotation increases azimuth, which moves content towards
/// column 0, so content moves by `-shift_columns(angle)` columns.
pub fn cyclic_shift(img: &RangeImage, angle_deg: f64) -> RangeImage {
    let k = shift_columns(angle_deg, img.width);
    roll_columns(img, -k)
}

/// Moves pixel `(u, v)` to `((u + k) mod W, v)` in every plane.
pub fn roll_columns(img: &RangeImage, k: isize) -> RangeImage {
    let w = img.width;
    if w == 0 || k.rem_euclid(w as isize) == 0 {
        return img.clone();
    }
    let k = k.rem_euclid(w as isize) as usize;
    fn roll<T: Copy>(plane: &[T], w: usize, k: usize) -> Vec<T> {
        let mut out = plane.to_vec();
        for (src, dst) in plane.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            dst[k..].copy_from_slice(&src[..w - k]);
            dst[..k].copy_from_slice(&src[w - k..]);
        }
        out
    }
    RangeImage {
        width: w,
        height: img.height,
        x: roll(&img.x, w, k),
        y: roll(&img.y, w, k),
        range: roll(&img.range, w, k),
        remission: roll(&img.remission, w, k),
        labels: roll(&img.labels, w, k),
        valid: roll(&img.valid, w, k),
        point_index: roll(&img.point_index, w, k),
        instances: img.instances.as_ref().map(|p| roll(p, w, k)),
    }
}

/// Pastes a random subset of `src` instances whose class is in `classes` into `dst`.
///
/// A pasted pixel replaces the destination only where the destination is
/// empty or farther away than the pasted point. Pasted pixels carry no point
/// index since they have no source point in `dst`'s cloud.
pub fn instance_cut_paste(
    dst: &RangeImage,
    src: &RangeImage,
    classes: &[ClassId],
    instance_probability: f64,
    rng: &mut impl Rng,
) -> Result<RangeImage> {
    let src_instances = src.instances.as_ref().ok_or(Error::MissingInstances)?;
    if (dst.width, dst.height) != (src.width, src.height) {
        return Err(Error::BadParam("cut-paste between images of different sizes".into()));
    }
    let mut out = dst.clone();
    if classes.is_empty() {
        return Ok(out);
    }
    let eligible: BTreeSet<(ClassId, u16)> = (0..src.len())
        .filter(|&j| src.valid[j] && src_instances[j] != 0 && classes.contains(&src.labels[j]))
        .map(|j| (src.labels[j], src_instances[j]))
        .collect();
    let chosen: BTreeSet<(ClassId, u16)> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < instance_probability)
        .collect();
    if chosen.is_empty() {
        return Ok(out);
    }
    if out.instances.is_none() {
        out.instances = Some(vec![0; out.len()]);
    }
    for j in 0..src.len() {
        if !src.valid[j] || !chosen.contains(&(src.labels[j], src_instances[j])) {
            continue;
        }
        if !out.valid[j] || out.range[j] > src.range[j] {
            out.copy_pixel_from(j, src, j);
            out.point_index[j] = None;
        }
    }
    Ok(out)
}

/// Applies `specs` in order, each gated by its probability.
///
/// Transform `k` draws from `stream.fork(k)`, so adding or removing a later
/// transform never changes what an earlier one does.
pub fn compose(
    specs: &[AugmentationSpec],
    img: &RangeImage,
    donor: Option<&RangeImage>,
    stream: &RngStream,
) -> Result<RangeImage> {
    let mut out = img.clone();
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut rng = stream.fork(k as u64 + 1).rng();
        if rng.random::<f64>() < spec.probability {
            out = spec.transform.apply(&out, donor, &mut rng)?;
        }
    }
    Ok(out)
}
