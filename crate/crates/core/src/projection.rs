//! Spherical projection of point clouds onto range images.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{ClassId, PointCloud, IGNORE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Radians; the bottom image row looks at elevation `-fov_up`.
    pub fov_up: f64,
    /// Radians; the top image row looks at elevation `+fov_down`.
    pub fov_down: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for SensorConfig {
    /// 1024x64 image with `fov_up = 3` and `fov_down = 25` degrees, i.e.
    /// elevations from -3 deg (bottom row) to +25 deg (top row).
    fn default() -> Self {
        Self::from_degrees(3.0, 25.0, 1024, 64)
    }
}

impl SensorConfig {
    pub fn from_degrees(fov_up: f64, fov_down: f64, width: usize, height: usize) -> Self {
        Self {
            fov_up: fov_up.to_radians(),
            fov_down: fov_down.to_radians(),
            width,
            height,
        }
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov() > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::BadParam(format!("degenerate sensor config {self:?}")));
        }
        Ok(())
    }

    /// Pixel `(u, v)` of a point, clamped into the image.
    pub fn pixel_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 {
            return None;
        }
        let mut yaw = y.atan2(x);
        // keep the (-pi, pi] convention: atan2(-0.0, -1) would give -pi
        if yaw <= -PI {
            yaw = PI;
        }
        let pitch = (z / r).clamp(-1.0, 1.0).asin();
        let u = 0.5 * (1.0 - yaw / PI) * self.width as f64;
        let v = (1.0 - (pitch + self.fov_up) / self.fov()) * self.height as f64;
        let clamp = |val: f64, n: usize| (val.floor().max(0.0) as usize).min(n - 1);
        Some((clamp(u, self.width), clamp(v, self.height)))
    }

    /// Azimuth (radians) through the centre of column `u`.
    pub fn column_azimuth(&self, u: f64) -> f64 {
        PI * (1.0 - 2.0 * (u + 0.5) / self.width as f64)
    }

    /// Elevation (radians) through the centre of row `v`.
    pub fn row_elevation(&self, v: f64) -> f64 {
        (1.0 - (v + 0.5) / self.height as f64) * self.fov() - self.fov_up
    }
}

/// Multi-plane range image, row-major over `(v, u)`.
///
/// Invalid pixels hold zeros in every channel, [`IGNORE`] as label, no point
/// index and instance 0. Consumers must consult `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub width: usize,
    pub height: usize,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub range: Vec<f32>,
    pub remission: Vec<f32>,
    pub labels: Vec<ClassId>,
    pub valid: Vec<bool>,
    pub point_index: Vec<Option<u32>>,
    pub instances: Option<Vec<u16>>,
}

impl RangeImage {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            x: vec![0.0; n],
            y: vec![0.0; n],
            range: vec![0.0; n],
            remission: vec![0.0; n],
            labels: vec![IGNORE; n],
            valid: vec![false; n],
            point_index: vec![None; n],
            instances: None,
        }
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Resets one pixel to the empty state.
    pub fn invalidate(&mut self, i: usize) {
        self.x[i] = 0.0;
        self.y[i] = 0.0;
        self.range[i] = 0.0;
        self.remission[i] = 0.0;
        self.labels[i] = IGNORE;
        self.valid[i] = false;
        self.point_index[i] = None;
        if let Some(inst) = &mut self.instances {
            inst[i] = 0;
        }
    }

    /// Copies pixel `j` of `src` into pixel `i` of `self`.
    pub fn copy_pixel_from(&mut self, i: usize, src: &RangeImage, j: usize) {
        self.x[i] = src.x[j];
        self.y[i] = src.y[j];
        self.range[i] = src.range[j];
        self.remission[i] = src.remission[j];
        self.labels[i] = src.labels[j];
        self.valid[i] = src.valid[j];
        self.point_index[i] = src.point_index[j];
        if let Some(inst) = &mut self.instances {
            inst[i] = src.instances.as_ref().map_or(0, |s| s[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PixelScoreMap {
    pub fn valid_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&s, _)| s)
    }
}

pub fn project(cloud: &PointCloud, cfg: &SensorConfig) -> Result<RangeImage> {
    cfg.validate()?;
    cloud.validate()?;
    let mut img = RangeImage::empty(cfg.width, cfg.height);
    if cloud.instances.is_some() {
        img.instances = Some(vec![0; img.len()]);
    }
    for (k, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let (u, v) = cfg.pixel_of(x, y, z).ok_or(Error::DegeneratePoint(k))?;
        let r = p.range();
        let i = img.idx(u, v);
        if img.valid[i] && img.range[i] as f64 <= r {
            continue;
        }
        img.x[i] = p.x;
        img.y[i] = p.y;
        img.range[i] = r as f32;
        img.remission[i] = p.remission;
        img.valid[i] = true;
        img.point_index[i] = Some(k as u32);
        img.labels[i] = cloud.labels.as_ref().map_or(IGNORE, |l| l[k]);
        if let (Some(dst), Some(src)) = (&mut img.instances, &cloud.instances) {
            dst[i] = src[k];
        }
    }
    Ok(img)
}

pub fn valid_fraction(img: &RangeImage) -> f64 {
    if img.is_empty() {
        return 0.0;
    }
    img.valid_count() as f64 / img.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::Point;

    #[test]
    fn forward_point_lands_mid_image() {
        let cfg = SensorConfig::default();
        assert_eq!(cfg.pixel_of(1.0, 0.0, 0.0), Some((512, 57)));
    }

    #[test]
    fn rear_point_wraps_to_column_zero() {
        let cfg = SensorConfig::default();
        assert_eq!(cfg.pixel_of(-1.0, 1e-9, 0.0).unwrap().0, 0);
        assert_eq!(cfg.pixel_of(-1.0, 0.0, 0.0).unwrap().0, 0);
        assert_eq!(cfg.pixel_of(-1.0, -0.0, 0.0).unwrap().0, 0);
        // just below -pi side stays inside the image
        assert_eq!(cfg.pixel_of(-1.0, -1e-9, 0.0).unwrap().0, 1023);
    }

    #[test]
    fn nearest_point_wins() {
        let cfg = SensorConfig::default();
        let mut cloud = PointCloud::from_points(vec![
            Point::new(5.0, 0.0, 0.0, 0.1),
            Point::new(2.0, 0.0, 0.0, 0.9),
        ]);
        cloud.labels = Some(vec![1, 2]);
        let img = project(&cloud, &cfg).unwrap();
        let i = img.idx(512, 57);
        assert_eq!(img.point_index[i], Some(1));
        assert_eq!(img.range[i], 2.0);
        assert_eq!(img.labels[i], 2);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn origin_point_is_rejected() {
        let cloud = PointCloud::from_points(vec![Point::new(0.0, 0.0, 0.0, 0.5)]);
        assert!(matches!(project(&cloud, &SensorConfig::default()), Err(Error::DegeneratePoint(0))));
    }

    #[test]
    fn valid_fraction_counts() {
        let img = project(&PointCloud::default(), &SensorConfig::default()).unwrap();
        assert_eq!(valid_fraction(&img), 0.0);
        let mut img = RangeImage::empty(8, 8);
        img.valid[..32].fill(true);
        assert_eq!(valid_fraction(&img), 0.5);
        img.valid.fill(true);
        assert_eq!(valid_fraction(&img), 1.0);
    }

    #[test]
    fn boundary_elevations_clamp() {
        let cfg = SensorConfig::default();
        for z in [-100.0, -1.0, 0.0, 1.0, 100.0] {
            let (u, v) = cfg.pixel_of(1.0, 0.0, z).unwrap();
            assert!(u < cfg.width && v < cfg.height);
        }
        assert_eq!(cfg.pixel_of(0.0, 0.0, 1.0).unwrap().1, 0);
        assert_eq!(cfg.pixel_of(0.0, 0.0, -1.0).unwrap().1, 63);
    }

    #[test]
    fn pixel_centres_invert() {
        let cfg = SensorConfig::from_degrees(3.0, 25.0, 128, 16);
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                let (az, el) = (cfg.column_azimuth(u as f64), cfg.row_elevation(v as f64));
                let (x, y, z) = (el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                assert_eq!(cfg.pixel_of(10.0 * x, 10.0 * y, 10.0 * z), Some((u, v)));
            }
        }
    }
}
