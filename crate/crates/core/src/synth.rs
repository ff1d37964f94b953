//! Procedural labeled LiDAR scenes.
//!
//! Scenes are ray-cast at the pixel centres of a sensor: a ground plane, wall
//! segments, box vehicles and cylindrical poles, each class with its own
//! remission signature. Every base scene is emitted as several near-duplicate
//! variants with a small pose jitter, so pools are deliberately redundant.
//!
//! Class ids: 0 ground, 1 structure, 2 vehicle, 3 pole, 4 vegetation,
//! 5 pedestrian. Objects of classes `>= classes` are not placed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{write_scan, ClassId, DatasetManifest, LabelMap, ManifestEntry, Point, PointCloud};
use crate::error::{Error, Result};
use crate::projection::SensorConfig;
use crate::rng::RngStream;

pub const MAX_CLASSES: usize = 6;
pub const SENSOR_HEIGHT: f64 = 1.73;

/// KITTI-style raw ids used when writing synthetic label files.
const RAW_IDS: [u16; MAX_CLASSES] = [40, 50, 10, 80, 70, 30];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: usize,
    /// Inclusive range of obstacles (vehicles, poles, ...) per scene.
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    /// Standard deviation of the range noise, meters.
    pub noise_floor: f64,
    /// Standard deviation of the remission noise.
    pub remission_noise: f64,
    /// Chance that a ray produces no return.
    pub return_dropout: f64,
    /// Near-duplicate variants emitted per base scene.
    pub variants: usize,
    pub max_range: f64,
    pub seed: u64,
    pub sensor: SensorConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            min_obstacles: 4,
            max_obstacles: 12,
            noise_floor: 0.02,
            remission_noise: 0.05,
            return_dropout: 0.02,
            variants: 5,
            max_range: 80.0,
            seed: 0,
            sensor: SensorConfig::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::BadParam(format!("synthetic scenes support 2..={MAX_CLASSES} classes")));
        }
        if self.min_obstacles > self.max_obstacles || self.variants == 0 {
            return Err(Error::BadParam("bad obstacle range or variant count".into()));
        }
        if !(0.0..1.0).contains(&self.return_dropout) || self.noise_floor < 0.0 || self.remission_noise < 0.0 {
            return Err(Error::BadParam("noise parameters out of range".into()));
        }
        self.sensor.validate()
    }
}

/// Mean remission of each class.
const SIGNATURE: [f64; MAX_CLASSES] = [0.12, 0.38, 0.62, 0.88, 0.25, 0.75];

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Vertical rectangle over the segment `a..b`.
    Wall { a: [f64; 2], b: [f64; 2], height: f64 },
    /// Box resting on the ground.
    Block { centre: [f64; 2], yaw: f64, half: [f64; 2], height: f64 },
    /// Vertical cylinder standing on the ground.
    Cylinder { centre: [f64; 2], radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    class: ClassId,
    instance: u16,
    /// Per-object remission offset.
    tint: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Archetype {
    Corridor,
    Open,
    Urban,
    Parking,
}

impl Archetype {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        match rng.random::<f64>() {
            p if p < 0.45 => Archetype::Corridor,
            p if p < 0.75 => Archetype::Open,
            p if p < 0.90 => Archetype::Urban,
            _ => Archetype::Parking,
        }
    }
}

struct Scene {
    objects: Vec<Object>,
    /// Scene-wide remission gain, e.g. wet versus dry surfaces.
    gain: f64,
}

fn base_scene(spec: &SceneSpec, base: u64) -> Scene {
    let mut rng = RngStream::new(spec.seed, base, 0).fork(0x5CE7E).rng();
    let archetype = Archetype::draw(&mut rng);
    let gain = rng.random_range(0.95..1.05);
    let mut objects = Vec::new();
    let mut next_instance = 1u16;
    let mut add = |objects: &mut Vec<Object>, shape, class: ClassId, rng: &mut ChaCha8Rng| {
        if (class as usize) < spec.classes {
            let instance = if class == 1 { 0 } else { next_instance };
            if class != 1 {
                next_instance += 1;
            }
            objects.push(Object {
                shape,
                class,
                instance,
                tint: rng.random_range(-0.03..0.03),
            });
        }
    };

    // structures: walls along the road, always at least one near wall
    let road = rng.random_range(4.0..9.0);
    let far = match archetype {
        Archetype::Open => rng.random_range(14.0..25.0),
        _ => rng.random_range(4.0..9.0),
    };
    let wall_height = rng.random_range(2.5..8.0);
    add(
        &mut objects,
        Shape::Wall {
            a: [-60.0, road],
            b: [60.0, road],
            height: wall_height,
        },
        1,
        &mut rng,
    );
    add(
        &mut objects,
        Shape::Wall {
            a: [-60.0, -far],
            b: [60.0, -far],
            height: rng.random_range(2.5..8.0),
        },
        1,
        &mut rng,
    );
    if archetype == Archetype::Urban {
        let x = rng.random_range(20.0..40.0);
        add(
            &mut objects,
            Shape::Wall {
                a: [x, -far],
                b: [x, road],
                height: rng.random_range(4.0..10.0),
            },
            1,
            &mut rng,
        );
    }

    let n = rng.random_range(spec.min_obstacles..=spec.max_obstacles);
    let (vehicle_share, pole_share) = match archetype {
        Archetype::Corridor => (0.45, 0.45),
        Archetype::Open => (0.5, 0.4),
        Archetype::Urban => (0.25, 0.65),
        Archetype::Parking => (0.7, 0.25),
    };
    for _ in 0..n {
        let pick = rng.random::<f64>();
        let x: f64 = rng.random_range(-35.0..35.0);
        let lane: f64 = rng.random_range(-far + 1.0..road - 1.0);
        if x.abs() < 3.0 && lane.abs() < 3.0 {
            continue;
        }
        if pick < vehicle_share {
            add(
                &mut objects,
                Shape::Block {
                    centre: [x, lane],
                    yaw: rng.random_range(-0.3..0.3) + if rng.random::<bool>() { 0.0 } else { PI / 2.0 },
                    half: [rng.random_range(1.8..2.4), rng.random_range(0.8..1.0)],
                    height: rng.random_range(1.4..1.9),
                },
                2,
                &mut rng,
            );
        } else if pick < vehicle_share + pole_share {
            // poles stand at the roadside
            let side = if rng.random::<bool>() { road - 0.6 } else { -far + 0.6 };
            add(
                &mut objects,
                Shape::Cylinder {
                    centre: [x * 0.5, side],
                    radius: rng.random_range(0.35..0.65),
                    height: rng.random_range(4.0..7.0),
                },
                3,
                &mut rng,
            );
        } else if rng.random::<bool>() {
            add(
                &mut objects,
                Shape::Cylinder {
                    centre: [x, lane],
                    radius: rng.random_range(1.0..2.5),
                    height: rng.random_range(2.0..5.0),
                },
                4,
                &mut rng,
            );
        } else {
            add(
                &mut objects,
                Shape::Block {
                    centre: [x, lane],
                    yaw: rng.random_range(0.0..PI),
                    half: [0.3, 0.3],
                    height: rng.random_range(1.5..1.9),
                },
                5,
                &mut rng,
            );
        }
    }
    Scene { objects, gain }
}

/// Distance along the ray `(o, d)` to the first hit of `shape`.
fn intersect(shape: &Shape, d: [f64; 3]) -> Option<f64> {
    let ground = -SENSOR_HEIGHT;
    let within = |t: f64, height: f64| {
        let z = t * d[2];
        t > 1e-6 && z >= ground && z <= ground + height
    };
    match *shape {
        Shape::Wall { a, b, height } => {
            // solve t*d = a + s*(b - a) in the xy plane
            let e = [b[0] - a[0], b[1] - a[1]];
            let den = d[0] * (-e[1]) - d[1] * (-e[0]);
            if den.abs() < 1e-12 {
                return None;
            }
            let t = (a[0] * (-e[1]) - a[1] * (-e[0])) / den;
            let s = (d[0] * a[1] - d[1] * a[0]) / den;
            ((0.0..=1.0).contains(&s) && within(t, height)).then_some(t)
        }
        Shape::Block {
            centre,
            yaw,
            half,
            height,
        } => {
            let (s, c) = yaw.sin_cos();
            // ray origin and direction in the box frame
            let o = [-(c * centre[0] + s * centre[1]), -(-s * centre[0] + c * centre[1])];
            let dir = [c * d[0] + s * d[1], -s * d[0] + c * d[1]];
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for k in 0..2 {
                if dir[k].abs() < 1e-12 {
                    if o[k].abs() > half[k] {
                        return None;
                    }
                    continue;
                }
                let a = (-half[k] - o[k]) / dir[k];
                let b = (half[k] - o[k]) / dir[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            // vertical slab
            let (zlo, zhi) = (ground, ground + height);
            if d[2].abs() > 1e-12 {
                let a = zlo / d[2];
                let b = zhi / d[2];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            } else if !(zlo..=zhi).contains(&0.0) {
                return None;
            }
            (t0 <= t1 && t0 > 1e-6).then_some(t0)
        }
        Shape::Cylinder { centre, radius, height } => {
            let a = d[0] * d[0] + d[1] * d[1];
            if a < 1e-12 {
                return None;
            }
            let b = -2.0 * (d[0] * centre[0] + d[1] * centre[1]);
            let c = centre[0] * centre[0] + centre[1] * centre[1] - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            within(t, height).then_some(t)
        }
    }
}

/// Sample `index` of the pool described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<PointCloud> {
    spec.validate()?;
    let base = (index / spec.variants) as u64;
    let variant = (index % spec.variants) as u64;
    let scene = base_scene(spec, base);
    let mut rng = RngStream::new(spec.seed, base, variant + 1).fork(0x7A11).rng();
    // pose jitter of this variant
    let yaw = rng.random_range(-0.05..0.05);
    let shift = [rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)];
    let (sy, cy) = f64::sin_cos(yaw);

    let range_noise = Normal::new(0.0, spec.noise_floor.max(1e-12)).expect("finite sd");
    let remission_noise = Normal::new(0.0, spec.remission_noise.max(1e-12)).expect("finite sd");
    let sensor = &spec.sensor;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    for v in 0..sensor.height {
        let el = sensor.row_elevation(v as f64);
        for u in 0..sensor.width {
            let az = sensor.column_azimuth(u as f64);
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            // direction in the scene frame of this variant
            let ds = [cy * d[0] - sy * d[1], sy * d[0] + cy * d[1], d[2]];
            let mut best: Option<(f64, ClassId, u16, f64)> = None;
            if ds[2] < 0.0 {
                best = Some((-SENSOR_HEIGHT / ds[2], 0, 0, 0.0));
            }
            for obj in &scene.objects {
                let shape = translate(&obj.shape, shift);
                if let Some(t) = intersect(&shape, ds) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, obj.class, obj.instance, obj.tint));
                    }
                }
            }
            let Some((t, class, instance, tint)) = best else { continue };
            if t > spec.max_range || rng.random::<f64>() < spec.return_dropout {
                continue;
            }
            let r = (t + range_noise.sample(&mut rng)).max(0.5);
            let base_i = SIGNATURE[class as usize] * scene.gain + tint - 0.001 * r;
            let i = (base_i + remission_noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push(Point::new(
                (r * d[0]) as f32,
                (r * d[1]) as f32,
                (r * d[2]) as f32,
                i as f32,
            ));
            labels.push(class);
            instances.push(instance);
        }
    }
    Ok(PointCloud {
        points,
        labels: Some(labels),
        instances: Some(instances),
    })
}

fn translate(shape: &Shape, by: [f64; 2]) -> Shape {
    let mv = |p: [f64; 2]| [p[0] - by[0], p[1] - by[1]];
    match *shape {
        Shape::Wall { a, b, height } => Shape::Wall {
            a: mv(a),
            b: mv(b),
            height,
        },
        Shape::Block {
            centre,
            yaw,
            half,
            height,
        } => Shape::Block {
            centre: mv(centre),
            yaw,
            half,
            height,
        },
        Shape::Cylinder { centre, radius, height } => Shape::Cylinder {
            centre: mv(centre),
            radius,
            height,
        },
    }
}

/// Samples `0..n` of the pool described by `spec`.
pub fn generate_pool(spec: &SceneSpec, n: usize) -> Result<Vec<PointCloud>> {
    if n == 0 {
        return Err(Error::BadParam("pool must hold at least one scene".into()));
    }
    (0..n).into_par_iter().map(|i| generate_scene(spec, i)).collect()
}

/// Label map between the synthetic class ids and KITTI-style raw ids.
pub fn synthetic_label_map(classes: usize) -> Result<LabelMap> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::BadParam(format!("synthetic scenes support 2..={MAX_CLASSES} classes")));
    }
    let raw: BTreeMap<u16, ClassId> = RAW_IDS[..classes]
        .iter()
        .enumerate()
        .map(|(c, &r)| (r, c as ClassId))
        .collect();
    LabelMap::new(raw, [0u16].into_iter().collect())
}

/// Writes `n` scenes as `.bin`/`.label` pairs under `dir` and returns the manifest.
pub fn write_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<DatasetManifest> {
    let map = synthetic_label_map(spec.classes)?;
    let clouds = generate_pool(spec, n)?;
    let entries = clouds
        .par_iter()
        .enumerate()
        .map(|(i, cloud)| {
            let scan = dir.join("velodyne").join(format!("{i:06}.bin"));
            let labels = dir.join("labels").join(format!("{i:06}.label"));
            write_scan(cloud, &scan, Some(&labels), &map)?;
            Ok(ManifestEntry { scan, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project, valid_fraction};

    fn small() -> SceneSpec {
        SceneSpec {
            sensor: SensorConfig::from_degrees(3.0, 25.0, 128, 16),
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small();
        assert_eq!(generate_pool(&spec, 3).unwrap(), generate_pool(&spec, 3).unwrap());
        let other = SceneSpec { seed: 1, ..small() };
        assert_ne!(generate_scene(&spec, 0).unwrap(), generate_scene(&other, 0).unwrap());
    }

    #[test]
    fn variants_are_near_duplicates() {
        let spec = small();
        let a = project(&generate_scene(&spec, 0).unwrap(), &spec.sensor).unwrap();
        let b = project(&generate_scene(&spec, 1).unwrap(), &spec.sensor).unwrap();
        let c = project(&generate_scene(&spec, spec.variants).unwrap(), &spec.sensor).unwrap();
        let agree = |x: &crate::projection::RangeImage, y: &crate::projection::RangeImage| {
            x.labels.iter().zip(&y.labels).filter(|(p, q)| p == q).count()
        };
        assert!(agree(&a, &b) > agree(&a, &c));
    }

    #[test]
    fn ray_hits_wall_at_expected_distance() {
        let wall = Shape::Wall {
            a: [5.0, -10.0],
            b: [5.0, 10.0],
            height: 3.0,
        };
        assert!((intersect(&wall, [1.0, 0.0, 0.0]).unwrap() - 5.0).abs() < 1e-12);
        assert!(intersect(&wall, [-1.0, 0.0, 0.0]).is_none());
        let pole = Shape::Cylinder {
            centre: [10.0, 0.0],
            radius: 0.5,
            height: 4.0,
        };
        assert!((intersect(&pole, [1.0, 0.0, 0.0]).unwrap() - 9.5).abs() < 1e-12);
        let block = Shape::Block {
            centre: [10.0, 0.0],
            yaw: 0.0,
            half: [2.0, 1.0],
            height: 2.0,
        };
        assert!((intersect(&block, [1.0, 0.0, 0.0]).unwrap() - 8.0).abs() < 1e-12);
        assert!(intersect(&block, [0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn label_map_covers_classes() {
        let map = synthetic_label_map(4).unwrap();
        assert_eq!(map.num_classes(), 4);
        assert!(synthetic_label_map(1).is_err());
    }

    #[test]
    fn default_sensor_density() {
        let spec = SceneSpec::default();
        let img = project(&generate_scene(&spec, 0).unwrap(), &spec.sensor).unwrap();
        assert!(valid_fraction(&img) >= 0.3);
    }
}
