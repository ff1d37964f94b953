//! KITTI-style scan and label files, dataset manifests, pool splits and
//! run-record persistence.
//!
//! Scans are headerless little-endian `f32` quadruples `(x, y, z, remission)`.
//! Label files hold one little-endian `u32` per point: the low 16 bits carry the
//! semantic id, the high 16 bits the instance id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::al_loop::{AlConfig, AlRunRecord, StepRecord};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Contiguous training class id in `[0, C)`.
pub type ClassId = u16;

/// Label value for pixels and points excluded from training and evaluation.
pub const IGNORE: ClassId = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub remission: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, remission: f32) -> Self {
        Self { x, y, z, remission }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// One training class id per point.
    pub labels: Option<Vec<ClassId>>,
    /// One instance id per point (0 = no instance).
    pub instances: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point>) -> Self {
        Self {
            points,
            labels: None,
            instances: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::MalformedLabels(format!(
                    "{} labels for {n} points",
                    labels.len()
                )));
            }
        }
        if let Some(inst) = &self.instances {
            if inst.len() != n {
                return Err(Error::MalformedLabels(format!(
                    "{} instance ids for {n} points",
                    inst.len()
                )));
            }
        }
        if let Some(k) = self
            .points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.remission.is_finite()))
        {
            return Err(Error::MalformedScan(format!("point {k} has a non-finite coordinate")));
        }
        Ok(())
    }
}

pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::MalformedScan(format!(
            "length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (k, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let p = Point::new(f(0), f(4), f(8), f(12));
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.remission.is_finite()) {
            return Err(Error::MalformedScan(format!("point {k} has a non-finite value")));
        }
        points.push(p);
    }
    Ok(PointCloud::from_points(points))
}

pub fn serialize_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.remission] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Flat remap from raw dataset ids to contiguous training ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    raw_to_train: BTreeMap<u16, ClassId>,
    ignore_ids: BTreeSet<u16>,
    /// Reject unknown raw ids instead of mapping them to [`IGNORE`].
    pub strict: bool,
}

impl LabelMap {
    pub fn new(raw_to_train: BTreeMap<u16, ClassId>, ignore_ids: BTreeSet<u16>) -> Result<Self> {
        let used: BTreeSet<ClassId> = raw_to_train.values().copied().collect();
        let classes = used.len();
        if used.iter().copied().ne(0..classes as ClassId) {
            return Err(Error::BadLabelMap(format!(
                "train ids {used:?} are not contiguous from 0"
            )));
        }
        if let Some(id) = raw_to_train.keys().find(|k| ignore_ids.contains(k)) {
            return Err(Error::BadLabelMap(format!("raw id {id} is both mapped and ignored")));
        }
        Ok(Self {
            raw_to_train,
            ignore_ids,
            strict: false,
        })
    }

    /// Identity map over `0..classes`.
    pub fn identity(classes: usize) -> Self {
        let raw_to_train = (0..classes as u16).map(|c| (c, c)).collect();
        Self::new(raw_to_train, BTreeSet::new()).expect("identity map is contiguous")
    }

    /// Parses lines of `raw train_id` or `raw ignore`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut ignore = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let bad = || Error::BadLabelMap(format!("line {}: expected `raw train_id|ignore`", lineno + 1));
            let raw: u16 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            match fields.next().ok_or_else(bad)? {
                "ignore" => {
                    ignore.insert(raw);
                }
                t => {
                    let t: ClassId = t.parse().map_err(|_| bad())?;
                    if map.insert(raw, t).is_some() {
                        return Err(Error::BadLabelMap(format!("raw id {raw} mapped twice")));
                    }
                }
            }
        }
        Self::new(map, ignore)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (raw, t) in &self.raw_to_train {
            s.push_str(&format!("{raw} {t}\n"));
        }
        for raw in &self.ignore_ids {
            s.push_str(&format!("{raw} ignore\n"));
        }
        s
    }

    pub fn num_classes(&self) -> usize {
        self.raw_to_train.values().collect::<BTreeSet<_>>().len()
    }

    pub fn ignore_ids(&self) -> &BTreeSet<u16> {
        &self.ignore_ids
    }

    pub fn map_raw(&self, raw: u16) -> Result<ClassId> {
        if let Some(&t) = self.raw_to_train.get(&raw) {
            Ok(t)
        } else if self.ignore_ids.contains(&raw) {
            Ok(IGNORE)
        } else if self.strict {
            Err(Error::UnknownLabel(raw))
        } else {
            Ok(IGNORE)
        }
    }

    /// Smallest raw id mapping onto `class`; `IGNORE` goes to the smallest ignore id (or 0).
    pub fn to_raw(&self, class: ClassId) -> Option<u16> {
        if class == IGNORE {
            return Some(self.ignore_ids.iter().next().copied().unwrap_or(0));
        }
        self.raw_to_train
            .iter()
            .find(|(_, &t)| t == class)
            .map(|(&raw, _)| raw)
    }
}

/// Decoded label file: one class id and one instance id per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointLabels {
    pub classes: Vec<ClassId>,
    pub instances: Vec<u16>,
}

pub fn split_label_word(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

pub fn join_label_word(semantic: u16, instance: u16) -> u32 {
    ((instance as u32) << 16) | semantic as u32
}

pub fn parse_labels(bytes: &[u8], map: &LabelMap) -> Result<PointLabels> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::MalformedLabels(format!(
            "length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let n = bytes.len() / 4;
    let mut out = PointLabels {
        classes: Vec::with_capacity(n),
        instances: Vec::with_capacity(n),
    };
    let mut unknown = BTreeSet::new();
    for w in bytes.chunks_exact(4) {
        let (sem, inst) = split_label_word(u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
        let class = map.map_raw(sem)?;
        if class == IGNORE && !map.ignore_ids.contains(&sem) {
            unknown.insert(sem);
        }
        out.classes.push(class);
        out.instances.push(inst);
    }
    if !unknown.is_empty() {
        warn!("unknown raw label ids {unknown:?} mapped to ignore");
    }
    Ok(out)
}

pub fn encode_labels(classes: &[ClassId], instances: Option<&[u16]>, map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(classes.len() * 4);
    for (k, &c) in classes.iter().enumerate() {
        let raw = map.to_raw(c).ok_or(Error::BadClassId {
            id: c,
            classes: map.num_classes(),
        })?;
        let inst = instances.map_or(0, |i| i[k]);
        out.extend_from_slice(&join_label_word(raw, inst).to_le_bytes());
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::storage(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

/// Reads a scan and, when given, its label file.
pub fn read_scan(scan: &Path, labels: Option<&Path>, map: &LabelMap) -> Result<PointCloud> {
    let mut cloud = parse_point_cloud(&read_bytes(scan)?)?;
    if let Some(label_path) = labels {
        let decoded = parse_labels(&read_bytes(label_path)?, map)?;
        if decoded.classes.len() != cloud.len() {
            return Err(Error::MalformedLabels(format!(
                "{}: {} labels for {} points",
                label_path.display(),
                decoded.classes.len(),
                cloud.len()
            )));
        }
        cloud.labels = Some(decoded.classes);
        cloud.instances = Some(decoded.instances);
    }
    Ok(cloud)
}

pub fn write_scan(cloud: &PointCloud, scan: &Path, labels: Option<&Path>, map: &LabelMap) -> Result<()> {
    write_bytes(scan, &serialize_point_cloud(cloud))?;
    if let (Some(path), Some(classes)) = (labels, &cloud.labels) {
        write_bytes(path, &encode_labels(classes, cloud.instances.as_deref(), map)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scan: PathBuf,
    pub labels: PathBuf,
}

/// Ordered list of scan/label pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// One `scan_path<TAB>label_path` per line. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let resolve = |p: &str| match base {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        };
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (scan, labels) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("manifest line {}: expected scan<TAB>labels", lineno + 1))
            })?;
            entries.push(ManifestEntry {
                scan: resolve(scan.trim()),
                labels: resolve(labels.trim()),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.scan.display(), e.labels.display()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Disjoint pool/test index sets over a manifest, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSplit {
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniformly random disjoint pool and test subsets of `0..entries`.
pub fn split_indices(entries: usize, pool_size: usize, test_size: usize, seed: u64) -> Result<PoolSplit> {
    let requested = pool_size + test_size;
    if requested > entries {
        return Err(Error::PoolTooLarge {
            requested,
            available: entries,
        });
    }
    let mut order: Vec<usize> = (0..entries).collect();
    order.shuffle(&mut RngStream::new(seed, 0, 0).fork(0x5EED_5B17).rng());
    let mut pool = order[..pool_size].to_vec();
    let mut test = order[pool_size..requested].to_vec();
    pool.sort_unstable();
    test.sort_unstable();
    Ok(PoolSplit { pool, test })
}

pub fn split_pool(manifest: &DatasetManifest, pool_size: usize, test_size: usize, seed: u64) -> Result<PoolSplit> {
    split_indices(manifest.len(), pool_size, test_size, seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRow {
    step: usize,
    n_labeled: usize,
    test_miou: f64,
    mean_variance: f64,
    mean_bald: f64,
    train_iterations: usize,
    train_miou: f64,
    selected: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TimingRow {
    step: usize,
    wall_time_s: f64,
}

/// Sidecar paths written next to a run-record CSV: `(config, timing)`.
pub fn record_sidecars(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
    let dir = path.parent().unwrap_or(Path::new(""));
    (dir.join(format!("{stem}.config.toml")), dir.join(format!("{stem}.timing.csv")))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::storage(path, io),
        other => Error::MalformedRecord(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the per-step CSV at `path` plus config and timing sidecars.
///
/// The CSV itself carries no timing, so identical runs produce identical bytes.
pub fn write_run_record(record: &AlRunRecord, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut t = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    // headers are written by hand so that an empty record still has one
    w.write_record([
        "step",
        "n_labeled",
        "test_miou",
        "mean_variance",
        "mean_bald",
        "train_iterations",
        "train_miou",
        "selected",
    ])
    .map_err(|e| csv_err(path, e))?;
    t.write_record(["step", "wall_time_s"]).map_err(|e| csv_err(path, e))?;
    for s in &record.steps {
        let selected = s.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let row = StepRow {
            step: s.step,
            n_labeled: s.n_labeled,
            test_miou: s.test_miou,
            mean_variance: s.mean_variance,
            mean_bald: s.mean_bald,
            train_iterations: s.train_iterations,
            train_miou: s.train_miou,
            selected,
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
        t.serialize(TimingRow {
            step: s.step,
            wall_time_s: s.wall_time_s,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::MalformedRecord(e.to_string()))?;
    let timing = t.into_inner().map_err(|e| Error::MalformedRecord(e.to_string()))?;
    let config = toml::to_string(&record.config).map_err(|e| Error::Config(e.to_string()))?;
    let (config_path, timing_path) = record_sidecars(path);
    write_bytes(path, &body)?;
    write_bytes(&timing_path, &timing)?;
    write_bytes(&config_path, config.as_bytes())
}

pub fn read_run_record(path: &Path) -> Result<AlRunRecord> {
    let (config_path, timing_path) = record_sidecars(path);
    let config_text = fs::read_to_string(&config_path).map_err(|e| Error::storage(&config_path, e))?;
    let config: AlConfig = toml::from_str(&config_text).map_err(|e| Error::Config(e.to_string()))?;

    let mut timing = BTreeMap::new();
    if timing_path.exists() {
        let mut r = csv::Reader::from_path(&timing_path).map_err(|e| csv_err(&timing_path, e))?;
        for row in r.deserialize::<TimingRow>() {
            let row = row.map_err(|e| csv_err(&timing_path, e))?;
            timing.insert(row.step, row.wall_time_s);
        }
    }

    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut steps = Vec::new();
    for row in r.deserialize::<StepRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let selected = row
            .selected
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::MalformedRecord(format!("bad sample id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        steps.push(StepRecord {
            step: row.step,
            n_labeled: row.n_labeled,
            test_miou: row.test_miou,
            mean_variance: row.mean_variance,
            mean_bald: row.mean_bald,
            train_iterations: row.train_iterations,
            train_miou: row.train_miou,
            selected,
            wall_time_s: timing.get(&row.step).copied().unwrap_or(0.0),
        });
    }
    Ok(AlRunRecord { config, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad(vals: &[[f32; 4]]) -> Vec<u8> {
        vals.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn parses_points_in_order() {
        let cloud = parse_point_cloud(&quad(&[[1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.2]])).unwrap();
        assert_eq!(
            cloud.points,
            vec![Point::new(1.0, 0.0, 0.0, 0.5), Point::new(0.0, 1.0, 0.0, 0.2)]
        );
        assert!(parse_point_cloud(&[]).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_scans() {
        assert!(matches!(parse_point_cloud(&[0u8; 17]), Err(Error::MalformedScan(_))));
        let bytes = quad(&[[1.0, f32::NAN, 0.0, 0.5]]);
        assert!(matches!(parse_point_cloud(&bytes), Err(Error::MalformedScan(_))));
        let bytes = quad(&[[f32::INFINITY, 0.0, 0.0, 0.5]]);
        assert!(matches!(parse_point_cloud(&bytes), Err(Error::MalformedScan(_))));
    }

    fn kitti_like() -> LabelMap {
        let map = [(9u16, 3u16), (40, 0), (50, 1), (10, 2)].into_iter().collect();
        LabelMap::new(map, [0u16, 1].into_iter().collect()).unwrap()
    }

    #[test]
    fn label_word_split() {
        let map = kitti_like();
        let labels = parse_labels(&0x0001_0009u32.to_le_bytes(), &map).unwrap();
        assert_eq!(labels.classes, vec![3]);
        assert_eq!(labels.instances, vec![1]);

        let labels = parse_labels(&join_label_word(1, 7).to_le_bytes(), &map).unwrap();
        assert_eq!(labels.classes, vec![IGNORE]);
        assert_eq!(labels.instances, vec![7]);

        assert!(matches!(parse_labels(&[0u8; 6], &map), Err(Error::MalformedLabels(_))));
    }

    #[test]
    fn unknown_label_lenient_and_strict() {
        let mut map = kitti_like();
        let word = join_label_word(99, 0).to_le_bytes();
        assert_eq!(parse_labels(&word, &map).unwrap().classes, vec![IGNORE]);
        map.strict = true;
        assert!(matches!(parse_labels(&word, &map), Err(Error::UnknownLabel(99))));
    }

    #[test]
    fn label_map_validation() {
        let gap = [(1u16, 0u16), (2, 2)].into_iter().collect();
        assert!(LabelMap::new(gap, BTreeSet::new()).is_err());
        let overlap = [(1u16, 0u16)].into_iter().collect();
        assert!(LabelMap::new(overlap, [1u16].into_iter().collect()).is_err());
        let map = kitti_like();
        assert_eq!(map.num_classes(), 4);
        assert_eq!(LabelMap::parse(&map.to_text()).unwrap(), map);
        assert!(LabelMap::parse("1 2 3\n5 x").is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_indices(23201, 6000, 2000, 1).unwrap();
        assert_eq!((s.pool.len(), s.test.len()), (6000, 2000));
        let pool: BTreeSet<_> = s.pool.iter().collect();
        assert!(s.test.iter().all(|t| !pool.contains(t)));
        assert_eq!(s, split_indices(23201, 6000, 2000, 1).unwrap());
        assert_ne!(s, split_indices(23201, 6000, 2000, 2).unwrap());

        let full = split_indices(50, 50, 0, 9).unwrap();
        assert_eq!(full.pool, (0..50).collect::<Vec<_>>());
        assert!(full.test.is_empty());

        assert!(matches!(
            split_indices(10, 8, 3, 0),
            Err(Error::PoolTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn manifest_text_round_trip() {
        let text = "a/000.bin\ta/000.label\n/abs/1.bin\t/abs/1.label\n";
        let m = DatasetManifest::parse(text, None).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.to_text(), text);
        let based = DatasetManifest::parse(text, Some(Path::new("/data"))).unwrap();
        assert_eq!(based.entries[0].scan, PathBuf::from("/data/a/000.bin"));
        assert_eq!(based.entries[1].scan, PathBuf::from("/abs/1.bin"));
        assert!(DatasetManifest::parse("no-tab-here\n", None).is_err());
    }

    proptest! {
        #[test]
        fn scan_round_trip(pts in prop::collection::vec((-100f32..100.0, -100f32..100.0, -10f32..10.0, 0f32..1.0), 0..64)) {
            let cloud = PointCloud::from_points(pts.into_iter().map(|(x, y, z, i)| Point::new(x, y, z, i)).collect());
            prop_assert_eq!(parse_point_cloud(&serialize_point_cloud(&cloud)).unwrap(), cloud);
        }

        #[test]
        fn label_word_reconstructs(word in any::<u32>()) {
            let (sem, inst) = split_label_word(word);
            prop_assert_eq!(join_label_word(sem, inst), word);
        }
    }
}
