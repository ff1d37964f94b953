use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use range_al::dataset_io::{read_scan, LabelMap};
use range_al::projection::{project, valid_fraction, SensorConfig};
use range_al::scorer::tensor_file::encode_range_image;

use crate::common::{write_file, ConfigArgs};

#[derive(ClapArgs, Debug)]
pub struct Args {
    /// Scan files (`x y z remission` as little-endian f32 records).
    #[arg(required = true)]
    scans: Vec<PathBuf>,
    /// Output directory; each scan becomes `<stem>.mcpt`.
    #[arg(long)]
    out: PathBuf,
    /// Directory holding `<stem>.label` files for the scans.
    #[arg(long, requires = "label_map")]
    labels: Option<PathBuf>,
    /// Label map used to decode the label files.
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Image width, overriding the configuration.
    #[arg(long)]
    width: Option<usize>,
    /// Image height, overriding the configuration.
    #[arg(long)]
    height: Option<usize>,
    /// Upward field of view in degrees, overriding the configuration.
    #[arg(long, allow_hyphen_values = true)]
    fov_up: Option<f64>,
    /// Downward field of view in degrees, overriding the configuration.
    #[arg(long, allow_hyphen_values = true)]
    fov_down: Option<f64>,
}

pub fn exec(a: Args) -> Result<()> {
    let cfg = a.config.load()?;
    let sensor = SensorConfig::from_degrees(
        a.fov_up.unwrap_or(cfg.fov_up_deg),
        a.fov_down.unwrap_or(cfg.fov_down_deg),
        a.width.unwrap_or(cfg.image_width),
        a.height.unwrap_or(cfg.image_height),
    );
    sensor.validate()?;
    let map = match &a.label_map {
        Some(p) => LabelMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => LabelMap::identity(cfg.classes),
    };
    let mut failed = 0;
    for scan in &a.scans {
        match project_one(scan, &a, &sensor, &map) {
            Ok(frac) => println!("{} valid_fraction={frac:.6}", scan.display()),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", scan.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} scans failed", a.scans.len());
    }
    Ok(())
}

fn project_one(scan: &Path, a: &Args, sensor: &SensorConfig, map: &LabelMap) -> Result<f64> {
    let stem = scan
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| "scan path has no file name")?;
    let labels = a.labels.as_ref().map(|d| d.join(format!("{stem}.label")));
    let cloud = read_scan(scan, labels.as_deref(), map)?;
    let img = project(&cloud, sensor)?;
    write_file(&a.out.join(format!("{stem}.mcpt")), &encode_range_image(&img))?;
    Ok(valid_fraction(&img))
}
