use std::path::PathBuf;

use anyhow::Result;
use clap::Args as ClapArgs;
use range_al::dataset_io::{DatasetManifest, ManifestEntry};
use range_al::synth::{synthetic_label_map, write_dataset};

use crate::common::{write_file, ConfigArgs};

#[derive(ClapArgs, Debug)]
pub struct Args {
    /// Output directory; receives `velodyne/`, `labels/`, `manifest.txt` and `label_map.txt`.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn exec(a: Args) -> Result<()> {
    let cfg = a.config.load()?;
    let spec = cfg.scene_spec(a.seed);
    let manifest = write_dataset(&spec, a.count, &a.out)?;
    // entries relative to the manifest so the directory can be moved
    let relative = DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                scan: e.scan.strip_prefix(&a.out).unwrap_or(&e.scan).to_path_buf(),
                labels: e.labels.strip_prefix(&a.out).unwrap_or(&e.labels).to_path_buf(),
            })
            .collect(),
    };
    relative.save(&a.out.join("manifest.txt"))?;
    write_file(&a.out.join("label_map.txt"), synthetic_label_map(spec.classes)?.to_text().as_bytes())?;
    println!("wrote {} scenes to {}", manifest.len(), a.out.display());
    Ok(())
}
