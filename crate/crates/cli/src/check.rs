use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Result};
use range_al::scorer::tensor_file::{decode_range_image, decode_tensor, RawContainer, VERSION_PROBS};

/// Prints one line per file; fails if any file is malformed.
pub fn exec(files: &[PathBuf]) -> Result<()> {
    let mut failed = 0;
    for path in files {
        match check(path) {
            Ok(desc) => println!("{}: ok {desc}", path.display()),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} files failed validation", files.len());
    }
    Ok(())
}

fn check(path: &PathBuf) -> Result<String> {
    let bytes = fs::read(path)?;
    let raw = RawContainer::decode(&bytes)?;
    if raw.version == VERSION_PROBS {
        let t = decode_tensor(&bytes)?;
        Ok(format!(
            "probabilities {}x{} C={} T={}",
            t.width, t.height, t.classes, t.iterations
        ))
    } else {
        let img = decode_range_image(&bytes)?;
        Ok(format!(
            "range image {}x{} valid={}",
            img.width,
            img.height,
            img.valid_count()
        ))
    }
}
