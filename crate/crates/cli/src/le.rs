//! `le`: labeling efficiency of every curve against a baseline curve.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use serde::{Deserialize, Serialize};

use range_al::metrics::LearningCurve;

use crate::common::write_file;

#[derive(ClapArgs, Debug)]
pub struct Args {
    /// Curves CSV written by `run`.
    #[arg(long)]
    curves: PathBuf,
    /// Baseline curve as `heuristic:da_flag`, e.g. `random:off`.
    #[arg(long, default_value = "random:off")]
    baseline: String,
    /// Absolute mIoU levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    /// Levels relative to the baseline's full-pool mIoU (its last point), per seed.
    #[arg(long, value_delimiter = ',')]
    relative: Vec<f64>,
    /// Output CSV; stdout when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    heuristic: String,
    da_flag: String,
    seed: u64,
    n_labeled: usize,
    miou: f64,
}

#[derive(Debug, Serialize)]
struct LeRow {
    heuristic: String,
    da_flag: String,
    seed: u64,
    level: f64,
    /// `n_baseline / n_curve`; above 1 when the curve needs fewer labels.
    le: Option<f64>,
    /// `n_curve / n_baseline`.
    le_inverse: Option<f64>,
    n_baseline: Option<f64>,
    n_curve: Option<f64>,
    reachable: bool,
}

type CurveKey = (String, String, u64);

pub fn exec(a: Args) -> Result<()> {
    let (base_h, base_da) = a
        .baseline
        .split_once(':')
        .with_context(|| format!("baseline `{}` is not `heuristic:da_flag`", a.baseline))?;
    if a.levels.is_empty() && a.relative.is_empty() {
        bail!("give at least one level with --levels or --relative");
    }
    let mut reader = csv::Reader::from_path(&a.curves).with_context(|| format!("reading {}", a.curves.display()))?;
    let mut points: BTreeMap<CurveKey, Vec<(usize, f64)>> = BTreeMap::new();
    for row in reader.deserialize::<CurveRow>() {
        let r = row.with_context(|| format!("reading {}", a.curves.display()))?;
        points
            .entry((r.heuristic, r.da_flag, r.seed))
            .or_default()
            .push((r.n_labeled, r.miou));
    }
    let curves: BTreeMap<CurveKey, LearningCurve> = points
        .into_iter()
        .map(|(k, mut p)| {
            p.sort_by_key(|x| x.0);
            let c = LearningCurve::new(p).with_context(|| format!("curve {}:{} seed {}", k.0, k.1, k.2))?;
            Ok((k, c))
        })
        .collect::<Result<_>>()?;
    if !curves.keys().any(|k| k.0 == base_h && k.1 == base_da) {
        bail!("baseline `{}` is not in {}", a.baseline, a.curves.display());
    }

    let mut out = csv::Writer::from_writer(Vec::new());
    for ((h, da, seed), curve) in &curves {
        let Some(base) = curves.get(&(base_h.to_string(), base_da.to_string(), *seed)) else {
            bail!("baseline `{}` has no curve for seed {seed}", a.baseline);
        };
        let full = base.points().last().map(|p| p.1).unwrap_or(0.0);
        let levels = a.levels.iter().copied().chain(a.relative.iter().map(|f| f * full));
        for level in levels {
            let nb = base.samples_to_reach(level).ok();
            let nc = curve.samples_to_reach(level).ok();
            let (le, inv) = match (nb, nc) {
                (Some(b), Some(c)) if b > 0.0 && c > 0.0 => (Some(b / c), Some(c / b)),
                _ => (None, None),
            };
            out.serialize(LeRow {
                heuristic: h.clone(),
                da_flag: da.clone(),
                seed: *seed,
                level,
                le,
                le_inverse: inv,
                n_baseline: nb,
                n_curve: nc,
                reachable: le.is_some(),
            })?;
        }
    }
    let bytes = out.into_inner()?;
    match &a.out {
        Some(p) => write_file(p, &bytes),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}
