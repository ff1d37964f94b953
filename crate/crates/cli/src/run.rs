//! `run`: a matrix of (heuristic, augmentation) cells over one or more seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args as ClapArgs;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use range_al::al_loop::{run, AlData};
use range_al::config::{build_scorer, ExperimentConfig};
use range_al::dataset_io::write_run_record;
use range_al::scorer::ScorerKind;
use range_al::uncertainty::HeuristicKind;

use crate::common::{env_seed, load_config, write_file, DataSource};

#[derive(ClapArgs, Debug)]
pub struct Args {
    /// Run manifest (TOML). Relative paths inside it resolve against its directory.
    manifest: PathBuf,
    /// Number of cells run at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Use the desk-scale preset as the configuration base.
    #[arg(long)]
    desk_scale: bool,
}

/// One (heuristic, augmentation) cell of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub heuristic: HeuristicKind,
    #[serde(default)]
    pub da: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Experiment configuration; defaults (or the desk preset) when absent.
    pub config: Option<PathBuf>,
    /// Dataset manifest; synthetic scenes when absent.
    pub dataset: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub desk_scale: bool,
    /// Save the model and pools of every step (built-in scorer only).
    #[serde(default)]
    pub checkpoints: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunManifest {
    /// Parses the manifest and resolves its paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.config.iter_mut().for_each(resolve);
        m.dataset.iter_mut().for_each(resolve);
        m.label_map.iter_mut().for_each(resolve);
        resolve(&mut m.output);
        Ok(m)
    }

    /// Every input path must exist before anything runs.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.config, &self.dataset, &self.label_map].into_iter().flatten() {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellId {
    heuristic: HeuristicKind,
    da: bool,
    seed: u64,
}

impl CellId {
    fn da_flag(&self) -> &'static str {
        if self.da {
            "on"
        } else {
            "off"
        }
    }

    fn file_stem(&self) -> String {
        format!("{}_da-{}_seed{}", self.heuristic, self.da_flag(), self.seed)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/da-{}/seed{}", self.heuristic, self.da_flag(), self.seed)
    }
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    step: usize,
    sample_id: usize,
    heuristic: String,
    aggregated_score: f64,
}

#[derive(Debug, Serialize)]
struct CurveRow {
    heuristic: String,
    da_flag: &'static str,
    seed: u64,
    n_labeled: usize,
    miou: f64,
}

pub fn exec(a: Args) -> Result<()> {
    let path = &a.manifest;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut m = RunManifest::parse(&text, path.parent().unwrap_or(Path::new("")))
        .with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = env_seed()? {
        m.seeds = vec![seed];
    }
    m.check_paths()?;
    if a.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let cfg = load_config(m.config.as_deref(), a.desk_scale || m.desk_scale)?;
    let source = DataSource::new(m.dataset.clone(), m.label_map.clone())?;

    let mut cells = Vec::new();
    for &seed in &m.seeds {
        for c in &m.cells {
            cells.push(CellId {
                heuristic: c.heuristic,
                da: c.da,
                seed,
            });
        }
    }
    cells.sort();
    cells.dedup();
    if cells.is_empty() {
        println!("no cells to run");
        return Ok(());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    // data are shared by every cell of a seed; a loading failure fails those cells
    let mut data: BTreeMap<u64, std::result::Result<(AlData, usize), String>> = BTreeMap::new();
    for &seed in &m.seeds {
        data.entry(seed)
            .or_insert_with(|| pool.install(|| source.load(&cfg, seed)).map_err(|e| format!("{e:#}")));
    }

    let print_lock = Mutex::new(());
    let results: Vec<(CellId, Result<Vec<CurveRow>>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&id| {
                let res = match &data[&id.seed] {
                    Ok((d, classes)) => run_cell(id, &cfg, d, *classes, &m, &print_lock),
                    Err(e) => Err(anyhow!("loading data: {e}")),
                };
                (id, res)
            })
            .collect()
    });

    let mut curves = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    curves.write_record(["heuristic", "da_flag", "seed", "n_labeled", "miou"])?;
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(rows) => {
                for r in rows {
                    curves.serialize(r)?;
                }
            }
            Err(e) => failures.push(format!("{id}: {e:#}")),
        }
    }
    let curves_path = m.output.join("curves.csv");
    write_file(&curves_path, &curves.into_inner()?)?;
    println!("curves written to {}", curves_path.display());
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed {f}");
        }
        bail!("{} of {} cells failed", failures.len(), cells.len());
    }
    Ok(())
}

fn run_cell(
    id: CellId,
    cfg: &ExperimentConfig,
    data: &AlData,
    classes: usize,
    m: &RunManifest,
    print_lock: &Mutex<()>,
) -> Result<Vec<CurveRow>> {
    let al = cfg.al_config(id.heuristic, id.da, id.seed)?;
    if m.checkpoints && al.scorer.kind != ScorerKind::Builtin {
        bail!("checkpoints need the built-in scorer");
    }
    let mut model = build_scorer(&al.scorer, classes, id.seed)?;
    let ckpt_dir = m.output.join(id.file_stem());
    let mut scores = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    scores.write_record(["step", "sample_id", "heuristic", "aggregated_score"])?;
    let record = run(&al, model.as_mut(), data, |ctx| {
        let r = ctx.record;
        for s in ctx.scores {
            scores
                .serialize(ScoreRow {
                    step: r.step,
                    sample_id: s.sample_id,
                    heuristic: id.heuristic.to_string(),
                    aggregated_score: s.score,
                })
                .map_err(|e| range_al::Error::Config(format!("score dump: {e}")))?;
        }
        {
            let _guard = print_lock.lock().unwrap_or_else(|p| p.into_inner());
            eprintln!(
                "[{id}] step {} |L|={} mIoU={:.4} var={:.5} bald={:.5} ({:.1}s)",
                r.step, r.n_labeled, r.test_miou, r.mean_variance, r.mean_bald, r.wall_time_s
            );
        }
        if m.checkpoints {
            let step = r.step;
            let blob = ctx
                .model
                .checkpoint()
                .ok_or_else(|| range_al::Error::Config("scorer has no checkpoint".into()))?;
            let write = |name: String, bytes: &[u8]| {
                write_file(&ckpt_dir.join(name), bytes).map_err(|e| range_al::Error::Config(format!("{e:#}")))
            };
            write(format!("step{step:03}.pool"), ctx.pools.to_text().as_bytes())?;
            write(format!("step{step:03}.ralm"), &blob)?;
        }
        Ok(())
    })?;
    write_run_record(&record, &m.output.join(format!("{}.csv", id.file_stem())))?;
    write_file(
        &m.output.join(format!("{}.scores.csv", id.file_stem())),
        &scores.into_inner().map_err(|e| anyhow!("score dump: {e}"))?,
    )?;
    Ok(record
        .steps
        .iter()
        .map(|s| CurveRow {
            heuristic: id.heuristic.to_string(),
            da_flag: id.da_flag(),
            seed: id.seed,
            n_labeled: s.n_labeled,
            miou: s.test_miou,
        })
        .collect())
}
