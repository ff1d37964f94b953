//! `ttda`: sorted aggregated BALD scores of L, U, TT-DA(L) and TT-DA(U).

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use serde::Serialize;

use range_al::al_loop::{analyze_tt_da, PoolState, TtDaParams};
use range_al::scorer::{BuiltinScorer, Scorer};

use crate::common::{env_seed, write_file, ConfigArgs, DataArgs};

#[derive(ClapArgs, Debug)]
pub struct Args {
    /// Built-in scorer checkpoint (`stepNNN.ralm` from `run` with checkpoints on).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pool file saved with the checkpoint.
    #[arg(long)]
    pools: PathBuf,
    /// AL step of the checkpoint; keys the random streams.
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Seed of the run that produced the checkpoint.
    #[arg(long, default_value_t = 0, env = "RANGE_AL_SEED")]
    seed: u64,
    /// Output directory for the four CSVs and `cutoff.txt`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Serialize)]
struct ScoreRow {
    rank: usize,
    sample_id: usize,
    score: f64,
    /// Inside the budget a step would acquire.
    within_budget: bool,
}

pub fn exec(a: Args) -> Result<()> {
    // clap reads RANGE_AL_SEED already; parse it here only to report a bad value clearly
    env_seed()?;
    let cfg = a.config.load()?;
    let (data, classes) = a.data.source()?.load(&cfg, a.seed)?;
    let text = fs::read_to_string(&a.pools).with_context(|| format!("reading {}", a.pools.display()))?;
    let state = PoolState::parse(&text)?;
    if state.universe != data.universe() {
        bail!(
            "pools in {} do not match the {}-sample pool of this configuration",
            a.pools.display(),
            data.pool.len()
        );
    }
    let mut model = BuiltinScorer::load(&a.checkpoint, cfg.scorer_config(), a.seed)?;
    if model.classes() != classes {
        bail!("checkpoint has {} classes, the data {classes}", model.classes());
    }
    model.set_step(a.step);
    let da = cfg.ttda_specs()?;
    let curves = analyze_tt_da(
        &model,
        &state,
        &data,
        &TtDaParams {
            da: &da,
            step: a.step,
            seed: a.seed,
            iterations: cfg.mc_iterations,
            budget: cfg.budget,
            aggregation: cfg.aggregation,
        },
    )?;
    for (name, scores) in curves.curves() {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["rank", "sample_id", "score", "within_budget"])?;
        for (rank, s) in scores.iter().enumerate() {
            w.serialize(ScoreRow {
                rank,
                sample_id: s.sample_id,
                score: s.score,
                within_budget: rank < curves.budget,
            })?;
        }
        let path = a.out.join(format!("{name}.csv"));
        write_file(&path, &w.into_inner()?)?;
        println!("{} ({} samples)", path.display(), scores.len());
    }
    write_file(&a.out.join("cutoff.txt"), format!("{}\n", curves.budget).as_bytes())?;
    Ok(())
}
