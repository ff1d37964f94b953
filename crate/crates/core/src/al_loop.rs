//! Pool-based active learning: pool bookkeeping, the train/score/select cycle
//! and the test-time augmentation analysis.

use std::collections::BTreeSet;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{compose, AugmentationSpec};
use crate::error::{Error, Result};
use crate::metrics::{mean_iou, ConfusionMatrix};
use crate::projection::RangeImage;
use crate::rng::RngStream;
use crate::scorer::{SampleKey, Scorer, ScorerConfig};
use crate::uncertainty::{
    aggregate, bald_map, heuristic_map, rank_and_select, variance_map, Aggregation, HeuristicKind, McProbTensor,
    SampleScore,
};

const SALT_INIT: u64 = 0x1417;
const SALT_SELECT: u64 = 0x5E1E;
const SALT_TTDA: u64 = 0x77DA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlConfig {
    pub init_size: usize,
    pub budget: usize,
    /// Number of trained models, i.e. rows of the run record.
    pub steps: usize,
    pub heuristic: HeuristicKind,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub seed: u64,
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub da: Vec<AugmentationSpec>,
}

impl AlConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.init_size == 0 {
            return Err(Error::Config("initial set must hold at least one sample".into()));
        }
        if self.init_size > pool_size {
            return Err(Error::PoolTooLarge {
                requested: self.init_size,
                available: pool_size,
            });
        }
        self.scorer.validate()?;
        for spec in &self.da {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Labeled and unlabeled halves of the sample pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
    pub universe: BTreeSet<usize>,
}

impl PoolState {
    /// Checks `L ∩ U = ∅` and `L ∪ U = D`.
    pub fn check(&self) -> Result<()> {
        if let Some(id) = self.labeled.intersection(&self.unlabeled).next() {
            return Err(Error::PoolInvariant(format!("sample {id} is both labeled and unlabeled")));
        }
        if self.labeled.len() + self.unlabeled.len() != self.universe.len()
            || !self.labeled.iter().chain(&self.unlabeled).all(|i| self.universe.contains(i))
        {
            return Err(Error::PoolInvariant("labeled and unlabeled sets do not cover the pool".into()));
        }
        Ok(())
    }

    /// Moves `ids` from U to L.
    pub fn annotate(&mut self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if !self.unlabeled.remove(&id) {
                return Err(Error::PoolInvariant(format!("sample {id} is not unlabeled")));
            }
            self.labeled.insert(id);
        }
        Ok(())
    }
}

impl PoolState {
    /// Two lines, `labeled:` and `unlabeled:`, each followed by sorted ids.
    pub fn to_text(&self) -> String {
        let join = |s: &BTreeSet<usize>| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        format!("labeled: {}\nunlabeled: {}\n", join(&self.labeled), join(&self.unlabeled))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labeled = None;
        let mut unlabeled = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, ids) = line
                .split_once(':')
                .ok_or_else(|| Error::MalformedRecord(format!("pool line without key: `{line}`")))?;
            let ids = ids
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| Error::MalformedRecord(format!("bad sample id `{t}`"))))
                .collect::<Result<BTreeSet<_>>>()?;
            match key.trim() {
                "labeled" => labeled = Some(ids),
                "unlabeled" => unlabeled = Some(ids),
                other => return Err(Error::MalformedRecord(format!("unknown pool key `{other}`"))),
            }
        }
        let (Some(labeled), Some(unlabeled)) = (labeled, unlabeled) else {
            return Err(Error::MalformedRecord("pool file needs labeled and unlabeled lines".into()));
        };
        let universe = labeled.union(&unlabeled).copied().collect();
        let state = Self {
            labeled,
            unlabeled,
            universe,
        };
        state.check()?;
        Ok(state)
    }
}

pub fn init_pools(universe: &BTreeSet<usize>, init_size: usize, seed: u64) -> Result<PoolState> {
    if init_size > universe.len() {
        return Err(Error::PoolTooLarge {
            requested: init_size,
            available: universe.len(),
        });
    }
    let mut ids: Vec<usize> = universe.iter().copied().collect();
    let mut rng = RngStream::new(seed, 0, 0).fork(SALT_INIT).rng();
    let (chosen, _) = ids.partial_shuffle(&mut rng, init_size);
    let labeled: BTreeSet<usize> = chosen.iter().copied().collect();
    let unlabeled = universe.difference(&labeled).copied().collect();
    Ok(PoolState {
        labeled,
        unlabeled,
        universe: universe.clone(),
    })
}

/// Images the loop works on. Pool sample ids index `pool`.
#[derive(Debug, Clone, Default)]
pub struct AlData {
    pub pool: Vec<RangeImage>,
    pub test: Vec<RangeImage>,
}

impl AlData {
    pub fn universe(&self) -> BTreeSet<usize> {
        (0..self.pool.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Size of the training set of this step's model.
    pub n_labeled: usize,
    pub test_miou: f64,
    pub mean_variance: f64,
    pub mean_bald: f64,
    pub train_iterations: usize,
    pub train_miou: f64,
    /// Samples acquired after this step's training, in selection order.
    pub selected: Vec<usize>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlRunRecord {
    pub config: AlConfig,
    pub steps: Vec<StepRecord>,
}

/// Test-set evaluation of a trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub miou: f64,
    pub mean_variance: f64,
    pub mean_bald: f64,
}

/// Deterministic mIoU plus mean MC variance and BALD over all valid test pixels.
pub fn evaluate(model: &dyn Scorer, test: &[RangeImage], iterations: usize) -> Result<Evaluation> {
    let classes = model.classes();
    let parts: Vec<(ConfusionMatrix, f64, f64, usize)> = test
        .par_iter()
        .enumerate()
        .map(|(id, img)| {
            let key = SampleKey::test(id);
            let pred = model.predict(img, key, iterations)?;
            let mut m = ConfusionMatrix::new(classes);
            for i in 0..img.len() {
                if img.valid[i] {
                    m.record(img.labels[i], pred[i])?;
                }
            }
            let t = model.predict_mc(img, key, iterations)?;
            let (var, bald, n) = uncertainty_sums(&t);
            Ok((m, var, bald, n))
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes);
    let (mut var, mut bald, mut n) = (0.0, 0.0, 0usize);
    for (m, v, b, k) in &parts {
        total.merge(m);
        var += v;
        bald += b;
        n += k;
    }
    let n = n.max(1) as f64;
    Ok(Evaluation {
        miou: mean_iou(&total)?,
        mean_variance: var / n,
        mean_bald: bald / n,
    })
}

fn uncertainty_sums(t: &McProbTensor) -> (f64, f64, usize) {
    let var: f64 = variance_map(t).valid_scores().sum();
    let bald_scores = bald_map(t);
    let n = bald_scores.valid_scores().count();
    (var, bald_scores.valid_scores().sum(), n)
}

/// Aggregated heuristic score of each given pool sample.
pub fn score_samples(
    model: &dyn Scorer,
    pool: &[RangeImage],
    ids: &[usize],
    kind: HeuristicKind,
    aggregation: Aggregation,
    iterations: usize,
) -> Result<Vec<SampleScore>> {
    ids.par_iter()
        .map(|&id| {
            let score = match kind {
                HeuristicKind::Random => 0.0,
                _ => {
                    let t = model.predict_mc(&pool[id], SampleKey::pool(id), iterations)?;
                    aggregate(&heuristic_map(&t, kind).expect("non-random heuristic"), aggregation)
                }
            };
            Ok(SampleScore { sample_id: id, score })
        })
        .collect()
}

/// One AL step: reset, train on L, evaluate on the test set and, when
/// `acquire` is set, move the next `budget` samples from U to L. Also returns
/// the scores of U the selection was made from (empty without acquisition).
pub fn run_step(
    state: &PoolState,
    cfg: &AlConfig,
    model: &mut dyn Scorer,
    data: &AlData,
    step: usize,
    acquire: bool,
) -> Result<(PoolState, StepRecord, Vec<SampleScore>)> {
    let start = Instant::now();
    if acquire && state.unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    model.set_step(step);
    model.reset();
    let labeled: Vec<(usize, &RangeImage)> = state.labeled.iter().map(|&id| (id, &data.pool[id])).collect();
    let report = model.train(&labeled, &cfg.da)?;
    let iterations = cfg.scorer.mc_iterations;
    let eval = evaluate(model, &data.test, iterations)?;

    let mut next = state.clone();
    let mut selected = Vec::new();
    let mut scores = Vec::new();
    if acquire {
        let ids: Vec<usize> = state.unlabeled.iter().copied().collect();
        scores = score_samples(model, &data.pool, &ids, cfg.heuristic, cfg.aggregation, iterations)?;
        let rng = RngStream::new(cfg.seed, 0, step as u64).fork(SALT_SELECT);
        selected = rank_and_select(&scores, cfg.budget, cfg.heuristic, &rng)?;
        next.annotate(&selected)?;
    }
    next.check()?;
    Ok((
        next,
        StepRecord {
            step,
            n_labeled: state.labeled.len(),
            test_miou: eval.miou,
            mean_variance: eval.mean_variance,
            mean_bald: eval.mean_bald,
            train_iterations: report.iterations,
            train_miou: report.final_train_miou(),
            selected,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        scores,
    ))
}

/// What a run reports after each step.
pub struct StepContext<'a> {
    pub record: &'a StepRecord,
    /// Pools the step's model was trained on.
    pub pools: &'a PoolState,
    pub model: &'a dyn Scorer,
    /// Aggregated scores of U behind this step's acquisition.
    pub scores: &'a [SampleScore],
}

/// Full run. `on_step` sees each step as soon as it is complete.
///
/// The run stops after `steps` models (at least one) or once the previous
/// step labeled the whole pool.
pub fn run(
    cfg: &AlConfig,
    model: &mut dyn Scorer,
    data: &AlData,
    mut on_step: impl FnMut(&StepContext) -> Result<()>,
) -> Result<AlRunRecord> {
    cfg.validate(data.pool.len())?;
    if data.test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let mut state = init_pools(&data.universe(), cfg.init_size, cfg.seed)?;
    state.check()?;
    let rows = cfg.steps.max(1);
    let mut record = AlRunRecord {
        config: cfg.clone(),
        steps: Vec::with_capacity(rows),
    };
    let mut seen = BTreeSet::new();
    for step in 0..rows {
        let expected = (cfg.init_size + step * cfg.budget).min(data.pool.len());
        if state.labeled.len() != expected {
            return Err(Error::PoolInvariant(format!(
                "step {step}: |L| = {}, expected {expected}",
                state.labeled.len()
            )));
        }
        let acquire = step + 1 < rows && !state.unlabeled.is_empty();
        let (next, rec, scores) = run_step(&state, cfg, model, data, step, acquire)?;
        if rec.selected.iter().any(|id| !seen.insert(*id)) {
            return Err(Error::PoolInvariant(format!("step {step} reselected a sample")));
        }
        info!(
            "step {step}: |L|={} test mIoU={:.4} ({:.1}s)",
            rec.n_labeled, rec.test_miou, rec.wall_time_s
        );
        on_step(&StepContext {
            record: &rec,
            pools: &state,
            model: &*model,
            scores: &scores,
        })?;
        record.steps.push(rec);
        state = next;
        if !acquire {
            break;
        }
    }
    Ok(record)
}

/// The four sorted score curves of the test-time augmentation analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TtDaCurves {
    pub labeled: Vec<SampleScore>,
    pub unlabeled: Vec<SampleScore>,
    pub augmented_labeled: Vec<SampleScore>,
    pub augmented_unlabeled: Vec<SampleScore>,
    /// Number of samples a step would acquire.
    pub budget: usize,
}

impl TtDaCurves {
    pub fn curves(&self) -> [(&'static str, &[SampleScore]); 4] {
        [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("ttda_labeled", &self.augmented_labeled),
            ("ttda_unlabeled", &self.augmented_unlabeled),
        ]
    }
}

pub fn mean_score(scores: &[SampleScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
}

/// Parameters of [`analyze_tt_da`].
#[derive(Debug, Clone)]
pub struct TtDaParams<'a> {
    pub da: &'a [AugmentationSpec],
    pub step: usize,
    pub seed: u64,
    pub iterations: usize,
    pub budget: usize,
    pub aggregation: Aggregation,
}

/// Aggregated BALD scores of L, U, augmented copies of L and augmented copies
/// of a uniform draw from U sized so that `|U| + |TT-DA(U)|` equals the pool.
///
/// The model is expected to have been trained on L without augmentation.
/// Augmented copies reuse their source sample's dropout stream, so with
/// identity transforms `TT-DA(L)` reproduces `L` exactly.
pub fn analyze_tt_da(model: &dyn Scorer, state: &PoolState, data: &AlData, p: &TtDaParams) -> Result<TtDaCurves> {
    let n = data.pool.len();
    let labeled: Vec<usize> = state.labeled.iter().copied().collect();
    let unlabeled: Vec<usize> = state.unlabeled.iter().copied().collect();
    let drawn: Vec<usize> = if unlabeled.is_empty() {
        Vec::new()
    } else {
        let size = n - unlabeled.len();
        let mut rng = RngStream::new(p.seed, 0, p.step as u64).fork(SALT_TTDA).rng();
        if size <= unlabeled.len() {
            let mut ids = unlabeled.clone();
            ids.partial_shuffle(&mut rng, size).0.to_vec()
        } else {
            (0..size).map(|_| unlabeled[rng.random_range(0..unlabeled.len())]).collect()
        }
    };

    let score_one = |img: &RangeImage, key: SampleKey| -> Result<f64> {
        let t = model.predict_mc(img, key, p.iterations)?;
        Ok(aggregate(&bald_map(&t), p.aggregation))
    };
    let plain = |ids: &[usize]| -> Result<Vec<SampleScore>> {
        ids.par_iter()
            .map(|&id| {
                Ok(SampleScore {
                    sample_id: id,
                    score: score_one(&data.pool[id], SampleKey::pool(id))?,
                })
            })
            .collect()
    };
    // copy `j` of sample `id` gets its own augmentation stream
    let augmented = |ids: &[usize]| -> Result<Vec<SampleScore>> {
        let mut copies = vec![0usize; ids.len()];
        let mut counts = std::collections::HashMap::new();
        for (c, id) in copies.iter_mut().zip(ids) {
            let k = counts.entry(*id).or_insert(0usize);
            *c = *k;
            *k += 1;
        }
        ids.par_iter()
            .zip(copies.par_iter())
            .enumerate()
            .map(|(slot, (&id, &copy))| {
                let stream = RngStream::new(p.seed, (id + copy * n) as u64, p.step as u64).fork(SALT_TTDA);
                let donor = &data.pool[ids[(slot + 1) % ids.len()]];
                let img = compose(p.da, &data.pool[id], Some(donor), &stream)?;
                let key = if copy == 0 {
                    SampleKey::pool(id)
                } else {
                    SampleKey::augmented(id + copy * n)
                };
                Ok(SampleScore {
                    sample_id: id,
                    score: score_one(&img, key)?,
                })
            })
            .collect()
    };

    let sort = |mut v: Vec<SampleScore>| {
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
        v
    };
    Ok(TtDaCurves {
        labeled: sort(plain(&labeled)?),
        unlabeled: sort(plain(&unlabeled)?),
        augmented_labeled: sort(augmented(&labeled)?),
        augmented_unlabeled: sort(augmented(&drawn)?),
        budget: p.budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_pools_sizes() {
        let d: BTreeSet<usize> = (0..6000).collect();
        let s = init_pools(&d, 240, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (240, 5760));
        s.check().unwrap();
        assert_eq!(s, init_pools(&d, 240, 1).unwrap());
        assert_ne!(s.labeled, init_pools(&d, 240, 2).unwrap().labeled);
        let all = init_pools(&d, 6000, 1).unwrap();
        assert!(all.unlabeled.is_empty());
        assert!(matches!(init_pools(&d, 6001, 1), Err(Error::PoolTooLarge { .. })));
    }

    #[test]
    fn pool_text_round_trip() {
        let d: BTreeSet<usize> = (0..20).collect();
        let s = init_pools(&d, 7, 3).unwrap();
        assert_eq!(PoolState::parse(&s.to_text()).unwrap(), s);
        assert!(PoolState::parse("labeled: 1 2\nunlabeled: 2 3\n").is_err());
        assert!(PoolState::parse("labeled: 1 2\n").is_err());
    }

    #[test]
    fn annotate_rejects_labeled_ids() {
        let d: BTreeSet<usize> = (0..10).collect();
        let mut s = init_pools(&d, 3, 0).unwrap();
        let l = *s.labeled.iter().next().unwrap();
        assert!(s.annotate(&[l]).is_err());
        let u = *s.unlabeled.iter().next().unwrap();
        s.annotate(&[u]).unwrap();
        s.check().unwrap();
        assert_eq!(s.labeled.len(), 4);
    }
}
