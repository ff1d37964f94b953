//! Flat experiment configuration and dataset preparation.
//!
//! Keys follow the names of the usual experiment-settings table:
//!
//! ```toml
//! total_pool_size = 6000
//! test_pool_size = 2000
//! init_set_size = 240
//! budget = 240
//! al_steps = 25
//! aggregation = "sum"
//! mc_iterations = 20
//! mc_dropout = 0.2
//! learning_rate = 0.01
//! lr_decay = 0.99
//! weight_decay = 0.0001
//! batch_size = 16
//! eval_period = 500
//! patience = 15
//! max_iterations = 100000
//! augmentations = ["random_dropout_mask", "cyclic_shift"]
//! ttda_augmentations = ["cyclic_shift"]
//! ```

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::al_loop::{AlConfig, AlData};
use crate::augmentation::{Augmentation, AugmentationSpec, CoarseDropoutParams};
use crate::dataset_io::{read_scan, split_indices, ClassId, DatasetManifest, LabelMap};
use crate::error::{Error, Result};
use crate::projection::{project, RangeImage, SensorConfig};
use crate::scorer::{BuiltinScorer, EarlyStopMetric, ExternalScorer, Scorer, ScorerConfig, ScorerKind, TrainConfig};
use crate::synth::{generate_scene, SceneSpec};
use crate::uncertainty::{Aggregation, HeuristicKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub total_pool_size: usize,
    pub test_pool_size: usize,
    pub init_set_size: usize,
    pub budget: usize,
    pub al_steps: usize,
    pub aggregation: Aggregation,
    pub mc_iterations: usize,
    pub mc_dropout: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_period: usize,
    pub patience: usize,
    pub max_iterations: usize,
    pub early_stop: EarlyStopMetric,
    /// Labeled pixels sampled per image and iteration; 0 uses every pixel.
    pub pixels_per_image: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    /// Tensors of an external model; the built-in scorer is used when unset.
    pub external_predictions: Option<PathBuf>,
    /// Class count of synthetic data; real data takes it from the label map.
    pub classes: usize,
    /// Augmentations used by runs with augmentation switched on, by name with
    /// default parameters.
    pub augmentations: Vec<String>,
    pub augmentation_probability: f64,
    /// Classes pasted by `instance_cut_paste`.
    pub cut_paste_classes: Vec<ClassId>,
    /// Fully specified augmentations, applied after the named ones.
    pub augmentation: Vec<AugmentationSpec>,
    /// Augmentations of the test-time analysis. Transforms that delete pixels
    /// lower a summed score by themselves, so the default leaves them out.
    pub ttda_augmentations: Vec<String>,
    /// Near-duplicate variants per synthetic base scene.
    pub synthetic_variants: usize,
}

impl Default for ExperimentConfig {
    /// Full-scale settings.
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            total_pool_size: 6000,
            test_pool_size: 2000,
            init_set_size: 240,
            budget: 240,
            al_steps: 25,
            aggregation: Aggregation::Sum,
            mc_iterations: 20,
            mc_dropout: 0.2,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            eval_period: t.eval_period,
            patience: t.patience,
            max_iterations: t.max_iterations,
            early_stop: t.early_stop_metric,
            pixels_per_image: t.pixels_per_image,
            image_width: 1024,
            image_height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            external_predictions: None,
            classes: 4,
            augmentations: vec![
                "random_dropout_mask".into(),
                "coarse_dropout".into(),
                "gaussian_depth_noise".into(),
                "cyclic_shift".into(),
                "instance_cut_paste".into(),
            ],
            augmentation_probability: 0.5,
            cut_paste_classes: vec![2, 3],
            augmentation: Vec::new(),
            ttda_augmentations: vec![
                "gaussian_depth_noise".into(),
                "cyclic_shift".into(),
                "instance_cut_paste".into(),
            ],
            synthetic_variants: 5,
        }
    }
}

impl ExperimentConfig {
    /// Ten-times smaller pools with a laptop training budget and a 128x16 image.
    ///
    /// The projection puts elevation `-fov_up` on the bottom row and
    /// `+fov_down` on the top row, so the preset swaps the two angles to look
    /// at the road from +3 deg down to -25 deg.
    pub fn desk_scale() -> Self {
        let t = TrainConfig::desk();
        Self {
            total_pool_size: 600,
            test_pool_size: 200,
            init_set_size: 24,
            budget: 24,
            al_steps: 25,
            mc_iterations: 8,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            eval_period: t.eval_period,
            patience: t.patience,
            max_iterations: t.max_iterations,
            pixels_per_image: t.pixels_per_image,
            image_width: 128,
            image_height: 16,
            fov_up_deg: 25.0,
            fov_down_deg: 3.0,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.da_specs()?;
        cfg.ttda_specs()?;
        Ok(cfg)
    }

    /// Like [`parse`](Self::parse) but unspecified keys fall back to `base`.
    pub fn parse_over(text: &str, base: &Self) -> Result<Self> {
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        table.extend(over);
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.da_specs()?;
        cfg.ttda_specs()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sensor(&self) -> SensorConfig {
        SensorConfig::from_degrees(self.fov_up_deg, self.fov_down_deg, self.image_width, self.image_height)
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            classes: self.classes,
            variants: self.synthetic_variants,
            seed,
            sensor: self.sensor(),
            ..SceneSpec::default()
        }
    }

    /// Augmentations of a run with augmentation switched on.
    pub fn da_specs(&self) -> Result<Vec<AugmentationSpec>> {
        let mut specs = self.named_specs(&self.augmentations)?;
        specs.extend(self.augmentation.iter().cloned());
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    /// Augmentations of the test-time analysis.
    pub fn ttda_specs(&self) -> Result<Vec<AugmentationSpec>> {
        self.named_specs(&self.ttda_augmentations)
    }

    fn named_specs(&self, names: &[String]) -> Result<Vec<AugmentationSpec>> {
        let mut specs = Vec::new();
        for name in names {
            let transform = match name.as_str() {
                "random_dropout_mask" => Augmentation::random_dropout_mask(),
                "coarse_dropout" => Augmentation::CoarseDropout(
                    CoarseDropoutParams::default().scaled_to(self.image_width, self.image_height),
                ),
                "gaussian_depth_noise" => Augmentation::gaussian_depth_noise(),
                "gaussian_remission_noise" => Augmentation::gaussian_remission_noise(),
                "cyclic_shift" => Augmentation::cyclic_shift(),
                "instance_cut_paste" => Augmentation::instance_cut_paste(self.cut_paste_classes.clone()),
                other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
            };
            let spec = AugmentationSpec::new(transform, self.augmentation_probability);
            spec.validate()?;
            specs.push(spec);
        }
        Ok(specs)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            kind: match &self.external_predictions {
                Some(dir) => ScorerKind::External { dir: dir.clone() },
                None => ScorerKind::Builtin,
            },
            mc_iterations: self.mc_iterations,
            dropout_rate: self.mc_dropout,
            train: TrainConfig {
                learning_rate: self.learning_rate,
                lr_decay: self.lr_decay,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                max_iterations: self.max_iterations,
                eval_period: self.eval_period,
                patience: self.patience,
                early_stop_metric: self.early_stop,
                pixels_per_image: self.pixels_per_image,
            },
        }
    }

    pub fn al_config(&self, heuristic: HeuristicKind, with_da: bool, seed: u64) -> Result<AlConfig> {
        Ok(AlConfig {
            init_size: self.init_set_size,
            budget: self.budget,
            steps: self.al_steps,
            heuristic,
            aggregation: self.aggregation,
            seed,
            scorer: self.scorer_config(),
            da: if with_da { self.da_specs()? } else { Vec::new() },
        })
    }
}

/// Scorer described by `cfg`.
pub fn build_scorer(cfg: &ScorerConfig, classes: usize, seed: u64) -> Result<Box<dyn Scorer>> {
    Ok(match &cfg.kind {
        ScorerKind::Builtin => Box::new(BuiltinScorer::new(classes, cfg.clone(), seed)?),
        ScorerKind::External { dir } => Box::new(ExternalScorer::new(dir.clone(), classes)),
    })
}

fn project_all(clouds: Vec<crate::dataset_io::PointCloud>, sensor: &SensorConfig) -> Result<Vec<RangeImage>> {
    clouds.par_iter().map(|c| project(c, sensor)).collect()
}

/// Synthetic pool and test images for `seed`; the scene generator shares the seed.
pub fn synthetic_data(cfg: &ExperimentConfig, seed: u64) -> Result<AlData> {
    let spec = cfg.scene_spec(seed);
    let total = cfg.total_pool_size + cfg.test_pool_size;
    let split = split_indices(total, cfg.total_pool_size, cfg.test_pool_size, seed)?;
    let sensor = cfg.sensor();
    let make = |ids: &[usize]| -> Result<Vec<RangeImage>> {
        ids.par_iter()
            .map(|&i| project(&generate_scene(&spec, i)?, &sensor))
            .collect()
    };
    Ok(AlData {
        pool: make(&split.pool)?,
        test: make(&split.test)?,
    })
}

/// Pool and test images read from a manifest; returns the manifest index of
/// each pool sample alongside.
pub fn manifest_data(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    map: &LabelMap,
    seed: u64,
) -> Result<(AlData, Vec<usize>)> {
    let split = split_indices(manifest.len(), cfg.total_pool_size, cfg.test_pool_size, seed)?;
    let load = |ids: &[usize]| -> Result<Vec<RangeImage>> {
        let clouds = ids
            .par_iter()
            .map(|&i| {
                let e = &manifest.entries[i];
                read_scan(&e.scan, Some(&e.labels), map)
            })
            .collect::<Result<Vec<_>>>()?;
        project_all(clouds, &cfg.sensor())
    };
    Ok((
        AlData {
            pool: load(&split.pool)?,
            test: load(&split.test)?,
        },
        split.pool,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_base_values() {
        let base = ExperimentConfig::desk_scale();
        let cfg = ExperimentConfig::parse_over("budget = 12\nmc_dropout = 0.3\n", &base).unwrap();
        assert_eq!(cfg.budget, 12);
        assert_eq!(cfg.mc_dropout, 0.3);
        assert_eq!(cfg.total_pool_size, 600);
        assert!(ExperimentConfig::parse_over("bugdet = 1\n", &base).is_err());
        assert!(ExperimentConfig::parse_over("augmentations = [\"blur\"]\n", &base).is_err());
    }

    #[test]
    fn table_defaults() {
        let c = ExperimentConfig::default().al_config(HeuristicKind::Bald, false, 0).unwrap();
        assert_eq!((c.init_size, c.budget, c.steps), (240, 240, 25));
        assert_eq!(c.scorer.dropout_rate, 0.2);
        assert_eq!(c.scorer.train.max_iterations, 100_000);
        assert!(c.da.is_empty());
        let d = ExperimentConfig::desk_scale().al_config(HeuristicKind::Bald, true, 0).unwrap();
        assert_eq!((d.init_size, d.budget, d.steps, d.scorer.mc_iterations), (24, 24, 25, 8));
        assert_eq!(d.da.len(), 5);
        assert_eq!(ExperimentConfig::desk_scale().ttda_specs().unwrap().len(), 3);
    }
}
