//! Ratio × pool-size ablation.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::experiment::{evaluate_regime, MetricsReport};
use super::Regime;
use crate::config::ExperimentConfig;
use crate::datasets::PatchDataset;
use crate::extractor::{ClassCentroid, ResNet};
use crate::histogan::GanCheckpoint;
use crate::selector::{generate_pool, nested_selection, pool_seed, score_pool, CandidateSample, SelectedImage};
use crate::{derive_seed, Error, Result};

/// One (pool size, ratio) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// Pool size in multiples of the class size N_i.
    pub pool_multiplier: usize,
    pub ratio: f64,
    pub feasible: bool,
    /// The configured ratio.
    pub is_default: bool,
    pub selected_ids: Vec<String>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "pool_multiplier",
            "ratio",
            "feasible",
            "default",
            "selected",
            "accuracy_mean",
            "accuracy_std",
            "auc_mean",
            "auc_std",
            "sensitivity_mean",
            "sensitivity_std",
            "specificity_mean",
            "specificity_std",
        ])?;
        for c in &self.cells {
            let mut row = vec![
                c.pool_multiplier.to_string(),
                c.ratio.to_string(),
                c.feasible.to_string(),
                c.is_default.to_string(),
                c.selected_ids.len().to_string(),
            ];
            match &c.metrics {
                Some(m) => {
                    for v in [m.accuracy, m.auc, m.sensitivity, m.specificity] {
                        row.push(v.mean.to_string());
                        row.push(v.std.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// A scored pool of `multiplier · N_i` candidates per class.
pub fn ablation_pool(
    checkpoint: &GanCheckpoint,
    extractor: &ResNet,
    centroids: &[ClassCentroid],
    dataset: &PatchDataset,
    config: &ExperimentConfig,
    multiplier: usize,
) -> Result<Vec<CandidateSample>> {
    let seed = derive_seed(pool_seed(config), multiplier as u64);
    let mut pool = generate_pool(checkpoint, 1.0, &dataset.class_sizes(), multiplier, seed)?;
    score_pool(&mut pool, extractor, centroids, config.selection.mc_runs, derive_seed(seed, 0x5c0e))?;
    Ok(pool)
}

/// Every ratio draws from the same scored pool of each size. Infeasible cells are kept, marked and
/// untrained; with `train` each feasible cell trains the configured number of selective-regime classifiers.
#[allow(clippy::too_many_arguments)]
pub fn sweep_ablation(
    checkpoint: &GanCheckpoint,
    extractor: &ResNet,
    centroids: &[ClassCentroid],
    dataset: &PatchDataset,
    config: &ExperimentConfig,
    pool_multipliers: &[usize],
    ratios: &[f64],
    train: bool,
) -> Result<AblationGrid> {
    let sizes = dataset.class_sizes();
    let mut grid = AblationGrid::default();
    for &m in pool_multipliers {
        let pool = ablation_pool(checkpoint, extractor, centroids, dataset, config, m)?;
        for &r in ratios {
            let picked = nested_selection(&pool, &sizes, r)?;
            let is_default = (r - config.selection.ratio).abs() < 1e-12;
            let Some(picked) = picked else {
                info!("pool {m}N, ratio {r}: infeasible");
                grid.cells.push(AblationCell { pool_multiplier: m, ratio: r, feasible: false, is_default, selected_ids: vec![], metrics: None });
                continue;
            };
            let extra: Vec<SelectedImage> = picked
                .iter()
                .map(|&i| SelectedImage { id: pool[i].id.clone(), image: pool[i].image.clone(), label: pool[i].assigned_label })
                .collect();
            let metrics = if train && !extra.is_empty() {
                Some(evaluate_regime(Regime::Selective, dataset, &extra, config, None)?)
            } else {
                None
            };
            grid.cells.push(AblationCell {
                pool_multiplier: m,
                ratio: r,
                feasible: true,
                is_default,
                selected_ids: extra.into_iter().map(|e| e.id).collect(),
                metrics,
            });
        }
    }
    Ok(grid)
}
