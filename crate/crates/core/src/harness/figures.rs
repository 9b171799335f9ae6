//! Plot emission from the files of a run directory.

use std::collections::HashMap;
use std::path::PathBuf;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::experiment::{load_prepared, RunLayout};
use super::plots::{attention_mass, attention_overlay, plot_fid_curve, plot_scatter, save_overlays, ScatterGroup, PALETTE};
use super::tsne::tsne;
use crate::config::ExperimentConfig;
use crate::datasets::PatchImage;
use crate::extractor::ResNet;
use crate::fid::FidSeries;
use crate::histogan::{noise_from_seeds, split_images};
use crate::selector::{generate_pool, pool_seed, read_selection_csv, SELECTION_CSV};
use crate::{derive_seed, Error, Result};

pub const FID_PLOT: &str = "fid_curve.svg";
pub const TSNE_PLOT: &str = "tsne.svg";
pub const ATTENTION_PLOT: &str = "attention.png";
const ATTENTION_PER_CLASS: usize = 2;

/// Raw/smoothed FID curve.
pub fn emit_fid_plot(config: &ExperimentConfig, layout: &RunLayout) -> Result<PathBuf> {
    let series = FidSeries::read_csv(&layout.fid_series(), config.selection.ema_alpha)?;
    let path = layout.plots().join(FID_PLOT);
    plot_fid_curve(&series, &path)?;
    Ok(path)
}

fn subsample<T: Copy>(items: Vec<T>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut items = items;
    if items.len() > cap {
        items.shuffle(rng);
        items.truncate(cap);
    }
    items
}

/// t-SNE of penultimate extractor features: real training patches, selected and rejected candidates.
/// The candidate pool is regenerated from the best checkpoint and matched to the selection CSV by id.
pub fn emit_tsne_plot(config: &ExperimentConfig, layout: &RunLayout) -> Result<PathBuf> {
    let dataset = load_prepared(config, layout)?;
    let extractor = ResNet::load(&layout.extractor())?;
    let ckpt = layout.best_checkpoint()?;
    let rows = read_selection_csv(&layout.selection().join(SELECTION_CSV))?;
    let passed: HashMap<String, bool> = rows.into_iter().map(|r| (r.id, r.passed_distance)).collect();
    let s = &config.selection;
    let pool = generate_pool(&ckpt, s.ratio, &dataset.class_sizes(), s.pool_multiplier, pool_seed(config))?;
    if pool.iter().any(|c| !passed.contains_key(&c.id)) {
        return Err(Error::Validation("regenerated pool does not match the selection CSV".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x75e));
    let cap = config.tsne.max_points;
    let real: Vec<&PatchImage> = subsample(dataset.train_patches().iter().map(|p| &p.image).collect(), cap, &mut rng);
    let selected: Vec<&PatchImage> =
        subsample(pool.iter().filter(|c| passed[&c.id]).map(|c| &c.image).collect(), cap, &mut rng);
    let rejected: Vec<&PatchImage> =
        subsample(pool.iter().filter(|c| !passed[&c.id]).map(|c| &c.image).collect(), cap, &mut rng);
    let all: Vec<&PatchImage> = real.iter().chain(&selected).chain(&rejected).copied().collect();
    let pred = extractor.predict(&all)?;
    let y = tsne(&pred.features, pred.feature_dim, &config.tsne, derive_seed(config.seed, 0x75e1))?;
    let (a, b) = (real.len(), real.len() + selected.len());
    let groups = [
        ScatterGroup { name: "real", points: &y[..a], color: PALETTE[0] },
        ScatterGroup { name: "selected", points: &y[a..b], color: PALETTE[2] },
        ScatterGroup { name: "rejected", points: &y[b..], color: PALETTE[3] },
    ];
    let path = layout.plots().join(TSNE_PLOT);
    plot_scatter("t-SNE of extractor features", &groups, &path)?;
    Ok(path)
}

/// Stage-I attention of the best generator over a few generated images per class.
pub fn emit_attention_plot(config: &ExperimentConfig, layout: &RunLayout) -> Result<PathBuf> {
    let generator = layout.best_checkpoint()?.generator()?;
    let classes = generator.arch.classes;
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, ATTENTION_PER_CLASS)).collect();
    let seeds: Vec<u64> = (0..labels.len() as u64).map(|i| derive_seed(config.seed, 0xa77e_0000 + i)).collect();
    let out = generator.generate(&noise_from_seeds(&seeds, generator.arch.noise_dim), &labels)?;
    let images = split_images(out.pyramid.last().expect("at least one stage"))?;
    let n = out.attention_size.0 * out.attention_size.1;
    let mut tiles = Vec::with_capacity(images.len());
    for (b, img) in images.iter().enumerate() {
        let mass = attention_mass(&out.attention.data()[b * n * n..(b + 1) * n * n], n)?;
        tiles.push(attention_overlay(img, &mass, out.attention_size)?);
    }
    let path = layout.plots().join(ATTENTION_PLOT);
    save_overlays(&tiles, &path)?;
    Ok(path)
}

/// Every plot whose inputs exist; a plot that cannot be drawn is skipped with a warning.
/// Fails only when no plot could be drawn.
pub fn emit_plots(config: &ExperimentConfig, layout: &RunLayout) -> Result<Vec<PathBuf>> {
    let plots = layout.plots();
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut emitted = Vec::new();
    let mut reasons = Vec::new();
    type Emitter = fn(&ExperimentConfig, &RunLayout) -> Result<PathBuf>;
    let emitters: [(&str, Emitter); 3] =
        [("FID curve", emit_fid_plot), ("t-SNE", emit_tsne_plot), ("attention overlay", emit_attention_plot)];
    for (name, f) in emitters {
        match f(config, layout) {
            Ok(p) => emitted.push(p),
            Err(e) => {
                warn!("skipping {name} plot: {e}");
                reasons.push(format!("{name}: {e}"));
            }
        }
    }
    if emitted.is_empty() {
        return Err(Error::Validation(format!("no plot could be drawn ({})", reasons.join("; "))));
    }
    Ok(emitted)
}
