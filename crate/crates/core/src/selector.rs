//! Selective augmentation: over-generate a labelled candidate pool, keep the
//! lower-entropy half of each class, then the half of those closest to the
//! class centroid in extractor feature space.
//!
//! "Half" is an exact count, `⌊n/2⌋` per class after a stable sort, so the
//! final set holds `round(r·N_i)` images per class whenever the pool is
//! `4·round(r·N_i)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datasets::{round_half_up, PatchDataset, PatchImage};
use crate::extractor::{
    class_centroid, feature_distance, mc_forward_chunked, predictive_entropy, write_scores_csv, ClassCentroid,
    ResNet, ScoreRecord,
};
use crate::histogan::GanCheckpoint;
use crate::{derive_seed, Error, Result};

pub const REPORT_FILE: &str = "selection_report.json";
pub const SELECTION_CSV: &str = "selection.csv";
pub const SCORES_CSV: &str = "candidate_scores.csv";
pub const SELECTED_DIR: &str = "selected";

/// One generated candidate and its scores.
#[derive(Clone, Debug)]
pub struct CandidateSample {
    pub id: String,
    pub image: PatchImage,
    /// The label the sample will carry into training.
    pub assigned_label: usize,
    /// The label the generator was conditioned on; differs from `assigned_label` only for planted outliers.
    pub generated_label: usize,
    pub seed: u64,
    pub entropy: f64,
    pub distance: f64,
    pub passed_entropy: bool,
    pub passed_distance: bool,
}

/// `round(r·N_i)` per class.
pub fn class_quotas(ratio: f64, class_sizes: &[usize]) -> Vec<usize> {
    class_sizes.iter().map(|&n| round_half_up(ratio * n as f64)).collect()
}

/// Candidates to generate per class: `multiplier · round(r·N_i)`.
pub fn pool_sizes(ratio: f64, class_sizes: &[usize], multiplier: usize) -> Vec<usize> {
    class_quotas(ratio, class_sizes).into_iter().map(|q| q * multiplier).collect()
}

/// Generates the unscored pool from a checkpoint's generator. Candidate `j` of class `i` uses
/// noise seed `derive_seed(seed, i << 32 | j)`.
pub fn generate_pool(
    checkpoint: &GanCheckpoint,
    ratio: f64,
    class_sizes: &[usize],
    multiplier: usize,
    seed: u64,
) -> Result<Vec<CandidateSample>> {
    if !(ratio > 0.0) || multiplier == 0 {
        return Err(Error::Validation(format!("ratio {ratio} and multiplier {multiplier} must be positive")));
    }
    if checkpoint.class_count != class_sizes.len() {
        return Err(Error::Validation(format!(
            "checkpoint was trained on {} classes, dataset has {}",
            checkpoint.class_count,
            class_sizes.len()
        )));
    }
    let generator = checkpoint.generator()?;
    let mut labels = Vec::new();
    let mut seeds = Vec::new();
    let mut ids = Vec::new();
    for (class, &n) in pool_sizes(ratio, class_sizes, multiplier).iter().enumerate() {
        for j in 0..n {
            labels.push(class);
            seeds.push(derive_seed(seed, ((class as u64) << 32) | j as u64));
            ids.push(format!("c{class}_{j:05}"));
        }
    }
    let images = generator.generate_images(&labels, &seeds)?;
    Ok(images
        .into_iter()
        .zip(labels)
        .zip(seeds)
        .zip(ids)
        .map(|(((image, label), seed), id)| CandidateSample {
            id,
            image,
            assigned_label: label,
            generated_label: label,
            seed,
            entropy: f64::NAN,
            distance: f64::NAN,
            passed_entropy: false,
            passed_distance: false,
        })
        .collect())
}

/// One centroid per class from the training split.
pub fn class_centroids(net: &ResNet, dataset: &PatchDataset, with_dropout: bool, seed: u64) -> Result<Vec<ClassCentroid>> {
    let by_class = dataset.train_by_class();
    (0..dataset.class_count())
        .map(|c| {
            let images: Vec<&PatchImage> = by_class.get(&c).map(|v| v.iter().map(|p| &p.image).collect()).unwrap_or_default();
            class_centroid(net, c, &images, with_dropout, derive_seed(seed, 0xce00 + c as u64))
        })
        .collect()
}

/// Fills entropy and centroid distance of every candidate from `k` MC-dropout passes.
/// Candidate `j` draws its dropout masks from stream `j` of `seed`.
pub fn score_pool(
    pool: &mut [CandidateSample],
    net: &ResNet,
    centroids: &[ClassCentroid],
    k: usize,
    seed: u64,
) -> Result<()> {
    let images: Vec<PatchImage> = pool.iter().map(|c| c.image.clone()).collect();
    let refs: Vec<&PatchImage> = images.iter().collect();
    mc_forward_chunked(net, &refs, k, seed, |first, sets| {
        for (j, runs) in sets.iter().enumerate() {
            let cand = &mut pool[first + j];
            let centroid = centroid_of(centroids, cand.assigned_label)?;
            cand.entropy = predictive_entropy(runs);
            cand.distance = feature_distance(runs, centroid)?;
        }
        Ok(())
    })
}

fn centroid_of(centroids: &[ClassCentroid], class: usize) -> Result<&ClassCentroid> {
    centroids
        .iter()
        .find(|c| c.class == class)
        .ok_or_else(|| Error::Validation(format!("no centroid for class {class}")))
}

/// Per class, the `⌊n/2⌋` positions with the smallest score; ties go to the earlier position.
fn lower_half(classes: &[usize], scores: &[f64]) -> Result<Vec<bool>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("candidate {i} has a non-finite score")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut keep = vec![false; classes.len()];
    for idx in groups.values_mut() {
        idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in &idx[..idx.len() / 2] {
            keep[i] = true;
        }
    }
    Ok(keep)
}

/// Positions in `pool` that survive the per-class entropy halving.
pub fn entropy_filter(pool: &[CandidateSample]) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Validation("empty candidate pool".into()));
    }
    let classes: Vec<usize> = pool.iter().map(|c| c.assigned_label).collect();
    let scores: Vec<f64> = pool.iter().map(|c| c.entropy).collect();
    Ok(lower_half(&classes, &scores)?.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
}

/// Positions in `survivors` that survive the per-class distance halving.
pub fn distance_filter(survivors: &[CandidateSample], centroids: &[ClassCentroid]) -> Result<Vec<usize>> {
    for c in survivors {
        centroid_of(centroids, c.assigned_label)?;
    }
    let classes: Vec<usize> = survivors.iter().map(|c| c.assigned_label).collect();
    let scores: Vec<f64> = survivors.iter().map(|c| c.distance).collect();
    Ok(lower_half(&classes, &scores)?.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    pub name: String,
    pub real_count: usize,
    pub quota: usize,
    pub pool_size: usize,
    pub entropy_median: Option<f64>,
    pub distance_median: Option<f64>,
    pub after_entropy: usize,
    pub selected: usize,
}

/// Audit record of one selection run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub ratio: f64,
    pub pool_multiplier: usize,
    pub mc_runs: usize,
    pub seed: u64,
    pub checkpoint_epoch: usize,
    pub config_fingerprint: String,
    pub classes: Vec<ClassSelection>,
    pub pool_ids: Vec<String>,
    pub after_entropy_ids: Vec<String>,
    pub selected_ids: Vec<String>,
    pub warnings: Vec<String>,
    /// Set when a stage failed; the remaining fields describe what completed.
    pub failure: Option<String>,
}

impl SelectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serialisable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SelectionReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Applies both filters to a scored pool, setting the pass flags, and returns the selected positions.
pub fn apply_filters(pool: &mut [CandidateSample], centroids: Option<&[ClassCentroid]>) -> Result<Vec<usize>> {
    for c in pool.iter_mut() {
        c.passed_entropy = false;
        c.passed_distance = false;
    }
    let x1 = entropy_filter(pool)?;
    for &i in &x1 {
        pool[i].passed_entropy = true;
    }
    let survivors: Vec<CandidateSample> = x1.iter().map(|&i| pool[i].clone()).collect();
    let kept = match centroids {
        Some(c) => distance_filter(&survivors, c)?,
        None => {
            let classes: Vec<usize> = survivors.iter().map(|c| c.assigned_label).collect();
            let scores: Vec<f64> = survivors.iter().map(|c| c.distance).collect();
            lower_half(&classes, &scores)?.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
        }
    };
    let selected: Vec<usize> = kept.iter().map(|&j| x1[j]).collect();
    for &i in &selected {
        pool[i].passed_distance = true;
    }
    Ok(selected)
}

/// Per-class summary of a filtered pool.
pub fn summarize(pool: &[CandidateSample], class_names: &[String], class_sizes: &[usize], ratio: f64) -> Vec<ClassSelection> {
    let quotas = class_quotas(ratio, class_sizes);
    (0..class_names.len())
        .map(|c| {
            let members: Vec<&CandidateSample> = pool.iter().filter(|s| s.assigned_label == c).collect();
            let x1: Vec<&&CandidateSample> = members.iter().filter(|s| s.passed_entropy).collect();
            ClassSelection {
                class: c,
                name: class_names[c].clone(),
                real_count: class_sizes[c],
                quota: quotas[c],
                pool_size: members.len(),
                entropy_median: median(members.iter().map(|s| s.entropy).filter(|v| v.is_finite()).collect()),
                distance_median: median(x1.iter().map(|s| s.distance).filter(|v| v.is_finite()).collect()),
                after_entropy: x1.len(),
                selected: members.iter().filter(|s| s.passed_distance).count(),
            }
        })
        .collect()
}

/// One line of the selection CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub id: String,
    pub class: usize,
    pub entropy: f64,
    pub distance: f64,
    pub passed_entropy: bool,
    pub passed_distance: bool,
}

/// Writes `id,class,entropy,distance,passed_entropy,passed_distance` for every candidate.
pub fn write_selection_csv(path: &Path, pool: &[CandidateSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in pool {
        w.serialize(SelectionRow {
            id: c.id.clone(),
            class: c.assigned_label,
            entropy: c.entropy,
            distance: c.distance,
            passed_entropy: c.passed_entropy,
            passed_distance: c.passed_distance,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_selection_csv(path: &Path) -> Result<Vec<SelectionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A selected image with the label it trains under.
#[derive(Clone, Debug)]
pub struct SelectedImage {
    pub id: String,
    pub image: PatchImage,
    pub label: usize,
}

/// Selected images previously written under `dir/selected/<class>/`.
pub fn load_selected(dir: &Path, class_names: &[String]) -> Result<Vec<SelectedImage>> {
    load_class_folders(&dir.join(SELECTED_DIR), class_names)
}

/// PNGs under `root/<class>/`, labelled by folder, in file-name order; missing folders are empty.
pub fn load_class_folders(root: &Path, class_names: &[String]) -> Result<Vec<SelectedImage>> {
    let mut out = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let sub = root.join(name);
        if !sub.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        for f in files {
            let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push(SelectedImage { id, image: PatchImage::load_png(&f)?, label });
        }
    }
    Ok(out)
}

/// Everything a selection run produced.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub pool: Vec<CandidateSample>,
    pub selected: Vec<usize>,
    pub report: SelectionReport,
}

impl SelectionOutcome {
    pub fn selected_images(&self) -> Vec<SelectedImage> {
        self.selected
            .iter()
            .map(|&i| {
                let c = &self.pool[i];
                SelectedImage { id: c.id.clone(), image: c.image.clone(), label: c.assigned_label }
            })
            .collect()
    }
}

/// Where a run's pool comes from: generated from a checkpoint, or supplied (already generated) by the caller.
pub enum PoolSource<'a> {
    Generate(&'a GanCheckpoint),
    Given { pool: Vec<CandidateSample>, checkpoint_epoch: usize },
}

/// Noise seed of the candidate pool of a run.
pub fn pool_seed(config: &ExperimentConfig) -> u64 {
    derive_seed(config.seed, 0x9001)
}

/// Generation, scoring and both filters, writing the report, CSVs and selected images to `out`.
/// The report is written even when a stage fails, with `failure` set.
pub fn run_selection(
    source: PoolSource<'_>,
    net: &ResNet,
    centroids: &[ClassCentroid],
    dataset: &PatchDataset,
    config: &ExperimentConfig,
    out: &Path,
) -> Result<SelectionOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sel = &config.selection;
    let class_sizes = dataset.class_sizes();
    let class_names = &dataset.profile().class_names;
    let mut report = SelectionReport {
        ratio: sel.ratio,
        pool_multiplier: sel.pool_multiplier,
        mc_runs: sel.mc_runs,
        seed: config.seed,
        checkpoint_epoch: 0,
        config_fingerprint: config.fingerprint(),
        classes: vec![],
        pool_ids: vec![],
        after_entropy_ids: vec![],
        selected_ids: vec![],
        warnings: vec![],
        failure: None,
    };
    for (c, q) in class_quotas(sel.ratio, &class_sizes).iter().enumerate() {
        if *q == 0 {
            let msg = format!("class {} quota round({} * {}) is 0; it contributes no images", class_names[c], sel.ratio, class_sizes[c]);
            warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    let mut pool = Vec::new();
    let result = (|| -> Result<Vec<usize>> {
        pool = match source {
            PoolSource::Generate(ckpt) => {
                report.checkpoint_epoch = ckpt.epoch;
                generate_pool(ckpt, sel.ratio, &class_sizes, sel.pool_multiplier, pool_seed(config))?
            }
            PoolSource::Given { pool, checkpoint_epoch } => {
                report.checkpoint_epoch = checkpoint_epoch;
                pool
            }
        };
        report.pool_ids = pool.iter().map(|c| c.id.clone()).collect();
        score_pool(&mut pool, net, centroids, sel.mc_runs, derive_seed(config.seed, 0x5c0e))?;
        let selected = apply_filters(&mut pool, Some(centroids))?;
        Ok(selected)
    })();
    report.classes = summarize(&pool, class_names, &class_sizes, sel.ratio);
    report.after_entropy_ids = pool.iter().filter(|c| c.passed_entropy).map(|c| c.id.clone()).collect();
    let selected = match result {
        Ok(s) => s,
        Err(e) => {
            report.failure = Some(e.to_string());
            report.save(&out.join(REPORT_FILE))?;
            return Err(e);
        }
    };
    report.selected_ids = selected.iter().map(|&i| pool[i].id.clone()).collect();
    report.save(&out.join(REPORT_FILE))?;
    write_selection_csv(&out.join(SELECTION_CSV), &pool)?;
    let records: Vec<ScoreRecord> = pool
        .iter()
        .map(|c| ScoreRecord { id: c.id.clone(), label: c.assigned_label, entropy: c.entropy, distance: c.distance, k: sel.mc_runs })
        .collect();
    write_scores_csv(&out.join(SCORES_CSV), &records)?;
    let root = out.join(SELECTED_DIR);
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    for name in class_names {
        let d = root.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for &i in &selected {
        let c = &pool[i];
        c.image.save_png(&root.join(&class_names[c.assigned_label]).join(format!("{}.png", c.id)))?;
    }
    Ok(SelectionOutcome { pool, selected, report })
}

/// Ratio-sweep selection from one fixed scored pool: the entropy half of the pool, then the first
/// `round(r·N_i)` of it by distance. `None` when some class quota exceeds half of its entropy
/// survivors, the largest set the two halvings can deliver.
pub fn nested_selection(pool: &[CandidateSample], class_sizes: &[usize], ratio: f64) -> Result<Option<Vec<usize>>> {
    let x1 = entropy_filter(pool)?;
    let quotas = class_quotas(ratio, class_sizes);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &x1 {
        by_class.entry(pool[i].assigned_label).or_default().push(i);
    }
    let mut selected = Vec::new();
    for (class, &q) in quotas.iter().enumerate() {
        let mut members = by_class.remove(&class).unwrap_or_default();
        if q > members.len() / 2 {
            return Ok(None);
        }
        members.sort_by(|&a, &b| pool[a].distance.total_cmp(&pool[b].distance).then(a.cmp(&b)));
        selected.extend_from_slice(&members[..q]);
    }
    selected.sort_unstable();
    Ok(Some(selected))
}

/// Pool with fixed scores and 1×1 placeholder images, for exercising the filters.
pub fn scored_pool(labels: &[usize], entropies: &[f64], distances: &[f64]) -> Vec<CandidateSample> {
    let blank = PatchImage::new(1, 1, vec![0.0; 3]).expect("valid 1x1 image");
    labels
        .iter()
        .zip(entropies)
        .zip(distances)
        .enumerate()
        .map(|(j, ((&l, &e), &d))| CandidateSample {
            id: format!("c{l}_{j:05}"),
            image: blank.clone(),
            assigned_label: l,
            generated_label: l,
            seed: j as u64,
            entropy: e,
            distance: d,
            passed_entropy: false,
            passed_distance: false,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_arithmetic() {
        assert_eq!(pool_sizes(0.5, &[4], 4), vec![8]);
        assert_eq!(pool_sizes(0.5, &[10, 20], 4), vec![20, 40]);
        assert_eq!(pool_sizes(0.5, &[10, 20], 1), vec![5, 10]);
        assert_eq!(class_quotas(0.5, &[60, 40]), vec![30, 20]);
        assert_eq!(class_quotas(0.1, &[3, 5]), vec![0, 1]);
    }

    #[test]
    fn entropy_halving_examples() {
        let pool = scored_pool(&[0; 4], &[0.1, 0.9, 0.2, 0.8], &[0.0; 4]);
        assert_eq!(entropy_filter(&pool).unwrap(), vec![0, 2]);
        let flat = scored_pool(&[0; 6], &[0.5; 6], &[0.0; 6]);
        assert_eq!(entropy_filter(&flat).unwrap(), vec![0, 1, 2]);
        // class 1 has the globally lower entropies but is halved on its own
        let two = scored_pool(&[0, 0, 1, 1], &[0.8, 0.9, 0.1, 0.2], &[0.0; 4]);
        assert_eq!(entropy_filter(&two).unwrap(), vec![0, 2]);
        assert!(entropy_filter(&[]).is_err());
    }

    #[test]
    fn distance_halving_examples() {
        let c = vec![ClassCentroid::from_stacks(0, &[vec![]]).unwrap()];
        let s = scored_pool(&[0; 4], &[0.0; 4], &[0.3, 1.2, 0.5, 2.0]);
        assert_eq!(distance_filter(&s, &c).unwrap(), vec![0, 2]);
        let single = scored_pool(&[0], &[0.0], &[0.1]);
        assert!(distance_filter(&single, &c).unwrap().is_empty());
        let orphan = scored_pool(&[1], &[0.0], &[0.1]);
        assert!(distance_filter(&orphan, &c).is_err());
    }

    #[test]
    fn full_chain_meets_quota() {
        // 60/40 real images at r = 0.5 with a 4x pool: 120/80 candidates, 30/20 kept
        let sizes = [60, 40];
        let pools = pool_sizes(0.5, &sizes, 4);
        let labels: Vec<usize> = pools.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let e: Vec<f64> = (0..labels.len()).map(|i| ((i * 37) % 101) as f64).collect();
        let d: Vec<f64> = (0..labels.len()).map(|i| ((i * 53) % 97) as f64).collect();
        let mut pool = scored_pool(&labels, &e, &d);
        let sel = apply_filters(&mut pool, None).unwrap();
        assert_eq!(sel.len(), 50);
        let s = summarize(&pool, &["a".into(), "b".into()], &sizes, 0.5);
        assert_eq!((s[0].selected, s[1].selected), (30, 20));
        assert_eq!((s[0].after_entropy, s[1].after_entropy), (60, 40));
    }

    #[test]
    fn nested_selection_infeasible_when_quota_exceeds_two_halvings() {
        // ratio 1.0 from a 2N pool: X1 holds N, at most N/2 can pass
        let labels = vec![0; 8];
        let pool = scored_pool(&labels, &[0.0; 8], &[0.0; 8]);
        assert_eq!(nested_selection(&pool, &[4], 1.0).unwrap(), None);
        assert_eq!(nested_selection(&pool, &[4], 0.5).unwrap().unwrap().len(), 2);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pool_strategy() -> impl Strategy<Value = Vec<(usize, f64, f64)>> {
            prop::collection::vec((0usize..4, 0.0..2.0f64, 0.0..5.0f64), 1..200)
        }

        proptest! {
            #[test]
            fn cardinality_subsets_and_dominance(rows in pool_strategy()) {
                let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
                let e: Vec<f64> = rows.iter().map(|r| (r.1 * 4.0).round() / 4.0).collect();
                let d: Vec<f64> = rows.iter().map(|r| r.2).collect();
                let mut pool = scored_pool(&labels, &e, &d);
                let sel = apply_filters(&mut pool, None).unwrap();
                for c in 0..4 {
                    let x0: Vec<&CandidateSample> = pool.iter().filter(|s| s.assigned_label == c).collect();
                    let x1: Vec<&&CandidateSample> = x0.iter().filter(|s| s.passed_entropy).collect();
                    let x: Vec<&&&CandidateSample> = x1.iter().filter(|s| s.passed_distance).collect();
                    prop_assert_eq!(x1.len(), x0.len() / 2);
                    prop_assert_eq!(x.len(), x1.len() / 2);
                    let kept_max = x1.iter().map(|s| s.entropy).fold(f64::NEG_INFINITY, f64::max);
                    let rej_min = x0.iter().filter(|s| !s.passed_entropy).map(|s| s.entropy).fold(f64::INFINITY, f64::min);
                    prop_assert!(kept_max <= rej_min);
                    let sel_max = x.iter().map(|s| s.distance).fold(f64::NEG_INFINITY, f64::max);
                    let drop_min = x1.iter().filter(|s| !s.passed_distance).map(|s| s.distance).fold(f64::INFINITY, f64::min);
                    prop_assert!(sel_max <= drop_min);
                }
                for &i in &sel {
                    prop_assert!(pool[i].passed_entropy && pool[i].passed_distance);
                    prop_assert_eq!(pool[i].assigned_label, labels[i]);
                }
                prop_assert!(pool.iter().all(|s| !s.passed_distance || s.passed_entropy));
            }

            #[test]
            fn ratio_sets_are_nested(rows in pool_strategy(), r1 in 0.01..0.6f64, r2 in 0.01..0.6f64) {
                let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
                let e: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let d: Vec<f64> = rows.iter().map(|r| (r.2 * 2.0).round()).collect();
                let pool = scored_pool(&labels, &e, &d);
                let sizes: Vec<usize> = (0..4).map(|c| labels.iter().filter(|&&l| l == c).count() / 2).collect();
                let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
                if let (Some(a), Some(b)) = (nested_selection(&pool, &sizes, lo).unwrap(), nested_selection(&pool, &sizes, hi).unwrap()) {
                    prop_assert!(a.iter().all(|i| b.contains(i)));
                }
            }
        }
    }
}
