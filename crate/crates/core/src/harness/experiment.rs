//! Run directory layout and the pipeline stages that fill it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_probabilities, ClassificationMetrics, Evaluation, MeanStd};
use super::Regime;
use crate::config::ExperimentConfig;
use crate::datasets::{synthetic_toy_dataset, DatasetProfile, PatchDataset, PatchImage, Split, MANIFEST_FILE};
use crate::extractor::{train_classifier_on, Example, ResNet, ResNetConfig, TrainedClassifier};
use crate::fid::{select_checkpoint, FidSeries};
use crate::histogan::{train_gan, GanCheckpoint, TrainingLog};
use crate::selector::{
    class_centroids, class_quotas, load_class_folders, load_selected, run_selection, PoolSource, SelectedImage, SelectionOutcome,
};
use crate::{derive_seed, Error, Result};

const EXTRACTOR_STREAM: u64 = 0xe7;
const ROUND_STREAM: u64 = 0xc1a5_0000;
const CENTROID_STREAM: u64 = 0xce47;
pub const UNFILTERED_DIR: &str = "unfiltered";

/// File names inside one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> RunLayout {
        RunLayout { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.plots()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn extractor(&self) -> PathBuf {
        self.root.join("extractor.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn gan_log(&self) -> PathBuf {
        self.root.join("gan_training.csv")
    }
    pub fn fid_series(&self) -> PathBuf {
        self.root.join("fid_series.csv")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn run_index(&self) -> PathBuf {
        self.root.join("run_index.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn classifier(&self, regime: Regime, round: usize) -> PathBuf {
        self.root.join("classifiers").join(format!("{regime}_{round}.json"))
    }

    /// Best checkpoint epoch recorded in the run index.
    pub fn best_checkpoint(&self) -> Result<GanCheckpoint> {
        let index = RunIndex::load(&self.run_index())?;
        let epoch = index.best_epoch.ok_or_else(|| Error::Validation("run index records no best epoch".into()))?;
        GanCheckpoint::load(&self.checkpoints().join(GanCheckpoint::file_name(epoch)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub message: Option<String>,
}

/// Machine-readable account of a run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub config_fingerprint: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub best_epoch: Option<usize>,
    pub artifacts: Vec<String>,
}

impl RunIndex {
    pub fn load(path: &Path) -> Result<RunIndex> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the index in `layout`, or starts a new one.
    pub fn open(layout: &RunLayout, config: &ExperimentConfig) -> RunIndex {
        RunIndex::load(&layout.run_index()).unwrap_or_else(|_| RunIndex {
            config_fingerprint: config.fingerprint(),
            seed: config.seed,
            ..RunIndex::default()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageStatus::Failed)
    }

    /// Runs `f` as stage `name` unless an earlier stage failed; replaces any older record of the stage.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Option<T> {
        self.stages.retain(|s| s.name != name);
        if self.failed() {
            self.stages.push(StageRecord { name: name.into(), status: StageStatus::Skipped, seconds: 0.0, message: None });
            return None;
        }
        let t = Instant::now();
        info!("stage {name}");
        let result = f();
        self.record(name, t.elapsed().as_secs_f64(), result.as_ref().err());
        result.ok()
    }

    /// Appends the outcome of stage `name`, replacing any older record of it.
    pub fn record(&mut self, name: &str, seconds: f64, error: Option<&Error>) {
        self.stages.retain(|s| s.name != name);
        if let Some(e) = error {
            warn!("stage {name} failed: {e}");
        }
        self.stages.push(StageRecord {
            name: name.into(),
            status: if error.is_some() { StageStatus::Failed } else { StageStatus::Ok },
            seconds,
            message: error.map(|e| e.to_string()),
        });
    }

    /// Records every file under the run directory, relative to it.
    pub fn collect_artifacts(&mut self, layout: &RunLayout) {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) {
            let Ok(entries) = std::fs::read_dir(dir) else { return };
            let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                if p.is_dir() {
                    walk(&p, root, out);
                } else if let Ok(rel) = p.strip_prefix(root) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
        self.artifacts.clear();
        walk(&layout.root, &layout.root, &mut self.artifacts);
    }
}

/// Loads `data.root` when it holds a manifest, otherwise generates the toy set; then splits by
/// patient (unless every patch already has a split), subsets the training split and saves the
/// result under the run's `data/`.
pub fn prepare_data(config: &ExperimentConfig, layout: &RunLayout) -> Result<PatchDataset> {
    let profile = DatasetProfile::builtin(&config.data.profile)?;
    let root = Path::new(&config.data.root);
    let raw = if root.join(MANIFEST_FILE).is_file() {
        PatchDataset::load(root, &profile)?
    } else if profile.name == "toy" {
        info!("{} holds no manifest; generating the toy dataset", root.display());
        synthetic_toy_dataset(config.data.toy_per_class, config.data.toy_patients, config.seed)?
    } else {
        return Err(Error::Format(format!("{} not found", root.join(MANIFEST_FILE).display())));
    };
    let split = if raw.patches().iter().all(|p| p.split.is_some()) {
        raw
    } else {
        raw.split_by_patient(config.data.split, derive_seed(config.seed, 0x5b17))?
    };
    let ds = if config.data.train_fraction < 1.0 {
        split.subset_fraction(config.data.train_fraction, derive_seed(config.seed, 0x5b5e))?
    } else {
        split
    };
    ds.save(layout.data())?;
    Ok(ds)
}

/// The prepared dataset of a run directory.
pub fn load_prepared(config: &ExperimentConfig, layout: &RunLayout) -> Result<PatchDataset> {
    PatchDataset::load(layout.data(), &DatasetProfile::builtin(&config.data.profile)?)
}

fn network_config(dataset: &PatchDataset, config: &ExperimentConfig) -> ResNetConfig {
    let p = dataset.profile();
    ResNetConfig::for_patches(p.class_count(), p.height, p.width, &config.classifier)
}

fn examples(dataset: &PatchDataset, split: Split) -> Vec<Example<'_>> {
    dataset.in_split(split).map(|p| (&p.image, p.label)).collect()
}

/// Feature extractor: the classifier architecture trained on the real training split.
pub fn train_extractor(dataset: &PatchDataset, config: &ExperimentConfig) -> Result<TrainedClassifier> {
    let train = examples(dataset, Split::Train);
    let val = examples(dataset, Split::Val);
    train_classifier_on(network_config(dataset, config), &train, &val, &config.classifier, None, derive_seed(config.seed, EXTRACTOR_STREAM))
}

/// Trains the GAN, writing each post-warm-up checkpoint and the per-epoch loss log.
pub fn train_gan_stage(dataset: &PatchDataset, config: &ExperimentConfig, layout: &RunLayout) -> Result<TrainingLog> {
    let dir = layout.checkpoints();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for old in GanCheckpoint::list(&dir)? {
        std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
    }
    let log = train_gan(dataset, config, |ckpt| ckpt.save(&dir).map(|_| ()))?;
    log.write_csv(&layout.gan_log())?;
    if log.checkpoint_epochs.is_empty() {
        return Err(Error::Validation(format!(
            "training stopped after {} epochs, before the {}-epoch warm-up ended",
            log.epochs.len(),
            config.gan.warmup_epochs
        )));
    }
    if let Some(e) = log.epochs.iter().find(|e| !e.critic_loss.is_finite() || !e.gen_loss.is_finite()) {
        return Err(Error::Numerical(format!("non-finite GAN loss in epoch {}", e.epoch)));
    }
    Ok(log)
}

/// FID over every saved checkpoint; writes `fid_series.csv` and returns the chosen checkpoint.
pub fn select_model_stage(
    dataset: &PatchDataset,
    extractor: &ResNet,
    config: &ExperimentConfig,
    layout: &RunLayout,
) -> Result<(GanCheckpoint, FidSeries)> {
    let paths = GanCheckpoint::list(&layout.checkpoints())?;
    let (best, series) = select_checkpoint(&paths, dataset, extractor, config)?;
    series.write_csv(&layout.fid_series())?;
    info!("best checkpoint: epoch {}", best.epoch);
    Ok((best, series))
}

/// The unfiltered comparison set: the first `round(r·N_i)` candidates of each class in generation order.
pub fn unfiltered_images(outcome: &SelectionOutcome, class_sizes: &[usize], ratio: f64) -> Vec<SelectedImage> {
    let quotas = class_quotas(ratio, class_sizes);
    let mut taken = vec![0; quotas.len()];
    let mut out = Vec::new();
    for c in &outcome.pool {
        let l = c.assigned_label;
        if taken[l] < quotas[l] {
            taken[l] += 1;
            out.push(SelectedImage { id: c.id.clone(), image: c.image.clone(), label: l });
        }
    }
    out
}

/// Centroids, MC-dropout scoring and both filters; also writes the unfiltered set beside the selected one.
pub fn select_images_stage(
    checkpoint: &GanCheckpoint,
    extractor: &ResNet,
    dataset: &PatchDataset,
    config: &ExperimentConfig,
    layout: &RunLayout,
) -> Result<SelectionOutcome> {
    let centroids = class_centroids(
        extractor,
        dataset,
        config.selection.centroid_dropout,
        derive_seed(config.seed, CENTROID_STREAM),
    )?;
    let out = layout.selection();
    let outcome = run_selection(PoolSource::Generate(checkpoint), extractor, &centroids, dataset, config, &out)?;
    let names = &dataset.profile().class_names;
    let root = out.join(UNFILTERED_DIR);
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    for name in names {
        let d = root.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in unfiltered_images(&outcome, &dataset.class_sizes(), config.selection.ratio) {
        s.image.save_png(&root.join(&names[s.label]).join(format!("{}.png", s.id)))?;
    }
    Ok(outcome)
}

/// Synthetic images a regime adds, read back from the selection directory.
pub fn load_extra(regime: Regime, dataset: &PatchDataset, layout: &RunLayout) -> Result<Vec<SelectedImage>> {
    let names = &dataset.profile().class_names;
    match regime {
        Regime::Baseline | Regime::Traditional => Ok(vec![]),
        Regime::Selective => load_selected(&layout.selection(), names),
        Regime::GanAug => load_class_folders(&layout.selection().join(UNFILTERED_DIR), names),
    }
}

/// One classifier for `regime`: the real training split plus `extra`, flip/jitter only in the
/// traditional regime. Architecture and hyperparameters never depend on the regime.
pub fn train_classifier(
    dataset: &PatchDataset,
    extra: &[SelectedImage],
    regime: Regime,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    match (regime.uses_synthetic(), extra.is_empty()) {
        (false, false) => return Err(Error::Validation(format!("regime {regime} takes no synthetic images"))),
        (true, true) => return Err(Error::Validation(format!("regime {regime} needs synthetic images"))),
        _ => {}
    }
    let mut train = examples(dataset, Split::Train);
    train.extend(extra.iter().map(|s| (&s.image, s.label)));
    let val = examples(dataset, Split::Val);
    let augment = (regime == Regime::Traditional).then_some(&config.augment);
    train_classifier_on(network_config(dataset, config), &train, &val, &config.classifier, augment, seed)
}

/// Test-split metrics of one classifier.
pub fn evaluate(model: &ResNet, dataset: &PatchDataset) -> Result<Evaluation> {
    let test: Vec<&PatchImage> = dataset.in_split(Split::Test).map(|p| &p.image).collect();
    let labels: Vec<usize> = dataset.in_split(Split::Test).map(|p| p.label).collect();
    let pred = model.predict(&test)?;
    let eval = evaluate_probabilities(&labels, &pred.probabilities, pred.classes)?;
    for w in &eval.warnings {
        warn!("{w}");
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub regime: Regime,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Per-run and aggregated metrics of one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub runs: usize,
    pub training_size: usize,
    pub config_fingerprint: String,
    pub per_run: Vec<RunResult>,
    pub accuracy: MeanStd,
    pub auc: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

impl MetricsReport {
    pub fn from_runs(regime: Regime, training_size: usize, fingerprint: String, per_run: Vec<RunResult>) -> MetricsReport {
        let col = |f: fn(&RunResult) -> f64| MeanStd::of(&per_run.iter().map(f).collect::<Vec<_>>());
        MetricsReport {
            regime,
            runs: per_run.len(),
            training_size,
            config_fingerprint: fingerprint,
            accuracy: col(|r| r.accuracy),
            auc: col(|r| r.auc),
            sensitivity: col(|r| r.sensitivity),
            specificity: col(|r| r.specificity),
            per_run,
        }
    }
}

/// Seed of evaluation round `round`; shared by every regime.
pub fn round_seed(config: &ExperimentConfig, round: usize) -> u64 {
    derive_seed(config.seed, ROUND_STREAM + round as u64)
}

/// `config.classifier.runs` independently seeded trainings of one regime.
pub fn evaluate_regime(
    regime: Regime,
    dataset: &PatchDataset,
    extra: &[SelectedImage],
    config: &ExperimentConfig,
    save_to: Option<&RunLayout>,
) -> Result<MetricsReport> {
    let mut per_run = Vec::with_capacity(config.classifier.runs);
    for round in 0..config.classifier.runs {
        let seed = round_seed(config, round);
        let trained = train_classifier(dataset, extra, regime, config, seed)?;
        let m: ClassificationMetrics = evaluate(&trained.model, dataset)?.metrics;
        info!("{regime} round {round}: accuracy {:.4}, auc {:.4}", m.accuracy, m.auc);
        if let Some(layout) = save_to {
            let path = layout.classifier(regime, round);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            trained.model.save(&path)?;
        }
        per_run.push(RunResult {
            regime,
            seed,
            accuracy: m.accuracy,
            auc: m.auc,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
        });
    }
    let size = dataset.in_split(Split::Train).count() + extra.len();
    Ok(MetricsReport::from_runs(regime, size, config.fingerprint(), per_run))
}

/// Writes `results.csv` (one row per run), `summary.csv` (mean and std per regime) and `metrics.json`.
pub fn write_reports(reports: &[MetricsReport], layout: &RunLayout) -> Result<()> {
    let mut w = csv::Writer::from_path(layout.results())?;
    for r in reports {
        for run in &r.per_run {
            w.serialize(run)?;
        }
    }
    w.flush().map_err(|e| Error::io(layout.results(), e))?;
    let mut s = csv::Writer::from_path(layout.summary())?;
    s.write_record([
        "regime",
        "runs",
        "training_size",
        "accuracy_mean",
        "accuracy_std",
        "auc_mean",
        "auc_std",
        "sensitivity_mean",
        "sensitivity_std",
        "specificity_mean",
        "specificity_std",
    ])?;
    for r in reports {
        let mut row = vec![r.regime.to_string(), r.runs.to_string(), r.training_size.to_string()];
        for m in [r.accuracy, r.auc, r.sensitivity, r.specificity] {
            row.push(m.mean.to_string());
            row.push(m.std.to_string());
        }
        s.write_record(&row)?;
    }
    s.flush().map_err(|e| Error::io(layout.summary(), e))?;
    let path = layout.metrics();
    std::fs::write(&path, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(&path, e))
}

pub fn read_reports(layout: &RunLayout) -> Result<Vec<MetricsReport>> {
    let path = layout.metrics();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Regimes requested by the configuration, in canonical order.
pub fn requested_regimes(config: &ExperimentConfig) -> Result<Vec<Regime>> {
    let mut r: Vec<Regime> = config.regimes.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    r.sort();
    r.dedup();
    Ok(r)
}

/// Full pipeline into `layout`: data, extractor, GAN, checkpoint choice, selection, classifiers,
/// plots. A failing stage is recorded in the run index and every later stage is skipped.
pub fn run_experiment(config: &ExperimentConfig, layout: &RunLayout) -> Result<RunIndex> {
    config.validate()?;
    layout.create()?;
    std::fs::write(layout.config(), config.to_toml_string()).map_err(|e| Error::io(layout.config(), e))?;
    let regimes = requested_regimes(config)?;
    let needs_gan = regimes.iter().any(Regime::uses_synthetic);
    let mut index = RunIndex { config_fingerprint: config.fingerprint(), seed: config.seed, ..RunIndex::default() };

    let dataset = index.stage("prepare_data", || prepare_data(config, layout));
    let extractor = index.stage("train_extractor", || {
        let ds = dataset.as_ref().expect("earlier stage succeeded");
        let t = train_extractor(ds, config)?;
        t.model.save(&layout.extractor())?;
        Ok(t.model)
    });
    let mut outcome = None;
    if needs_gan {
        index.stage("train_gan", || train_gan_stage(dataset.as_ref().expect("data"), config, layout));
        let best = index.stage("select_model", || {
            select_model_stage(dataset.as_ref().expect("data"), extractor.as_ref().expect("extractor"), config, layout)
        });
        if let Some((ckpt, _)) = &best {
            index.best_epoch = Some(ckpt.epoch);
        }
        outcome = index.stage("select_images", || {
            let (ckpt, _) = best.as_ref().expect("checkpoint");
            select_images_stage(ckpt, extractor.as_ref().expect("extractor"), dataset.as_ref().expect("data"), config, layout)
        });
    }
    index.stage("train_classifiers", || {
        let ds = dataset.as_ref().expect("data");
        let mut extras: BTreeMap<Regime, Vec<SelectedImage>> = BTreeMap::new();
        if let Some(o) = &outcome {
            extras.insert(Regime::Selective, o.selected_images());
            extras.insert(Regime::GanAug, unfiltered_images(o, &ds.class_sizes(), config.selection.ratio));
        }
        let mut reports = Vec::new();
        for &r in &regimes {
            let extra = extras.get(&r).cloned().unwrap_or_default();
            reports.push(evaluate_regime(r, ds, &extra, config, Some(layout))?);
        }
        write_reports(&reports, layout)?;
        Ok(reports)
    });
    index.save(&layout.run_index())?;
    index.stage("plots", || super::emit_plots(config, layout).map(|_| ()));
    index.collect_artifacts(layout);
    index.artifacts.push("run_index.json".into());
    index.artifacts.sort();
    index.artifacts.dedup();
    index.save(&layout.run_index())?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_after_a_failure_are_skipped() {
        let mut idx = RunIndex::default();
        assert_eq!(idx.stage("a", || Ok(1)), Some(1));
        assert_eq!(idx.stage::<()>("b", || Err(Error::Validation("boom".into()))), None);
        assert_eq!(idx.stage("c", || Ok(3)), None);
        let s: Vec<StageStatus> = idx.stages.iter().map(|s| s.status).collect();
        assert_eq!(s, vec![StageStatus::Ok, StageStatus::Failed, StageStatus::Skipped]);
        assert!(idx.failed());
        assert_eq!(idx.stages[1].message.as_deref(), Some("validation error: boom"));
    }

    #[test]
    fn regime_and_extra_must_agree() {
        let cfg = ExperimentConfig::toy_smoke();
        let ds = synthetic_toy_dataset(6, 6, 0).unwrap().split_by_patient([0.5, 0.25, 0.25], 0).unwrap();
        let img = SelectedImage { id: "x".into(), image: ds.patches()[0].image.clone(), label: 0 };
        assert!(train_classifier(&ds, std::slice::from_ref(&img), Regime::Baseline, &cfg, 0).is_err());
        assert!(train_classifier(&ds, &[], Regime::Selective, &cfg, 0).is_err());
    }

    #[test]
    fn report_aggregates_runs() {
        let runs = vec![
            RunResult { regime: Regime::Baseline, seed: 1, accuracy: 0.5, auc: 0.6, sensitivity: 0.7, specificity: 0.8 },
            RunResult { regime: Regime::Baseline, seed: 2, accuracy: 0.7, auc: 0.6, sensitivity: 0.7, specificity: 0.8 },
        ];
        let r = MetricsReport::from_runs(Regime::Baseline, 10, "f".into(), runs);
        assert_eq!(r.runs, 2);
        assert!((r.accuracy.mean - 0.6).abs() < 1e-12);
        assert_eq!(r.auc.std, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());
        write_reports(std::slice::from_ref(&r), &layout).unwrap();
        let text = std::fs::read_to_string(layout.results()).unwrap();
        assert!(text.starts_with("regime,seed,accuracy,auc,sensitivity,specificity\n"));
        assert_eq!(read_reports(&layout).unwrap(), vec![r]);
    }
}
