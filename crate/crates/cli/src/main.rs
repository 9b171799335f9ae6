use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use histaug::datasets::PatchDataset;
use histaug::derive_seed;
use histaug::extractor::ResNet;
use histaug::harness::experiment::{
    evaluate, load_extra, load_prepared, prepare_data, read_reports, requested_regimes, round_seed,
    select_images_stage, select_model_stage, train_extractor, train_gan_stage, write_reports, MetricsReport, RunResult,
};
use histaug::harness::{emit_plots, run_experiment, sweep_ablation, train_classifier, Regime, RunIndex, RunLayout};
use histaug::histogan::GanCheckpoint;
use histaug::selector::class_centroids;
use histaug::ExperimentConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "histaug", version, about = "Selective synthetic augmentation for patch classifiers")]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the dataset, split it by patient and store it in the run directory.
    PrepareData,
    /// Train the GAN and save one checkpoint per post-warm-up epoch.
    TrainGan,
    /// Score every checkpoint by FID and record the smoothed minimum.
    SelectModel,
    /// Write images from the chosen checkpoint under `generated/<class>/`.
    Generate {
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        /// Use this checkpoint epoch instead of the chosen one.
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Generate the candidate pool and apply the entropy and distance filters.
    SelectImages,
    /// Train the configured number of classifiers for each regime.
    TrainClassifier {
        /// Regimes to train; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        regime: Vec<Regime>,
    },
    /// Evaluate saved classifiers on the test split and write the results tables.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        regime: Vec<Regime>,
    },
    /// Ratio × pool-size ablation from the chosen checkpoint.
    Sweep {
        /// Pool sizes in multiples of N.
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 6, 8])]
        pools: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
        ratios: Vec<f64>,
        /// Only select; skip classifier training.
        #[arg(long)]
        no_train: bool,
    },
    /// Draw the FID curve, t-SNE scatter and attention overlays from the run directory.
    Plot,
    /// Every stage in order.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn dataset(config: &ExperimentConfig, layout: &RunLayout) -> Result<PatchDataset> {
    load_prepared(config, layout).context("no prepared dataset in the run directory; run `prepare-data` first")
}

/// The saved extractor, trained and saved first when missing.
fn extractor(config: &ExperimentConfig, layout: &RunLayout, ds: &PatchDataset) -> Result<ResNet> {
    let path = layout.extractor();
    if path.is_file() {
        return Ok(ResNet::load(&path)?);
    }
    info!("training the feature extractor");
    let model = train_extractor(ds, config)?.model;
    model.save(&path)?;
    Ok(model)
}

fn regimes_or_configured(given: &[Regime], config: &ExperimentConfig) -> Result<Vec<Regime>> {
    Ok(if given.is_empty() { requested_regimes(config)? } else { given.to_vec() })
}

/// Runs one stage and records its outcome in the run index of `layout`.
fn tracked<T>(
    name: &str,
    config: &ExperimentConfig,
    layout: &RunLayout,
    f: impl FnOnce(&mut RunIndex) -> histaug::Result<T>,
) -> Result<T> {
    let mut index = RunIndex::open(layout, config);
    let t = Instant::now();
    let result = f(&mut index);
    index.record(name, t.elapsed().as_secs_f64(), result.as_ref().err());
    index.collect_artifacts(layout);
    index.save(&layout.run_index())?;
    result.with_context(|| format!("stage {name} failed"))
}

fn print_reports(reports: &[MetricsReport]) {
    println!("{:<12} {:>4} {:>18} {:>18} {:>18} {:>18}", "regime", "runs", "accuracy", "auc", "sensitivity", "specificity");
    for r in reports {
        println!(
            "{:<12} {:>4} {:>18} {:>18} {:>18} {:>18}",
            r.regime.as_str(),
            r.runs,
            r.accuracy.to_string(),
            r.auc.to_string(),
            r.sensitivity.to_string(),
            r.specificity.to_string()
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let layout = RunLayout::new(&cli.out);
    layout.create()?;
    std::fs::write(layout.config(), config.to_toml_string())?;

    match &cli.command {
        Command::PrepareData => {
            let ds = tracked("prepare_data", &config, &layout, |_| prepare_data(&config, &layout))?;
            println!("{} patches, training class sizes {:?}", ds.len(), ds.class_sizes());
        }
        Command::TrainGan => {
            let ds = dataset(&config, &layout)?;
            let log = tracked("train_gan", &config, &layout, |_| train_gan_stage(&ds, &config, &layout))?;
            println!("{} steps, checkpoints for epochs {:?}", log.steps, log.checkpoint_epochs);
        }
        Command::SelectModel => {
            let ds = dataset(&config, &layout)?;
            let net = extractor(&config, &layout, &ds)?;
            let (best, _) = tracked("select_model", &config, &layout, |index| {
                let r = select_model_stage(&ds, &net, &config, &layout)?;
                index.best_epoch = Some(r.0.epoch);
                Ok(r)
            })?;
            println!("best epoch {}", best.epoch);
        }
        Command::Generate { per_class, epoch } => {
            let ckpt = match epoch {
                Some(e) => GanCheckpoint::load(&layout.checkpoints().join(GanCheckpoint::file_name(*e)))?,
                None => layout.best_checkpoint().context("no chosen checkpoint; run `select-model` first")?,
            };
            let ds = dataset(&config, &layout)?;
            let generator = ckpt.generator()?;
            let names = &ds.profile().class_names;
            for (c, name) in names.iter().enumerate() {
                let seeds: Vec<u64> = (0..*per_class as u64).map(|i| derive_seed(config.seed, (0x6e4 << 32) | (c as u64) << 20 | i)).collect();
                let images = generator.generate_images(&vec![c; *per_class], &seeds)?;
                let dir = layout.generated().join(name);
                std::fs::create_dir_all(&dir)?;
                for (i, img) in images.iter().enumerate() {
                    img.save_png(&dir.join(format!("{i:05}.png")))?;
                }
            }
            println!("wrote {} images per class under {}", per_class, layout.generated().display());
        }
        Command::SelectImages => {
            let ds = dataset(&config, &layout)?;
            let net = extractor(&config, &layout, &ds)?;
            let ckpt = layout.best_checkpoint().context("no chosen checkpoint; run `select-model` first")?;
            let outcome = tracked("select_images", &config, &layout, |_| select_images_stage(&ckpt, &net, &ds, &config, &layout))?;
            for c in &outcome.report.classes {
                println!("{:<16} pool {:>5}  after entropy {:>5}  selected {:>5}", c.name, c.pool_size, c.after_entropy, c.selected);
            }
        }
        Command::TrainClassifier { regime } => {
            let ds = dataset(&config, &layout)?;
            for r in regimes_or_configured(regime, &config)? {
                let extra = load_extra(r, &ds, &layout)?;
                tracked(&format!("train_classifier_{r}"), &config, &layout, |_| {
                    for round in 0..config.classifier.runs {
                        let trained = train_classifier(&ds, &extra, r, &config, round_seed(&config, round))?;
                        let path = layout.classifier(r, round);
                        trained.model.save(&path)?;
                        println!("{r} round {round}: validation accuracy {:?}", trained.val_accuracy);
                    }
                    Ok(())
                })?;
            }
        }
        Command::Evaluate { regime } => {
            let ds = dataset(&config, &layout)?;
            let mut reports: Vec<MetricsReport> = read_reports(&layout).unwrap_or_default();
            for r in regimes_or_configured(regime, &config)? {
                let mut per_run = Vec::new();
                for round in 0..config.classifier.runs {
                    let path = layout.classifier(r, round);
                    let model = ResNet::load(&path).with_context(|| format!("run `train-classifier --regime {r}` first"))?;
                    let m = evaluate(&model, &ds)?.metrics;
                    per_run.push(RunResult {
                        regime: r,
                        seed: round_seed(&config, round),
                        accuracy: m.accuracy,
                        auc: m.auc,
                        sensitivity: m.sensitivity,
                        specificity: m.specificity,
                    });
                }
                let size = ds.train_patches().len() + load_extra(r, &ds, &layout)?.len();
                reports.retain(|x| x.regime != r);
                reports.push(MetricsReport::from_runs(r, size, config.fingerprint(), per_run));
            }
            reports.sort_by_key(|r| r.regime);
            write_reports(&reports, &layout)?;
            print_reports(&reports);
        }
        Command::Sweep { pools, ratios, no_train } => {
            let ds = dataset(&config, &layout)?;
            let net = extractor(&config, &layout, &ds)?;
            let ckpt = layout.best_checkpoint().context("no chosen checkpoint; run `select-model` first")?;
            let grid = tracked("sweep", &config, &layout, |_| {
                let centroids = class_centroids(&net, &ds, config.selection.centroid_dropout, derive_seed(config.seed, 0xce47))?;
                let grid = sweep_ablation(&ckpt, &net, &centroids, &ds, &config, pools, ratios, !no_train)?;
                grid.write_csv(&layout.sweep())?;
                Ok(grid)
            })?;
            for c in &grid.cells {
                let acc = c.metrics.as_ref().map(|m| m.accuracy.to_string()).unwrap_or_else(|| "-".into());
                let mark = if c.is_default { "*" } else { " " };
                println!("{mark} pool {}N ratio {:.2}: feasible {:<5} selected {:>5} accuracy {acc}", c.pool_multiplier, c.ratio, c.feasible, c.selected_ids.len());
            }
        }
        Command::Plot => {
            let paths = tracked("plots", &config, &layout, |_| emit_plots(&config, &layout))?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::RunAll => {
            let index = run_experiment(&config, &layout)?;
            for s in &index.stages {
                println!("{:<20} {:?} {:>8.1}s {}", s.name, s.status, s.seconds, s.message.as_deref().unwrap_or(""));
            }
            if let Ok(reports) = read_reports(&layout) {
                print_reports(&reports);
            }
            if index.failed() {
                bail!("run failed; see {}", layout.run_index().display());
            }
        }
    }
    Ok(())
}
