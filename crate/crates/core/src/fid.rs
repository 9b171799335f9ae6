//! Feature-space Fréchet distance, EMA smoothing of the per-epoch score series
//! and checkpoint choice.

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datasets::{largest_remainder, PatchDataset, PatchImage};
use crate::extractor::ResNet;
use crate::histogan::{GanCheckpoint, Generator};
use crate::{derive_seed, Error, Result};

/// Gaussian moment fit of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl MomentSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features` (`n` rows of width `dim`).
pub fn summarize_moments(features: &[f64], dim: usize) -> Result<MomentSummary> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::Validation(format!("{} values do not form rows of width {dim}", features.len())));
    }
    let n = features.len() / dim;
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let x = DMatrix::from_row_slice(n, dim, features);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut covariance = centered.tr_mul(&centered) / (n as f64 - 1.0);
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(MomentSummary { mean, covariance, sample_count: n })
}

fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// PSD square root via eigendecomposition, negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let root = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&vecs * DMatrix::from_diagonal(&root) * vecs.transpose())
}

/// Tr((Σ_a Σ_b)^{1/2}), computed as the trace of (A Σ_b A)^{1/2} with A = Σ_a^{1/2}.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let inner = &ra * b * &ra;
    let (vals, _) = symmetric_eigen(&inner)?;
    Ok(vals.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// ‖μ_r − μ_f‖² + Tr(Σ_r + Σ_f − 2(Σ_r Σ_f)^{1/2}), clamped at 0.
pub fn compute_fid(real: &MomentSummary, fake: &MomentSummary) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::Validation(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    let diff = (&real.mean - &fake.mean).norm_squared();
    let covmean = trace_sqrt_product(&real.covariance, &fake.covariance)?;
    let fid = diff + real.covariance.trace() + fake.covariance.trace() - 2.0 * covmean;
    if !fid.is_finite() {
        return Err(Error::Numerical("FID is not finite".into()));
    }
    Ok(fid.max(0.0))
}

/// d̂_1 = d_1, d̂_t = α·d̂_{t−1} + (1−α)·d_t.
pub fn ema_smooth(raw: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Validation("cannot smooth an empty series".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut prev = raw[0];
    out.push(prev);
    for &d in &raw[1..] {
        prev = alpha * prev + (1.0 - alpha) * d;
        out.push(prev);
    }
    Ok(out)
}

/// Raw and smoothed FID per checkpoint epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidSeries {
    pub epochs: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct FidRow {
    epoch: usize,
    raw_fid: f64,
    smoothed_fid: f64,
}

impl FidSeries {
    pub fn new(epochs: Vec<usize>, raw: Vec<f64>, alpha: f64) -> Result<FidSeries> {
        if epochs.len() != raw.len() {
            return Err(Error::Validation("epochs and scores differ in length".into()));
        }
        let smoothed = ema_smooth(&raw, alpha)?;
        Ok(FidSeries { epochs, raw, smoothed, alpha })
    }

    /// Position of the smoothed minimum; ties resolve to the earliest entry, NaN entries are skipped.
    pub fn best_index(&self) -> Result<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.smoothed.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            if best.is_none_or(|b| *v < self.smoothed[b]) {
                best = Some(i);
            }
        }
        best.ok_or_else(|| Error::Numerical("every smoothed FID is NaN".into()))
    }

    pub fn best_epoch(&self) -> Result<usize> {
        Ok(self.epochs[self.best_index()?])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for i in 0..self.epochs.len() {
            w.serialize(FidRow { epoch: self.epochs[i], raw_fid: self.raw[i], smoothed_fid: self.smoothed[i] })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads `epoch,raw_fid,smoothed_fid` rows back; `alpha` is not stored in the file.
    pub fn read_csv(path: &Path, alpha: f64) -> Result<FidSeries> {
        let mut r = csv::Reader::from_path(path)?;
        let mut s = FidSeries { epochs: vec![], raw: vec![], smoothed: vec![], alpha };
        for row in r.deserialize() {
            let row: FidRow = row?;
            s.epochs.push(row.epoch);
            s.raw.push(row.raw_fid);
            s.smoothed.push(row.smoothed_fid);
        }
        Ok(s)
    }
}

/// Labels and noise seeds of the fixed FID sample: `min(N, cap)` images split across classes in
/// proportion to the training class sizes. The same sample is drawn for every checkpoint.
pub fn fid_sample_plan(class_sizes: &[usize], cap: usize, seed: u64) -> (Vec<usize>, Vec<u64>) {
    let n: usize = class_sizes.iter().sum();
    let weights: Vec<f64> = class_sizes.iter().map(|&c| c as f64).collect();
    let counts = if n == 0 { vec![0; class_sizes.len()] } else { largest_remainder(&weights, n.min(cap)) };
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    let seeds = (0..labels.len() as u64).map(|i| derive_seed(seed, 0xf1d0_0000 + i)).collect();
    (labels, seeds)
}

/// Penultimate-layer moments of `images` under `extractor`.
pub fn feature_moments(extractor: &ResNet, images: &[&PatchImage]) -> Result<MomentSummary> {
    let pred = extractor.predict(images)?;
    summarize_moments(&pred.features, pred.feature_dim)
}

/// FID of one generator's fixed sample against precomputed real moments.
pub fn score_generator(
    generator: &Generator,
    extractor: &ResNet,
    real: &MomentSummary,
    labels: &[usize],
    seeds: &[u64],
) -> Result<f64> {
    let fake = generator.generate_images(labels, seeds)?;
    let refs: Vec<&PatchImage> = fake.iter().collect();
    compute_fid(real, &feature_moments(extractor, &refs)?)
}

/// Scores every checkpoint file against the training split, smooths the series and returns the
/// checkpoint at the smoothed minimum. Files are loaded one at a time, in epoch order.
pub fn select_checkpoint(
    checkpoints: &[PathBuf],
    real: &PatchDataset,
    extractor: &ResNet,
    config: &ExperimentConfig,
) -> Result<(GanCheckpoint, FidSeries)> {
    if checkpoints.is_empty() {
        return Err(Error::Validation("no checkpoints to score".into()));
    }
    let train: Vec<&PatchImage> = real.train_patches().iter().map(|p| &p.image).collect();
    let real_moments = feature_moments(extractor, &train)?;
    let (labels, seeds) = fid_sample_plan(&real.class_sizes(), config.gan.fid_samples, config.seed);
    let mut epochs = Vec::with_capacity(checkpoints.len());
    let mut raw = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ckpt = GanCheckpoint::load(path)?;
        if ckpt.class_count != real.class_count() {
            return Err(Error::Validation(format!(
                "checkpoint has {} classes, dataset has {}",
                ckpt.class_count,
                real.class_count()
            )));
        }
        let d = score_generator(&ckpt.generator()?, extractor, &real_moments, &labels, &seeds)?;
        info!("epoch {}: FID {d:.4}", ckpt.epoch);
        epochs.push(ckpt.epoch);
        raw.push(d);
    }
    let series = FidSeries::new(epochs, raw, config.selection.ema_alpha)?;
    let best = GanCheckpoint::load(&checkpoints[series.best_index()?])?;
    Ok((best, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(mean: &[f64], var: &[f64]) -> MomentSummary {
        MomentSummary {
            mean: DVector::from_row_slice(mean),
            covariance: DMatrix::from_diagonal(&DVector::from_row_slice(var)),
            sample_count: 10,
        }
    }

    #[test]
    fn moments_by_hand() {
        let m = summarize_moments(&[0.0, 0.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(m.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(m.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        let same = summarize_moments(&[1.5, -2.0, 1.5, -2.0, 1.5, -2.0], 2).unwrap();
        assert_eq!(same.covariance, DMatrix::zeros(2, 2));
        assert!(matches!(summarize_moments(&[1.0, 2.0], 2), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn fid_closed_forms() {
        let a = diag(&[0.0, 0.0], &[1.0, 1.0]);
        assert_abs_diff_eq!(compute_fid(&a, &a).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(compute_fid(&diag(&[0.0], &[0.0]), &diag(&[3.0], &[0.0])).unwrap(), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(compute_fid(&a, &diag(&[1.0, 1.0], &[4.0, 4.0])).unwrap(), 4.0, epsilon = 1e-10);
        assert!(compute_fid(&a, &diag(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_smooth(&[10.0, 20.0], 0.5).unwrap(), vec![10.0, 15.0]);
        assert_eq!(ema_smooth(&[3.0, 7.0, 5.0], 1.0).unwrap(), vec![3.0, 3.0, 3.0]);
        assert_eq!(ema_smooth(&[3.0, 7.0, 5.0], 0.0).unwrap(), vec![3.0, 7.0, 5.0]);
        assert!(ema_smooth(&[], 0.5).is_err());
    }

    #[test]
    fn checkpoint_choice_follows_smoothed_minimum() {
        let dec = FidSeries::new(vec![1, 2, 3, 4], vec![9.0, 7.0, 5.0, 3.0], 0.5).unwrap();
        assert_eq!(dec.best_epoch().unwrap(), 4);
        let flat = FidSeries::new(vec![5, 6, 7], vec![2.0; 3], 0.5).unwrap();
        assert_eq!(flat.best_epoch().unwrap(), 5);
        let nan = FidSeries::new(vec![1], vec![f64::NAN], 0.5).unwrap();
        assert!(matches!(nan.best_index(), Err(Error::Numerical(_))));
    }

    #[test]
    fn an_isolated_dip_does_not_win_after_smoothing() {
        // slowly decreasing trend with a one-epoch dip at t=5
        let raw: Vec<f64> = (1..=12).map(|t| if t == 5 { 7.0 } else { 20.0 - t as f64 }).collect();
        let series = FidSeries::new((1..=12).collect(), raw.clone(), 0.5).unwrap();
        let raw_argmin = raw.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
        assert_eq!(raw_argmin, 5);
        // oracle: direct evaluation of the recurrence
        let mut s = raw[0];
        let mut expect = vec![s];
        for &d in &raw[1..] {
            s = 0.5 * s + 0.5 * d;
            expect.push(s);
        }
        assert_eq!(series.smoothed, expect);
        assert_eq!(series.best_epoch().unwrap(), 12);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fid_series.csv");
        let s = FidSeries::new(vec![101, 102], vec![4.0, 2.0], 0.5).unwrap();
        s.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,raw_fid,smoothed_fid\n"));
        assert_eq!(FidSeries::read_csv(&path, 0.5).unwrap(), s);
    }

    #[test]
    fn sample_plan_is_proportional_and_capped() {
        let (labels, seeds) = fid_sample_plan(&[30, 10], 8, 1);
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(seeds.len(), 8);
        assert_eq!(fid_sample_plan(&[3, 2], 2048, 1).0, vec![0, 0, 0, 1, 1]);
        assert_eq!(fid_sample_plan(&[3, 2], 2048, 1), fid_sample_plan(&[3, 2], 2048, 1));
    }

    #[test]
    fn selection_over_saved_checkpoints() {
        use crate::datasets::synthetic_toy_dataset;
        use crate::extractor::ResNetConfig;
        use crate::histogan::{GanArch, GanCheckpoint, Discriminator};

        let ds = synthetic_toy_dataset(6, 4, 2).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.gan.base_channels = 4;
        cfg.gan.disc_channels = 4;
        cfg.gan.noise_dim = 4;
        cfg.gan.residual_blocks = 1;
        cfg.gan.fid_samples = 6;
        cfg.selection.ema_alpha = 0.0;
        let arch = GanArch::new(ds.profile(), &cfg.gan).unwrap();
        let net = ResNet::new(ResNetConfig { classes: 2, base_channels: 4, blocks: [1, 1, 1, 1], dropout: 0.0, stem_stride: 2 }, 0);
        let dir = tempfile::tempdir().unwrap();
        let mut paths = vec![];
        for (epoch, seed) in [(3, 11), (4, 12)] {
            let g = Generator::new(arch.clone(), seed);
            let ckpt = GanCheckpoint {
                epoch,
                stage_count: arch.stage_count(),
                class_count: 2,
                arch: arch.clone(),
                config_fingerprint: cfg.fingerprint(),
                generator: g.store().snapshot(),
                discriminator: Discriminator::new(arch.clone(), 0).store().snapshot(),
            };
            paths.push(ckpt.save(dir.path()).unwrap());
        }
        let (best, series) = select_checkpoint(&paths, &ds, &net, &cfg).unwrap();
        assert_eq!(series.epochs, vec![3, 4]);
        // oracle: score each generator directly with the same sample plan
        let train: Vec<&PatchImage> = ds.train_patches().iter().map(|p| &p.image).collect();
        let real = feature_moments(&net, &train).unwrap();
        let (labels, seeds) = fid_sample_plan(&ds.class_sizes(), 6, cfg.seed);
        for (i, seed) in [11, 12].into_iter().enumerate() {
            let d = score_generator(&Generator::new(arch.clone(), seed), &net, &real, &labels, &seeds).unwrap();
            assert_abs_diff_eq!(series.raw[i], d, epsilon = 1e-9);
        }
        let argmin = if series.raw[1] < series.raw[0] { 4 } else { 3 };
        assert_eq!(best.epoch, argmin);
        assert!(select_checkpoint(&[], &ds, &net, &cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn psd(dim: usize) -> impl Strategy<Value = MomentSummary> {
            (prop::collection::vec(-2.0..2.0f64, dim), prop::collection::vec(-1.0..1.0f64, dim * dim)).prop_map(
                move |(m, a)| {
                    let a = DMatrix::from_row_slice(dim, dim, &a);
                    MomentSummary { mean: DVector::from_row_slice(&m), covariance: &a * a.transpose(), sample_count: 10 }
                },
            )
        }

        fn pair() -> impl Strategy<Value = (MomentSummary, MomentSummary)> {
            (1usize..=6).prop_flat_map(|d| (psd(d), psd(d)))
        }

        proptest! {
            #[test]
            fn symmetric_nonnegative_and_zero_on_identity((a, b) in pair()) {
                let ab = compute_fid(&a, &b).unwrap();
                let ba = compute_fid(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
                prop_assert!(ab >= 0.0);
                prop_assert!(compute_fid(&a, &a).unwrap() <= 1e-8);
            }

            #[test]
            fn diagonal_closed_form(
                rows in (1usize..=8).prop_flat_map(|d| prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, 0.0..4.0f64, 0.0..4.0f64), d))
            ) {
                let m1: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let m2: Vec<f64> = rows.iter().map(|r| r.1).collect();
                let v1: Vec<f64> = rows.iter().map(|r| r.2).collect();
                let v2: Vec<f64> = rows.iter().map(|r| r.3).collect();
                let expect: f64 = rows.iter().map(|r| (r.0 - r.1).powi(2) + (r.2.sqrt() - r.3.sqrt()).powi(2)).sum();
                prop_assert!((compute_fid(&diag(&m1, &v1), &diag(&m2, &v2)).unwrap() - expect).abs() <= 1e-6);
            }

            #[test]
            fn smoothed_series_stays_within_raw_range(raw in prop::collection::vec(0.0..100.0f64, 1..40), alpha in 0.0..=1.0f64) {
                let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in ema_smooth(&raw, alpha).unwrap() {
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }

            #[test]
            fn appending_a_score_above_the_smoothed_minimum_keeps_the_choice(
                raw in prop::collection::vec(0.0..100.0f64, 1..30),
                pick in any::<prop::sample::Index>(),
                alpha in 0.0..=1.0f64,
            ) {
                let epochs: Vec<usize> = (1..=raw.len()).collect();
                let base = FidSeries::new(epochs.clone(), raw.clone(), alpha).unwrap();
                let best = base.best_epoch().unwrap();
                let floor = base.smoothed[base.best_index().unwrap()];
                let dup = raw[pick.index(raw.len())];
                // exact ties can round one ulp either way
                prop_assume!(dup > floor + 1e-9);
                let mut raw2 = raw.clone();
                raw2.push(dup);
                let mut epochs2 = epochs;
                epochs2.push(raw.len() + 1);
                prop_assert_eq!(FidSeries::new(epochs2, raw2, alpha).unwrap().best_epoch().unwrap(), best);
            }
        }
    }
}
