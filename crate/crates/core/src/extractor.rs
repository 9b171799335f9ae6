//! Residual classifier used both as the downstream classifier and as the
//! MC-dropout feature extractor for image selection.
//!
//! The network is a four-stage ResNet. A dropout layer sits in front of the
//! last stage; the output of every stage is tapped, giving L = 4 activation
//! maps per image. The global-average-pooled output of the last stage is the
//! penultimate feature used for FID and embeddings.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, ClassifierConfig};
use crate::datasets::{stack_signed, PatchImage};
use crate::nn::{global_avg_pool, Adam, AdamConfig, BatchNorm, Conv2d, Linear, ParamStore, Path as VarPath, Snapshot};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

/// Floor on channel-vector norms before unit normalisation.
pub const NORM_EPS: f64 = 1e-12;

/// Images per forward pass outside training.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub classes: usize,
    pub base_channels: usize,
    pub blocks: [usize; 4],
    pub dropout: f64,
    /// Stride of the stem convolution; 2 for large patches.
    pub stem_stride: usize,
}

impl ResNetConfig {
    pub fn for_patches(classes: usize, height: usize, width: usize, cfg: &ClassifierConfig) -> ResNetConfig {
        ResNetConfig {
            classes,
            base_channels: cfg.base_channels,
            blocks: cfg.blocks,
            dropout: cfg.dropout,
            stem_stride: if height.min(width) > 64 { 2 } else { 1 },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base_channels * 8
    }
}

#[derive(Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(p: &VarPath, in_ch: usize, out_ch: usize, stride: usize) -> BasicBlock {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&p.push("down"), in_ch, out_ch, 1, stride, 0, false),
                BatchNorm::new(&p.push("down_bn"), out_ch),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(&p.push("conv1"), in_ch, out_ch, 3, stride, 1, false),
            bn1: BatchNorm::new(&p.push("bn1"), out_ch),
            conv2: Conv2d::new(&p.push("conv2"), out_ch, out_ch, 3, 1, 1, false),
            bn2: BatchNorm::new(&p.push("bn2"), out_ch),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = self.bn1.forward(&self.conv1.forward(x), train).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), train);
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x), train),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

/// Source of dropout masks for one forward pass.
pub enum DropoutMode<'a> {
    /// Dropout off (deterministic inference).
    Off,
    /// One stream for the whole batch (training).
    Shared(&'a mut ChaCha8Rng),
    /// One stream per batch item, so each image's masks do not depend on batching.
    PerSample(&'a mut [ChaCha8Rng]),
}

fn apply_dropout(x: &Tensor, rate: f64, mode: &mut DropoutMode<'_>) -> Tensor {
    if rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    let draw = |rng: &mut ChaCha8Rng| if rng.random::<f64>() < rate { 0.0 } else { keep };
    let mask: Vec<f64> = match mode {
        DropoutMode::Off => return x.clone(),
        DropoutMode::Shared(rng) => (0..x.numel()).map(|_| draw(rng)).collect(),
        DropoutMode::PerSample(rngs) => {
            assert_eq!(rngs.len(), x.dim(0), "one dropout stream per batch item");
            let per = x.numel() / x.dim(0);
            rngs.iter_mut().flat_map(|rng| (0..per).map(|_| draw(rng)).collect::<Vec<_>>()).collect()
        }
    };
    x.mul(&Tensor::new(mask, x.shape()))
}

/// Logits plus the intermediate activations of one forward pass.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Output of each residual stage, `[B, A_l, H_l, W_l]`.
    pub taps: Vec<Tensor>,
    /// Global-average-pooled last stage, `[B, F]`.
    pub pooled: Tensor,
}

#[derive(Clone)]
pub struct ResNet {
    pub config: ResNetConfig,
    store: ParamStore,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
}

impl ResNet {
    pub fn new(config: ResNetConfig, seed: u64) -> ResNet {
        let store = ParamStore::new(seed);
        let root = store.root();
        let c = config.base_channels;
        let stem = Conv2d::new(&root.push("stem"), 3, c, 3, config.stem_stride, 1, false);
        let stem_bn = BatchNorm::new(&root.push("stem_bn"), c);
        let mut stages = Vec::new();
        let mut in_ch = c;
        for (s, &n) in config.blocks.iter().enumerate() {
            let out_ch = c << s;
            let stage_path = root.push(format!("stage{}", s + 1));
            let blocks = (0..n.max(1))
                .map(|b| {
                    let stride = if b == 0 && s > 0 { 2 } else { 1 };
                    let blk = BasicBlock::new(&stage_path.push(format!("block{b}")), in_ch, out_ch, stride);
                    in_ch = out_ch;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        let head = Linear::new(&root.push("head"), in_ch, config.classes, true);
        ResNet { config, store, stem, stem_bn, stages, head }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `x` is `[B, 3, H, W]` in `[-1, 1]`. Batch statistics are used when `train` is set.
    pub fn forward(&self, x: &Tensor, train: bool, mut dropout: DropoutMode<'_>) -> ForwardOutput {
        let mut h = self.stem_bn.forward(&self.stem.forward(x), train).relu();
        let mut taps = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s == self.stages.len() - 1 {
                h = apply_dropout(&h, self.config.dropout, &mut dropout);
            }
            for blk in blocks {
                h = blk.forward(&h, train);
            }
            taps.push(h.clone());
        }
        let pooled = global_avg_pool(&h);
        let logits = self.head.forward(&pooled);
        ForwardOutput { logits, taps, pooled }
    }

    /// Deterministic class probabilities and penultimate features for many images.
    pub fn predict(&self, images: &[&PatchImage]) -> Result<Prediction> {
        let mut probabilities = Vec::with_capacity(images.len() * self.config.classes);
        let mut features = Vec::with_capacity(images.len() * self.config.feature_dim());
        no_grad(|| -> Result<()> {
            for chunk in images.chunks(INFERENCE_CHUNK) {
                let out = self.forward(&stack_signed(chunk)?, false, DropoutMode::Off);
                probabilities.extend_from_slice(out.logits.softmax(1).data());
                features.extend_from_slice(out.pooled.data());
            }
            Ok(())
        })?;
        Ok(Prediction { classes: self.config.classes, feature_dim: self.config.feature_dim(), probabilities, features })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SavedResNet { config: self.config.clone(), params: self.store.snapshot() };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ResNet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SavedResNet = serde_json::from_str(&text)?;
        let net = ResNet::new(file.config, 0);
        net.store.load(&file.params)?;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedResNet {
    config: ResNetConfig,
    params: Snapshot,
}

/// Row-major outputs of [`ResNet::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub classes: usize,
    pub feature_dim: usize,
    /// `[n, classes]`.
    pub probabilities: Vec<f64>,
    /// `[n, feature_dim]`.
    pub features: Vec<f64>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.probabilities.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probabilities_of(&self, i: usize) -> &[f64] {
        &self.probabilities[i * self.classes..(i + 1) * self.classes]
    }

    /// Arg-max class per row; ties go to the lower index.
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.probabilities
            .chunks(self.classes)
            .map(|p| p.iter().enumerate().fold(0, |best, (c, &v)| if v > p[best] { c } else { best }))
            .collect()
    }
}

/// One tapped activation map for a single image, `[A_l, H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureLayer {
    /// Channel vectors scaled to unit length at every spatial site (norm floored at [`NORM_EPS`]).
    pub fn unit_normalized(&self) -> Vec<f64> {
        let sites = self.height * self.width;
        let mut out = self.data.clone();
        for s in 0..sites {
            let norm = (0..self.channels).map(|a| self.data[a * sites + s].powi(2)).sum::<f64>().sqrt();
            let inv = 1.0 / norm.max(NORM_EPS);
            for a in 0..self.channels {
                out[a * sites + s] *= inv;
            }
        }
        out
    }
}

/// Per-layer activations of one image.
pub type FeatureStack = Vec<FeatureLayer>;

fn split_taps(taps: &[Tensor]) -> Vec<FeatureStack> {
    let batch = taps[0].dim(0);
    (0..batch)
        .map(|b| {
            taps.iter()
                .map(|t| {
                    let (a, h, w) = (t.dim(1), t.dim(2), t.dim(3));
                    let per = a * h * w;
                    FeatureLayer { channels: a, height: h, width: w, data: t.data()[b * per..(b + 1) * per].to_vec() }
                })
                .collect()
        })
        .collect()
}

/// One MC-dropout realisation for one image.
#[derive(Clone, Debug)]
pub struct McRun {
    pub probabilities: Vec<f64>,
    pub features: FeatureStack,
}

/// K dropout-active passes over one image.
#[derive(Clone, Debug)]
pub struct McRunSet {
    pub runs: Vec<McRun>,
}

/// Independent per-image dropout stream derived from `(seed, index)`.
pub fn image_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `k` dropout-active passes over each image. Image `j` draws its masks from
/// `image_stream(seed, j)`, run after run.
pub fn mc_forward(net: &ResNet, images: &[&PatchImage], k: usize, seed: u64) -> Result<Vec<McRunSet>> {
    let mut out = Vec::with_capacity(images.len());
    mc_forward_chunked(net, images, k, seed, |_, sets| {
        out.extend(sets);
        Ok(())
    })?;
    Ok(out)
}

/// Streams [`mc_forward`] results chunk by chunk to `sink(first_index, sets)`.
pub fn mc_forward_chunked(
    net: &ResNet,
    images: &[&PatchImage],
    k: usize,
    seed: u64,
    mut sink: impl FnMut(usize, Vec<McRunSet>) -> Result<()>,
) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("MC dropout needs at least one run".into()));
    }
    no_grad(|| {
        for (c, chunk) in images.chunks(INFERENCE_CHUNK).enumerate() {
            let first = c * INFERENCE_CHUNK;
            let x = stack_signed(chunk)?;
            let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len()).map(|j| image_stream(seed, (first + j) as u64)).collect();
            let mut sets: Vec<McRunSet> = (0..chunk.len()).map(|_| McRunSet { runs: Vec::with_capacity(k) }).collect();
            for _ in 0..k {
                let fwd = net.forward(&x, false, DropoutMode::PerSample(&mut rngs));
                let probs = fwd.logits.softmax(1);
                for (j, stack) in split_taps(&fwd.taps).into_iter().enumerate() {
                    let c = net.config.classes;
                    sets[j].runs.push(McRun { probabilities: probs.data()[j * c..(j + 1) * c].to_vec(), features: stack });
                }
            }
            sink(first, sets)?;
        }
        Ok(())
    })
}

/// −Σ p ln p with 0·ln 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean over runs of the per-run entropy.
pub fn predictive_entropy(runs: &McRunSet) -> f64 {
    runs.runs.iter().map(|r| entropy(&r.probabilities)).sum::<f64>() / runs.runs.len().max(1) as f64
}

/// Per-layer mean activation of one class's training images.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCentroid {
    pub class: usize,
    pub layers: FeatureStack,
    normalized: Vec<Vec<f64>>,
}

impl ClassCentroid {
    /// Averages `stacks` layer by layer.
    pub fn from_stacks(class: usize, stacks: &[FeatureStack]) -> Result<ClassCentroid> {
        let first = stacks.first().ok_or_else(|| Error::Validation(format!("class {class} has no images")))?;
        let mut layers: FeatureStack = first.iter().map(|l| FeatureLayer { data: vec![0.0; l.data.len()], ..l.clone() }).collect();
        for s in stacks {
            if s.len() != layers.len() || s.iter().zip(&layers).any(|(a, b)| a.data.len() != b.data.len()) {
                return Err(Error::Validation("feature stacks differ in shape".into()));
            }
            for (acc, l) in layers.iter_mut().zip(s) {
                acc.data.iter_mut().zip(&l.data).for_each(|(a, v)| *a += v);
            }
        }
        let n = stacks.len() as f64;
        for l in &mut layers {
            l.data.iter_mut().for_each(|v| *v /= n);
        }
        let normalized = layers.iter().map(FeatureLayer::unit_normalized).collect();
        Ok(ClassCentroid { class, layers, normalized })
    }
}

/// Centroid of class `class` from one forward pass per image, dropout active
/// (drawn from `seed`) or off.
pub fn class_centroid(
    net: &ResNet,
    class: usize,
    images: &[&PatchImage],
    with_dropout: bool,
    seed: u64,
) -> Result<ClassCentroid> {
    if images.is_empty() {
        return Err(Error::Validation(format!("class {class} has no training images")));
    }
    let mut stacks = Vec::with_capacity(images.len());
    if with_dropout {
        mc_forward_chunked(net, images, 1, seed, |_, sets| {
            stacks.extend(sets.into_iter().map(|mut s| s.runs.remove(0).features));
            Ok(())
        })?;
    } else {
        no_grad(|| -> Result<()> {
            for chunk in images.chunks(INFERENCE_CHUNK) {
                stacks.extend(split_taps(&net.forward(&stack_signed(chunk)?, false, DropoutMode::Off).taps));
            }
            Ok(())
        })?;
    }
    ClassCentroid::from_stacks(class, &stacks)
}

/// (1/K)·Σ_k Σ_l (1/(H_l·W_l))·‖φ̂_l^k(x) − φ̂_l(c)‖² with channel-wise unit-normalised activations.
pub fn feature_distance(runs: &McRunSet, centroid: &ClassCentroid) -> Result<f64> {
    let mut total = 0.0;
    for run in &runs.runs {
        if run.features.len() != centroid.layers.len() {
            return Err(Error::Validation("feature stack and centroid differ in depth".into()));
        }
        for ((layer, c), cl) in run.features.iter().zip(&centroid.normalized).zip(&centroid.layers) {
            if layer.data.len() != c.len() || layer.channels != cl.channels {
                return Err(Error::Validation("feature layer and centroid differ in shape".into()));
            }
            let x = layer.unit_normalized();
            let sq: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            total += sq / (layer.height * layer.width) as f64;
        }
    }
    Ok(total / runs.runs.len().max(1) as f64)
}

/// Per-image scoring record, exported as CSV `id,label,entropy,distance,K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub label: usize,
    pub entropy: f64,
    pub distance: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Flip and colour jitter applied on the fly in the traditional regime.
pub fn traditional_augment<R: Rng + ?Sized>(image: &PatchImage, cfg: &AugmentConfig, rng: &mut R) -> PatchImage {
    let (h, w) = (image.height(), image.width());
    let mut data = image.data().to_vec();
    if rng.random::<f64>() < cfg.flip_prob {
        data = flip_horizontal(&data, h, w);
    }
    let jitter = |amp: f64, rng: &mut R| if amp > 0.0 { 1.0 + rng.random_range(-amp..=amp) } else { 1.0 };
    let b = jitter(cfg.brightness, rng);
    let c = jitter(cfg.contrast, rng);
    let s = jitter(cfg.saturation, rng);
    let plane = h * w;
    data.iter_mut().for_each(|v| *v *= b);
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter_mut().for_each(|v| *v = mean + (*v - mean) * c);
    for i in 0..plane {
        let gray = 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i];
        for ch in 0..3 {
            let v = &mut data[ch * plane + i];
            *v = gray + (*v - gray) * s;
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    PatchImage::new(h, w, data).expect("shape preserved")
}

/// Mirrors each row of a `[3, H, W]` buffer.
pub fn flip_horizontal(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(w).take(3 * h) {
        row.reverse();
    }
    out
}

/// A training example: borrowed image and class label.
pub type Example<'a> = (&'a PatchImage, usize);

/// Classifier returned by [`train_classifier_on`], reloaded at its best validation epoch.
pub struct TrainedClassifier {
    pub model: ResNet,
    pub val_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
}

/// Cross-entropy training with Adam. With a validation set the parameters of
/// the epoch with the best validation accuracy are kept (earliest on ties).
pub fn train_classifier_on(
    net_cfg: ResNetConfig,
    train: &[Example<'_>],
    val: &[Example<'_>],
    cfg: &ClassifierConfig,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<TrainedClassifier> {
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let first = train[0].1;
    if train.iter().all(|e| e.1 == first) {
        return Err(Error::Validation("training set contains a single class".into()));
    }
    if let Some(e) = train.iter().chain(val).find(|e| e.1 >= net_cfg.classes) {
        return Err(Error::Validation(format!("label {} out of range", e.1)));
    }
    let net = ResNet::new(net_cfg, seed);
    let mut opt = Adam::new(net.store.trainable(), AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let val_images: Vec<&PatchImage> = val.iter().map(|e| e.0).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 && train.len() >= 2 {
                continue;
            }
            let augmented: Vec<PatchImage>;
            let images: Vec<&PatchImage> = match augment {
                Some(a) => {
                    augmented = idx.iter().map(|&i| traditional_augment(train[i].0, a, &mut rng)).collect();
                    augmented.iter().collect()
                }
                None => idx.iter().map(|&i| train[i].0).collect(),
            };
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].1).collect();
            let x = stack_signed(&images)?;
            let out = net.forward(&x, true, DropoutMode::Shared(&mut rng));
            let loss = cross_entropy(&out.logits, &labels);
            if !loss.item().is_finite() {
                return Err(Error::Numerical(format!("non-finite classifier loss at epoch {epoch}")));
            }
            loss_sum += loss.item();
            batches += 1;
            opt.step(&loss.backward());
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        train_losses.push(mean_loss);
        if !val.is_empty() {
            let pred = net.predict(&val_images)?.predicted_labels();
            let acc = pred.iter().zip(val).filter(|(p, e)| **p == e.1).count() as f64 / val.len() as f64;
            debug!("classifier epoch {epoch}: loss {mean_loss:.4}, val acc {acc:.3}");
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, net.store.snapshot()));
            }
        }
    }
    let (val_accuracy, best_epoch) = match best {
        Some((acc, epoch, snap)) => {
            net.store.load(&snap)?;
            (Some(acc), epoch)
        }
        None => (None, cfg.epochs.saturating_sub(1)),
    };
    info!("classifier trained: best epoch {best_epoch}, val acc {val_accuracy:?}");
    Ok(TrainedClassifier { model: net, val_accuracy, best_epoch, train_losses })
}

/// Mean negative log-likelihood of `labels` under `logits` (`[B, C]`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let onehot = Tensor::one_hot(labels, logits.dim(1));
    logits.log_softmax(1).mul(&onehot).sum_all().scale(-1.0 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn layer(channels: usize, data: Vec<f64>) -> FeatureLayer {
        let sites = data.len() / channels;
        FeatureLayer { channels, height: 1, width: sites, data }
    }

    fn runs_of(stacks: Vec<FeatureStack>) -> McRunSet {
        McRunSet { runs: stacks.into_iter().map(|features| McRun { probabilities: vec![1.0], features }).collect() }
    }

    fn tiny_config(dropout: f64) -> ResNetConfig {
        ResNetConfig { classes: 3, base_channels: 4, blocks: [1, 1, 1, 1], dropout, stem_stride: 1 }
    }

    fn image(v: f64) -> PatchImage {
        PatchImage::new(8, 8, (0..192).map(|i| (v + 0.01 * (i % 7) as f64).clamp(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let single = |p: Vec<f64>| McRunSet { runs: vec![McRun { probabilities: p, features: vec![] }] };
        assert_eq!(predictive_entropy(&single(vec![1.0, 0.0, 0.0, 0.0])), 0.0);
        assert_abs_diff_eq!(predictive_entropy(&single(vec![0.25; 4])), 4f64.ln(), epsilon = 1e-15);
        let two = McRunSet {
            runs: vec![
                McRun { probabilities: vec![1.0, 0.0], features: vec![] },
                McRun { probabilities: vec![0.5, 0.5], features: vec![] },
            ],
        };
        assert_abs_diff_eq!(predictive_entropy(&two), 2f64.ln() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn distance_examples() {
        let u = vec![layer(3, vec![0.6, 0.8, 0.0])];
        let centroid = ClassCentroid::from_stacks(0, std::slice::from_ref(&u)).unwrap();
        assert_eq!(feature_distance(&runs_of(vec![u.clone()]), &centroid).unwrap(), 0.0);
        let neg = vec![layer(3, vec![-0.6, -0.8, 0.0])];
        assert_abs_diff_eq!(feature_distance(&runs_of(vec![neg]), &centroid).unwrap(), 4.0, epsilon = 1e-12);
        let orth = vec![layer(3, vec![0.0, 0.0, 2.5])];
        assert_abs_diff_eq!(feature_distance(&runs_of(vec![orth.clone()]), &centroid).unwrap(), 2.0, epsilon = 1e-12);
        // averaged over runs
        assert_abs_diff_eq!(feature_distance(&runs_of(vec![u, orth]), &centroid).unwrap(), 1.0, epsilon = 1e-12);
        // a zero vector normalises to zero and sits at distance 1 from a unit centroid
        let zero = vec![layer(3, vec![0.0; 3])];
        assert_abs_diff_eq!(feature_distance(&runs_of(vec![zero]), &centroid).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_divides_by_spatial_sites() {
        // two sites, one matching and one antipodal: (0 + 4) / 2
        let c = vec![layer(2, vec![1.0, 1.0, 0.0, 0.0])];
        let x = vec![layer(2, vec![1.0, -1.0, 0.0, 0.0])];
        let centroid = ClassCentroid::from_stacks(0, &[c]).unwrap();
        assert_abs_diff_eq!(feature_distance(&runs_of(vec![x]), &centroid).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn centroid_examples() {
        let a = vec![layer(2, vec![1.0, 3.0])];
        let b = vec![layer(2, vec![3.0, -1.0])];
        assert_eq!(ClassCentroid::from_stacks(1, std::slice::from_ref(&a)).unwrap().layers, a);
        assert_eq!(ClassCentroid::from_stacks(1, &[a, b]).unwrap().layers, vec![layer(2, vec![2.0, 1.0])]);
        let z = vec![layer(2, vec![0.0, 0.0])];
        assert_eq!(ClassCentroid::from_stacks(0, &[z.clone(), z.clone()]).unwrap().layers, z);
        assert!(ClassCentroid::from_stacks(0, &[]).is_err());
    }

    #[test]
    fn network_shapes_and_taps() {
        let net = ResNet::new(tiny_config(0.5), 1);
        let imgs = [image(0.2), image(0.7)];
        let x = stack_signed(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let out = no_grad(|| net.forward(&x, false, DropoutMode::Off));
        assert_eq!(out.logits.shape(), &[2, 3]);
        assert_eq!(out.taps.len(), 4);
        let shapes: Vec<_> = out.taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 8, 8], vec![2, 8, 4, 4], vec![2, 16, 2, 2], vec![2, 32, 1, 1]]);
        assert_eq!(out.pooled.shape(), &[2, 32]);
        let four = ResNet::new(ResNetConfig { classes: 4, ..tiny_config(0.5) }, 1);
        assert_eq!(four.predict(&[&imgs[0]]).unwrap().probabilities.len(), 4);
    }

    #[test]
    fn mc_forward_without_dropout_is_deterministic_forward() {
        let net = ResNet::new(tiny_config(0.0), 2);
        let img = image(0.4);
        let sets = mc_forward(&net, &[&img], 1, 9).unwrap();
        let det = net.predict(&[&img]).unwrap();
        for (a, b) in sets[0].runs[0].probabilities.iter().zip(det.probabilities_of(0)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mc_runs_differ_and_stay_on_the_simplex() {
        let net = ResNet::new(tiny_config(0.5), 3);
        let img = image(0.4);
        let sets = mc_forward(&net, &[&img, &img], 5, 11).unwrap();
        assert_eq!(sets[0].runs.len(), 5);
        for run in sets.iter().flat_map(|s| &s.runs) {
            assert_abs_diff_eq!(run.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(run.probabilities.iter().all(|&p| p >= 0.0));
        }
        assert_ne!(sets[0].runs[0].probabilities, sets[0].runs[1].probabilities);
        // per-image streams: the same image at another index gets other masks
        assert_ne!(sets[0].runs[0].probabilities, sets[1].runs[0].probabilities);
        // and batching does not change an image's result
        let alone = mc_forward(&net, &[&img], 5, 11).unwrap();
        assert_eq!(alone[0].runs[3].probabilities, sets[0].runs[3].probabilities);
    }

    #[test]
    fn augment_identity_and_flip_involution() {
        let img = image(0.3);
        let off = AugmentConfig { flip_prob: 0.0, brightness: 0.0, contrast: 0.0, saturation: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = traditional_augment(&img, &off, &mut rng);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(flip_horizontal(&flip_horizontal(img.data(), 8, 8), 8, 8), img.data());
        let strong = AugmentConfig { flip_prob: 0.5, brightness: 0.9, contrast: 0.9, saturation: 0.9 };
        for _ in 0..20 {
            let out = traditional_augment(&img, &strong, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn training_separates_two_colours() {
        let mut imgs = Vec::new();
        for i in 0..24 {
            imgs.push((image(if i % 2 == 0 { 0.15 } else { 0.85 } + 0.003 * i as f64), i % 2));
        }
        let train: Vec<Example<'_>> = imgs[..16].iter().map(|(im, l)| (im, *l)).collect();
        let val: Vec<Example<'_>> = imgs[16..].iter().map(|(im, l)| (im, *l)).collect();
        let cfg = ClassifierConfig { epochs: 6, batch_size: 8, learning_rate: 1e-2, ..Default::default() };
        let net_cfg = ResNetConfig { classes: 2, ..tiny_config(0.5) };
        let trained = train_classifier_on(net_cfg.clone(), &train, &val, &cfg, None, 4).unwrap();
        assert!(trained.val_accuracy.unwrap() > 0.9, "{:?}", trained.val_accuracy);
        let one_class: Vec<Example<'_>> = train.iter().copied().filter(|e| e.1 == 0).collect();
        assert!(train_classifier_on(net_cfg, &one_class, &[], &cfg, None, 4).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        trained.model.save(&path).unwrap();
        let back = ResNet::load(&path).unwrap();
        let a = trained.model.predict(&[&imgs[0].0]).unwrap();
        assert_eq!(a.probabilities, back.predict(&[&imgs[0].0]).unwrap().probabilities);
    }
}
