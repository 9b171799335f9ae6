//! Multi-stage conditional GAN.
//!
//! Stage I maps noise plus a label embedding through four bilinear up-blocks
//! (3×3 conv, conditional batch norm, ReLU) and a self-attention layer; each
//! later stage refines the hidden features with residual blocks and doubles
//! the resolution once more. Every stage emits an RGB image through a 3×3
//! conv and tanh, so a forward pass yields an image pyramid in `[-1, 1]`.
//!
//! Each stage has its own critic: strided 4×4 down-sampling convs with
//! conditional batch norm, self-attention after the second down-sample, a 3×3
//! conv, batch norm, LeakyReLU, minibatch discrimination and a linear score
//! with a label projection. All critic conv and linear weights are spectrally
//! normalised. Training uses the gradient-penalty critic objective.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GanConfig};
use crate::datasets::{stack_signed, DatasetProfile, PatchDataset, PatchImage};
use crate::nn::{
    avg_pool2x, upsample_bilinear2x, Adam, AdamConfig, BatchNorm, ConditionalBatchNorm, Conv2d, Linear,
    MinibatchDiscrimination, ParamStore, Path as VarPath, SelfAttention, Snapshot, SpectralNorm,
};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;

/// Spatial reduction of the stage-I input relative to the stage-I output (four 2× up-blocks).
const STAGE1_REDUCTION: usize = 16;

/// Network shapes shared by generator, critics and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanArch {
    pub classes: usize,
    /// `(height, width)` per stage, coarsest first.
    pub resolutions: Vec<(usize, usize)>,
    pub noise_dim: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub residual_blocks: usize,
    pub power_iters: usize,
    pub mbd_kernels: usize,
    pub mbd_kernel_dim: usize,
}

impl GanArch {
    pub fn new(profile: &DatasetProfile, gan: &GanConfig) -> Result<GanArch> {
        let resolutions = profile.stage_resolutions(gan.stage_count)?;
        let (h0, w0) = resolutions[0];
        if h0 % STAGE1_REDUCTION != 0 || w0 % STAGE1_REDUCTION != 0 {
            return Err(Error::Validation(format!(
                "stage-I resolution {h0}x{w0} is not divisible by {STAGE1_REDUCTION}"
            )));
        }
        Ok(GanArch {
            classes: profile.class_count(),
            resolutions,
            noise_dim: gan.noise_dim,
            base_channels: gan.base_channels,
            disc_channels: gan.disc_channels,
            residual_blocks: gan.residual_blocks,
            power_iters: gan.power_iters.max(1),
            mbd_kernels: gan.mbd_kernels,
            mbd_kernel_dim: gan.mbd_kernel_dim,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.resolutions.len()
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.classes) {
            Some(l) => Err(Error::Validation(format!("label {l} out of range for {} classes", self.classes))),
            None => Ok(()),
        }
    }
}

#[derive(Clone)]
struct UpBlock {
    conv: Conv2d,
    bn: ConditionalBatchNorm,
}

impl UpBlock {
    fn new(p: &VarPath, in_ch: usize, out_ch: usize, classes: usize) -> UpBlock {
        UpBlock {
            conv: Conv2d::new(&p.push("conv"), in_ch, out_ch, 3, 1, 1, false),
            bn: ConditionalBatchNorm::new(&p.push("cbn"), out_ch, classes),
        }
    }

    fn forward(&self, x: &Tensor, labels: &[usize], train: bool) -> Result<Tensor> {
        let h = self.conv.forward(&upsample_bilinear2x(x));
        Ok(self.bn.forward(&h, labels, train)?.relu())
    }
}

#[derive(Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: ConditionalBatchNorm,
    conv2: Conv2d,
    bn2: ConditionalBatchNorm,
}

impl ResBlock {
    fn new(p: &VarPath, ch: usize, classes: usize) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(&p.push("conv1"), ch, ch, 3, 1, 1, false),
            bn1: ConditionalBatchNorm::new(&p.push("cbn1"), ch, classes),
            conv2: Conv2d::new(&p.push("conv2"), ch, ch, 3, 1, 1, false),
            bn2: ConditionalBatchNorm::new(&p.push("cbn2"), ch, classes),
        }
    }

    fn forward(&self, x: &Tensor, labels: &[usize], train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x), labels, train)?.relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), labels, train)?;
        Ok(x.add(&h))
    }
}

#[derive(Clone)]
struct RefineStage {
    residual: Vec<ResBlock>,
    up: UpBlock,
}

/// Image pyramid plus the stage-I attention map of one generator pass.
pub struct GeneratorOutput {
    /// One `[B, 3, H_s, W_s]` tensor per stage, values in `[-1, 1]`.
    pub pyramid: Vec<Tensor>,
    /// Stage-I self-attention, `[B, N, N]` with N = H·W of the attended map.
    pub attention: Tensor,
    /// Spatial size of the attended feature map.
    pub attention_size: (usize, usize),
}

#[derive(Clone)]
pub struct Generator {
    pub arch: GanArch,
    store: ParamStore,
    embed: Linear,
    project: Linear,
    project_bn: ConditionalBatchNorm,
    stage1: Vec<UpBlock>,
    attention: SelfAttention,
    refine: Vec<RefineStage>,
    to_rgb: Vec<Conv2d>,
}

impl Generator {
    pub fn new(arch: GanArch, seed: u64) -> Generator {
        let store = ParamStore::new(seed);
        let root = store.root();
        let (c, classes) = (arch.base_channels, arch.classes);
        let wide = 2 * c;
        let (h0, w0) = arch.resolutions[0];
        let cells = (h0 / STAGE1_REDUCTION) * (w0 / STAGE1_REDUCTION);
        let embed = Linear::new(&root.push("label_embed"), classes, arch.noise_dim, false);
        let project = Linear::new(&root.push("project"), 2 * arch.noise_dim, wide * cells, true);
        let project_bn = ConditionalBatchNorm::new(&root.push("project_cbn"), wide, classes);
        let widths = [(wide, wide), (wide, wide), (wide, c), (c, c)];
        let stage1 = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| UpBlock::new(&root.push(format!("stage1.up{i}")), a, b, classes))
            .collect();
        let attention = SelfAttention::new(&root.push("stage1.attention"), c);
        let refine = (1..arch.stage_count())
            .map(|s| {
                let p = root.push(format!("stage{}", s + 1));
                RefineStage {
                    residual: (0..arch.residual_blocks).map(|r| ResBlock::new(&p.push(format!("res{r}")), c, classes)).collect(),
                    up: UpBlock::new(&p.push("up"), c, c, classes),
                }
            })
            .collect();
        let to_rgb =
            (0..arch.stage_count()).map(|s| Conv2d::new(&root.push(format!("stage{}.to_rgb", s + 1)), c, 3, 3, 1, 1, true)).collect();
        Generator { arch, store, embed, project, project_bn, stage1, attention, refine, to_rgb }
    }

    /// Rebuilds a generator from checkpointed parameters.
    pub fn from_snapshot(arch: GanArch, params: &Snapshot) -> Result<Generator> {
        let g = Generator::new(arch, 0);
        g.store.load(params)?;
        Ok(g)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `z` is `[B, noise_dim]`; `labels[b]` conditions item `b`.
    pub fn forward(&self, z: &Tensor, labels: &[usize], train: bool) -> Result<GeneratorOutput> {
        let arch = &self.arch;
        if z.rank() != 2 || z.dim(1) != arch.noise_dim || z.dim(0) != labels.len() {
            return Err(Error::Validation(format!(
                "noise {:?} does not match {} labels of noise_dim {}",
                z.shape(),
                labels.len(),
                arch.noise_dim
            )));
        }
        arch.check_labels(labels)?;
        let b = labels.len();
        let (h0, w0) = arch.resolutions[0];
        let e = self.embed.forward(&Tensor::one_hot(labels, arch.classes));
        let h = self.project.forward(&Tensor::concat(&[z.clone(), e], 1)).reshape(&[
            b,
            2 * arch.base_channels,
            h0 / STAGE1_REDUCTION,
            w0 / STAGE1_REDUCTION,
        ]);
        let mut h = self.project_bn.forward(&h, labels, train)?.relu();
        for up in &self.stage1 {
            h = up.forward(&h, labels, train)?;
        }
        let att = self.attention.forward(&h)?;
        h = att.output;
        let mut pyramid = vec![self.to_rgb[0].forward(&h).tanh()];
        for (s, stage) in self.refine.iter().enumerate() {
            for r in &stage.residual {
                h = r.forward(&h, labels, train)?;
            }
            h = stage.up.forward(&h, labels, train)?;
            pyramid.push(self.to_rgb[s + 1].forward(&h).tanh());
        }
        Ok(GeneratorOutput { pyramid, attention: att.attention, attention_size: (h0, w0) })
    }

    /// Inference-mode pass without gradient tracking.
    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<GeneratorOutput> {
        no_grad(|| self.forward(z, labels, false))
    }

    /// Final-stage images, one per `(label, seed)`; the noise of each image is drawn from its own seed.
    pub fn generate_images(&self, labels: &[usize], seeds: &[u64]) -> Result<Vec<PatchImage>> {
        let mut out = Vec::with_capacity(labels.len());
        for (lc, sc) in labels.chunks(64).zip(seeds.chunks(64)) {
            let z = noise_from_seeds(sc, self.arch.noise_dim);
            let g = self.generate(&z, lc)?;
            let last = g.pyramid.last().expect("at least one stage");
            out.extend(split_images(last)?);
        }
        Ok(out)
    }
}

/// `[B, noise_dim]` standard-normal noise, row `b` drawn from `seeds[b]`.
pub fn noise_from_seeds(seeds: &[u64], noise_dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(seeds.len() * noise_dim);
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        data.extend((0..noise_dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
    }
    Tensor::new(data, &[seeds.len(), noise_dim])
}

/// Splits a `[B, 3, H, W]` tensor in `[-1, 1]` into images in `[0, 1]`.
pub fn split_images(t: &Tensor) -> Result<Vec<PatchImage>> {
    let (b, h, w) = (t.dim(0), t.dim(2), t.dim(3));
    let per = 3 * h * w;
    (0..b)
        .map(|i| PatchImage::from_signed_tensor(&Tensor::new(t.data()[i * per..(i + 1) * per].to_vec(), &[3, h, w])))
        .collect()
}

#[derive(Clone)]
struct DownBlock {
    conv: Conv2d,
    sn: SpectralNorm,
    bn: ConditionalBatchNorm,
}

impl DownBlock {
    fn new(p: &VarPath, in_ch: usize, out_ch: usize, classes: usize, iters: usize) -> DownBlock {
        DownBlock {
            conv: Conv2d::new(&p.push("conv"), in_ch, out_ch, 4, 2, 1, true),
            sn: SpectralNorm::new(&p.push("conv"), out_ch, iters),
            bn: ConditionalBatchNorm::new(&p.push("cbn"), out_ch, classes),
        }
    }

    fn forward(&self, x: &Tensor, labels: &[usize], train: bool) -> Result<Tensor> {
        let w = self.sn.apply(&self.conv.weight.tensor(), train);
        let h = self.conv.forward_with_weight(x, &w);
        Ok(self.bn.forward(&h, labels, train)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// Critic for one stage's resolution.
#[derive(Clone)]
pub struct Critic {
    pub resolution: (usize, usize),
    classes: usize,
    downs: Vec<DownBlock>,
    attention: SelfAttention,
    attention_after: usize,
    conv: Conv2d,
    conv_sn: SpectralNorm,
    bn: BatchNorm,
    mbd: MinibatchDiscrimination,
    fc: Linear,
    fc_sn: SpectralNorm,
    label_proj: Linear,
    label_proj_sn: SpectralNorm,
}

impl Critic {
    fn new(p: &VarPath, arch: &GanArch, resolution: (usize, usize)) -> Critic {
        let (h, w) = resolution;
        let mut downs = Vec::new();
        let mut size = h.min(w);
        let mut in_ch = 3;
        let mut out_ch = arch.disc_channels;
        let mut widths = Vec::new();
        while downs.is_empty() || size > 4 {
            downs.push(DownBlock::new(&p.push(format!("down{}", downs.len())), in_ch, out_ch, arch.classes, arch.power_iters));
            size /= 2;
            widths.push(out_ch);
            in_ch = out_ch;
            out_ch = (out_ch * 2).min(arch.disc_channels * 8);
        }
        let shrink = 1 << downs.len();
        let features = in_ch * (h / shrink) * (w / shrink);
        let mbd = MinibatchDiscrimination::new(&p.push("mbd"), features, arch.mbd_kernels, arch.mbd_kernel_dim);
        let widened = mbd.out_features(features);
        let attention_after = downs.len().min(2) - 1;
        Critic {
            resolution,
            classes: arch.classes,
            attention: SelfAttention::new(&p.push("attention"), widths[attention_after]),
            attention_after,
            conv: Conv2d::new(&p.push("conv"), in_ch, in_ch, 3, 1, 1, true),
            conv_sn: SpectralNorm::new(&p.push("conv"), in_ch, arch.power_iters),
            bn: BatchNorm::new(&p.push("bn"), in_ch),
            mbd,
            fc: Linear::new(&p.push("fc"), widened, 1, true),
            fc_sn: SpectralNorm::new(&p.push("fc"), 1, arch.power_iters),
            label_proj: Linear::new(&p.push("label_proj"), arch.classes, widened, false),
            label_proj_sn: SpectralNorm::new(&p.push("label_proj"), widened, arch.power_iters),
            downs,
        }
    }

    /// `[B, 3, H, W]` images to `[B]` unbounded scores.
    pub fn forward(&self, x: &Tensor, labels: &[usize], train: bool) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != 3 || (x.dim(2), x.dim(3)) != self.resolution {
            return Err(Error::Validation(format!(
                "critic for {:?} got images {:?}",
                self.resolution,
                x.shape()
            )));
        }
        if labels.len() != x.dim(0) {
            return Err(Error::Validation(format!("{} labels for {} images", labels.len(), x.dim(0))));
        }
        let mut h = x.clone();
        for (i, d) in self.downs.iter().enumerate() {
            h = d.forward(&h, labels, train)?;
            if i == self.attention_after {
                h = self.attention.forward(&h)?.output;
            }
        }
        let w = self.conv_sn.apply(&self.conv.weight.tensor(), train);
        h = self.bn.forward(&self.conv.forward_with_weight(&h, &w), train).leaky_relu(LEAKY_SLOPE);
        let f = self.mbd.forward(&h.flatten_from(1));
        let fc_w = self.fc_sn.apply(&self.fc.weight.tensor(), train);
        let score = self.fc.forward_with_weight(&f, &fc_w).reshape(&[x.dim(0)]);
        let proj_w = self.label_proj_sn.apply(&self.label_proj.weight.tensor(), train);
        let e = self.label_proj.forward_with_weight(&Tensor::one_hot(labels, self.classes), &proj_w);
        Ok(score.add(&f.mul(&e).sum_axes(&[1])))
    }
}

/// One critic per stage, sharing a parameter store.
#[derive(Clone)]
pub struct Discriminator {
    pub arch: GanArch,
    store: ParamStore,
    pub critics: Vec<Critic>,
}

impl Discriminator {
    pub fn new(arch: GanArch, seed: u64) -> Discriminator {
        let store = ParamStore::new(seed);
        let critics =
            arch.resolutions.iter().enumerate().map(|(s, &r)| Critic::new(&store.root().push(format!("stage{}", s + 1)), &arch, r)).collect();
        Discriminator { arch, store, critics }
    }

    pub fn from_snapshot(arch: GanArch, params: &Snapshot) -> Result<Discriminator> {
        let d = Discriminator::new(arch, 0);
        d.store.load(params)?;
        Ok(d)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Scores of stage `stage`'s critic.
    pub fn forward(&self, image: &Tensor, labels: &[usize], stage: usize, train: bool) -> Result<Tensor> {
        self.arch.check_labels(labels)?;
        let critic = self
            .critics
            .get(stage)
            .ok_or_else(|| Error::Validation(format!("stage {stage} out of range for {} stages", self.critics.len())))?;
        critic.forward(image, labels, train)
    }
}

/// mean(fake) − mean(real) + δ·mean((‖∇‖ − 1)²).
pub fn critic_loss(real_scores: &[f64], fake_scores: &[f64], grad_norms: &[f64], delta: f64) -> f64 {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let penalty: Vec<f64> = grad_norms.iter().map(|g| (g - 1.0).powi(2)).collect();
    mean(fake_scores) - mean(real_scores) + delta * mean(&penalty)
}

/// −mean(fake) per stage, summed over stages.
pub fn generator_loss(fake_scores_per_stage: &[Vec<f64>]) -> f64 {
    fake_scores_per_stage
        .iter()
        .map(|s| if s.is_empty() { 0.0 } else { -s.iter().sum::<f64>() / s.len() as f64 })
        .sum()
}

/// Tensor form of [`critic_loss`] for one stage; the penalty is differentiable with respect to the critic.
fn critic_loss_tensor(
    critic: &Discriminator,
    stage: usize,
    real: &Tensor,
    fake: &Tensor,
    labels: &[usize],
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let real_scores = critic.forward(real, labels, stage, true)?;
    let fake_scores = critic.forward(fake, labels, stage, true)?;
    let mut loss = fake_scores.mean_all().sub(&real_scores.mean_all());
    if delta > 0.0 {
        let b = real.dim(0);
        let per = real.numel() / b;
        let mut mixed = Vec::with_capacity(real.numel());
        for i in 0..b {
            let eps: f64 = rng.random();
            let (r, f) = (&real.data()[i * per..(i + 1) * per], &fake.data()[i * per..(i + 1) * per]);
            mixed.extend(r.iter().zip(f).map(|(a, c)| eps * a + (1.0 - eps) * c));
        }
        let interp = Tensor::var(mixed, real.shape());
        let scores = critic.forward(&interp, labels, stage, true)?;
        let grads = scores.sum_all().backward_with_graph();
        let g = grads.get(&interp).cloned().unwrap_or_else(|| Tensor::zeros(real.shape()));
        let norms = g.sqr().sum_axes(&[1, 2, 3]).add_scalar(1e-12).sqrt();
        let penalty = norms.add_scalar(-1.0).sqr().mean_all().scale(delta);
        loss = loss.add(&penalty);
    }
    Ok(loss)
}

/// Real images at every stage resolution, finest last, via repeated 2×2 area averaging.
pub fn real_pyramid(images: &Tensor, stages: usize) -> Vec<Tensor> {
    let mut out = vec![images.clone()];
    for _ in 1..stages {
        let next = avg_pool2x(out.last().expect("non-empty"));
        out.push(next);
    }
    out.reverse();
    out
}

/// Generator and discriminator parameters after one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpoint {
    pub epoch: usize,
    pub stage_count: usize,
    pub class_count: usize,
    pub arch: GanArch,
    pub config_fingerprint: String,
    pub generator: Snapshot,
    pub discriminator: Snapshot,
}

impl GanCheckpoint {
    pub fn file_name(epoch: usize) -> String {
        format!("gan_epoch_{epoch:04}")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(GanCheckpoint::file_name(self.epoch));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<GanCheckpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: GanCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.stage_count != ckpt.arch.stage_count() || ckpt.class_count != ckpt.arch.classes {
            return Err(Error::Format(format!("{}: metadata disagrees with architecture", path.display())));
        }
        Ok(ckpt)
    }

    /// Every `gan_epoch_*` file in `dir`, ordered by epoch.
    pub fn list(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut found: Vec<(usize, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let epoch = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("gan_epoch_"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(epoch) = epoch {
                found.push((epoch, path));
            }
        }
        found.sort();
        Ok(found.into_iter().map(|(_, p)| p).collect())
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::from_snapshot(self.arch.clone(), &self.generator)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        Discriminator::from_snapshot(self.arch.clone(), &self.discriminator)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_loss: f64,
    pub gen_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint_epochs: Vec<usize>,
    pub steps: usize,
}

impl TrainingLog {
    /// Writes `epoch,critic_loss,gen_loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochLog>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

/// Epochs that produce a checkpoint: every epoch after the warm-up.
pub fn checkpoint_epochs(epochs: usize, warmup: usize) -> std::ops::RangeInclusive<usize> {
    (warmup + 1)..=epochs
}

/// Alternating critic/generator training on the training split. Each epoch
/// after the warm-up is handed to `on_checkpoint` as it completes.
pub fn train_gan(
    dataset: &PatchDataset,
    config: &ExperimentConfig,
    mut on_checkpoint: impl FnMut(GanCheckpoint) -> Result<()>,
) -> Result<TrainingLog> {
    let gan = &config.gan;
    let train = dataset.train_patches();
    if train.is_empty() {
        return Err(Error::Validation("GAN training needs a non-empty training split".into()));
    }
    config.validate()?;
    let arch = GanArch::new(dataset.profile(), gan)?;
    let generator = Generator::new(arch.clone(), config.seed);
    let critic = Discriminator::new(arch.clone(), config.seed.wrapping_add(1));
    let adam = AdamConfig { lr: gan.learning_rate, beta1: gan.beta1, beta2: gan.beta2, eps: 1e-8 };
    let mut g_opt = Adam::new(generator.store().trainable(), adam);
    let mut d_opt = Adam::new(critic.store().trainable(), adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a6e_7261);
    let fingerprint = config.fingerprint();
    let stages = arch.stage_count();
    let batch = gan.batch_size.min(train.len()).max(1);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let budget_left = |steps: usize| gan.max_steps == 0 || steps < gan.max_steps;

    'epochs: for epoch in 1..=gan.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let (mut c_sum, mut g_sum, mut finite_steps, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(batch) {
            if !budget_left(log.steps) {
                break;
            }
            if idx.len() < batch.min(2) {
                continue;
            }
            let images: Vec<&PatchImage> = idx.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let reals = real_pyramid(&stack_signed(&images)?, stages);

            let mut c_loss = 0.0;
            for _ in 0..gan.critic_steps.max(1) {
                let z = Tensor::randn(&[idx.len(), arch.noise_dim], &mut rng);
                let fakes = no_grad(|| generator.forward(&z, &labels, true))?.pyramid;
                let mut total: Option<Tensor> = None;
                for s in 0..stages {
                    let l = critic_loss_tensor(&critic, s, &reals[s], &fakes[s].detach(), &labels, gan.gp_weight, &mut rng)?;
                    total = Some(match total {
                        Some(t) => t.add(&l),
                        None => l,
                    });
                }
                let total = total.expect("at least one stage");
                c_loss = total.item();
                if c_loss.is_finite() {
                    d_opt.step(&total.backward());
                }
            }

            let z = Tensor::randn(&[idx.len(), arch.noise_dim], &mut rng);
            let fakes = generator.forward(&z, &labels, true)?.pyramid;
            let mut g_total: Option<Tensor> = None;
            for (s, fake) in fakes.iter().enumerate() {
                let l = critic.forward(fake, &labels, s, true)?.mean_all().neg();
                g_total = Some(match g_total {
                    Some(t) => t.add(&l),
                    None => l,
                });
            }
            let g_total = g_total.expect("at least one stage");
            let g_loss = g_total.item();
            if g_loss.is_finite() {
                g_opt.step(&g_total.backward());
            }

            log.steps += 1;
            steps += 1;
            if c_loss.is_finite() && g_loss.is_finite() {
                c_sum += c_loss;
                g_sum += g_loss;
                finite_steps += 1;
            }
        }
        if steps == 0 {
            break 'epochs;
        }
        if finite_steps == 0 {
            return Err(Error::Numerical(format!("every GAN loss in epoch {epoch} was non-finite")));
        }
        if finite_steps < steps {
            warn!("epoch {epoch}: {} non-finite steps skipped", steps - finite_steps);
        }
        let entry = EpochLog { epoch, critic_loss: c_sum / finite_steps as f64, gen_loss: g_sum / finite_steps as f64 };
        info!("gan epoch {epoch}: critic {:.4}, generator {:.4}", entry.critic_loss, entry.gen_loss);
        log.epochs.push(entry);
        if epoch > gan.warmup_epochs {
            on_checkpoint(GanCheckpoint {
                epoch,
                stage_count: stages,
                class_count: arch.classes,
                arch: arch.clone(),
                config_fingerprint: fingerprint.clone(),
                generator: generator.store().snapshot(),
                discriminator: critic.store().snapshot(),
            })?;
            log.checkpoint_epochs.push(epoch);
        }
        if !budget_left(log.steps) {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_arch(stages: usize, final_size: usize) -> GanArch {
        let profile = DatasetProfile {
            name: "t".into(),
            height: final_size,
            width: final_size,
            stage_count: stages,
            class_names: vec!["a".into(), "b".into()],
        };
        let gan = GanConfig {
            stage_count: stages,
            noise_dim: 8,
            base_channels: 4,
            disc_channels: 4,
            residual_blocks: 1,
            mbd_kernels: 2,
            mbd_kernel_dim: 2,
            ..Default::default()
        };
        GanArch::new(&profile, &gan).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_abs_diff_eq!(critic_loss(&[2.0, 2.0], &[5.0, 5.0], &[1.0, 1.0], 50.0), 3.0);
        assert_abs_diff_eq!(critic_loss(&[1.0], &[1.0], &[2.0, 2.0], 50.0), 50.0);
        assert_abs_diff_eq!(critic_loss(&[1.0, 3.0], &[0.0], &[3.0], 0.0), -2.0);
        assert_eq!(generator_loss(&[vec![1.0, 3.0]]), -2.0);
        assert_eq!(generator_loss(&[vec![0.0, 0.0], vec![0.0]]), 0.0);
        assert_eq!(generator_loss(&[vec![2.0, 6.0]]), 2.0 * generator_loss(&[vec![1.0, 3.0]]));
    }

    #[test]
    fn pyramid_resolutions_double() {
        let arch = tiny_arch(2, 32);
        let g = Generator::new(arch.clone(), 1);
        let z = noise_from_seeds(&[1, 2, 3], 8);
        let out = g.generate(&z, &[0, 1, 1]).unwrap();
        let shapes: Vec<_> = out.pyramid.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![3, 3, 16, 16], vec![3, 3, 32, 32]]);
        assert!(out.pyramid.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(out.attention.shape(), &[3, 256, 256]);
        let again = g.generate(&z, &[0, 1, 1]).unwrap();
        assert_eq!(again.pyramid[1].to_vec(), out.pyramid[1].to_vec());
        assert!(g.generate(&noise_from_seeds(&[1], 7), &[0]).is_err());
        assert!(g.generate(&noise_from_seeds(&[1], 8), &[2]).is_err());
    }

    #[test]
    fn snapshot_of_another_arch_is_rejected() {
        let g = Generator::new(tiny_arch(2, 32), 1);
        assert!(Generator::from_snapshot(tiny_arch(1, 32), &g.store().snapshot()).is_err());
    }

    #[test]
    fn critic_scores_are_finite_per_image_and_conditional() {
        let arch = tiny_arch(2, 32);
        let d = Discriminator::new(arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 3, 32, 32], -1.0, 1.0, &mut rng);
        let s0 = no_grad(|| d.forward(&x, &[0, 0, 0, 0], 1, false)).unwrap();
        let s1 = no_grad(|| d.forward(&x, &[1, 1, 1, 1], 1, false)).unwrap();
        assert_eq!(s0.shape(), &[4]);
        assert!(s0.all_finite());
        assert_ne!(s0.to_vec(), s1.to_vec());
        assert!(d.forward(&x, &[0; 4], 0, false).is_err());
        assert!(d.forward(&x, &[0; 4], 2, false).is_err());
    }

    #[test]
    fn checkpoint_epoch_count() {
        assert_eq!(checkpoint_epochs(1000, 100).count(), 900);
        assert_eq!(*checkpoint_epochs(1000, 100).start(), 101);
    }

    #[test]
    fn real_pyramid_area_averages() {
        let x = Tensor::new((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let p = real_pyramid(&x, 2);
        assert_eq!(p[0].to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        assert_eq!(p[1].to_vec(), x.to_vec());
    }
}
