//! Labeled image-patch datasets: on-disk format, patient-level splits and
//! stratified subsets.
//!
//! A dataset directory holds one sub-folder per class with PNG patches and a
//! `manifest.csv` with header `filename,label,patient_id,split`. `filename` is
//! relative to the dataset root, `label` is a class name of the profile and
//! `split` is one of `train`, `val`, `test` (empty while unassigned).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// A 3-channel image stored channel-major (`[3, height, width]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchImage {
    height: usize,
    width: usize,
    data: Arc<[f64]>,
}

impl PatchImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<PatchImage> {
        if data.len() != 3 * height * width {
            return Err(Error::Validation(format!(
                "image buffer of {} values does not fit 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(PatchImage { height, width, data: data.into() })
    }

    /// Converts a `[3, H, W]` tensor in `[-1, 1]` to `[0, 1]`, clamping.
    pub fn from_signed_tensor(t: &Tensor) -> Result<PatchImage> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Validation(format!("expected [3, H, W], got {:?}", t.shape())));
        }
        let data = t.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        PatchImage::new(t.dim(1), t.dim(2), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `[3, H, W]` tensor rescaled from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor(&self) -> Tensor {
        Tensor::new(self.data.iter().map(|v| v * 2.0 - 1.0).collect(), &[3, self.height, self.width])
    }

    pub fn load_png(path: &Path) -> Result<PatchImage> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        PatchImage::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height, self.width);
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.data[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Stacks images into a `[B, 3, H, W]` tensor in `[-1, 1]`.
pub fn stack_signed(images: &[&PatchImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Validation("images in a batch differ in size".into()));
        }
        data.extend(img.data.iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::new(data, &[images.len(), 3, h, w]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// Fixed patch geometry and class vocabulary of a dataset family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub stage_count: usize,
    pub class_names: Vec<String>,
}

impl DatasetProfile {
    pub fn cervical() -> DatasetProfile {
        DatasetProfile {
            name: "cervical".into(),
            height: 256,
            width: 128,
            stage_count: 3,
            class_names: ["Normal", "CIN1", "CIN2", "CIN3"].map(String::from).to_vec(),
        }
    }

    pub fn pcam() -> DatasetProfile {
        DatasetProfile {
            name: "pcam".into(),
            height: 96,
            width: 96,
            stage_count: 2,
            class_names: vec!["normal".into(), "metastatic".into()],
        }
    }

    /// Small two-class colour/texture profile for local runs.
    pub fn toy() -> DatasetProfile {
        DatasetProfile {
            name: "toy".into(),
            height: 32,
            width: 32,
            stage_count: 2,
            class_names: vec!["stripes_h".into(), "stripes_v".into()],
        }
    }

    pub fn builtin(name: &str) -> Result<DatasetProfile> {
        match name {
            "cervical" => Ok(DatasetProfile::cervical()),
            "pcam" => Ok(DatasetProfile::pcam()),
            "toy" => Ok(DatasetProfile::toy()),
            other => Err(Error::Validation(format!("unknown dataset profile {other:?}"))),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Per-stage `(height, width)`, coarsest first; each stage doubles the previous one.
    pub fn stage_resolutions(&self, stages: usize) -> Result<Vec<(usize, usize)>> {
        let div = 1usize << (stages.saturating_sub(1));
        if stages == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Validation(format!(
                "{}x{} cannot be halved {} times",
                self.height,
                self.width,
                stages.saturating_sub(1)
            )));
        }
        Ok((0..stages).map(|s| (self.height * (1 << s) / div, self.width * (1 << s) / div)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    /// Path relative to the dataset root; unique within a dataset.
    pub id: String,
    pub image: PatchImage,
    pub label: usize,
    pub patient_id: String,
    pub split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    filename: String,
    label: String,
    patient_id: String,
    split: String,
}

/// An ordered, validated collection of patches sharing one profile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    patches: Vec<LabeledPatch>,
    profile: DatasetProfile,
}

impl PatchDataset {
    /// Validates every invariant: dimensions, labels, patient ids, unique ids and patient-disjoint splits.
    pub fn new(profile: DatasetProfile, patches: Vec<LabeledPatch>) -> Result<PatchDataset> {
        let mut ids = BTreeSet::new();
        let mut patient_split: HashMap<&str, Option<Split>> = HashMap::new();
        for p in &patches {
            if p.image.height != profile.height || p.image.width != profile.width {
                return Err(Error::Validation(format!(
                    "{}: image is {}x{}, profile {} needs {}x{}",
                    p.id, p.image.height, p.image.width, profile.name, profile.height, profile.width
                )));
            }
            if p.label >= profile.class_count() {
                return Err(Error::Validation(format!("{}: label {} out of range", p.id, p.label)));
            }
            if p.patient_id.is_empty() {
                return Err(Error::Validation(format!("{}: empty patient_id", p.id)));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Validation(format!("duplicate patch id {}", p.id)));
            }
            if let Some(prev) = patient_split.insert(&p.patient_id, p.split) {
                if prev != p.split {
                    return Err(Error::Validation(format!(
                        "patient {} appears in more than one split",
                        p.patient_id
                    )));
                }
            }
        }
        Ok(PatchDataset { patches, profile })
    }

    pub fn profile(&self) -> &DatasetProfile {
        &self.profile
    }

    pub fn class_count(&self) -> usize {
        self.profile.class_count()
    }

    pub fn patches(&self) -> &[LabeledPatch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &LabeledPatch> {
        self.patches.iter().filter(move |p| p.split == Some(split))
    }

    /// The patches of one split as a dataset of their own.
    pub fn split_view(&self, split: Split) -> PatchDataset {
        PatchDataset { patches: self.in_split(split).cloned().collect(), profile: self.profile.clone() }
    }

    /// Patches that count as training data: the train split, or everything when nothing is assigned.
    fn training_pool(&self) -> Vec<&LabeledPatch> {
        if self.patches.iter().all(|p| p.split.is_none()) {
            self.patches.iter().collect()
        } else {
            self.in_split(Split::Train).collect()
        }
    }

    /// N_i per class over the training pool.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.class_count()];
        for p in self.training_pool() {
            sizes[p.label] += 1;
        }
        sizes
    }

    pub fn patient_ids(&self, split: Option<Split>) -> BTreeSet<&str> {
        self.patches.iter().filter(|p| p.split == split).map(|p| p.patient_id.as_str()).collect()
    }

    /// Reads `manifest.csv` and the images it lists under `root`.
    pub fn load(root: impl AsRef<Path>, profile: &DatasetProfile) -> Result<PatchDataset> {
        let root = root.as_ref();
        let manifest = root.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::Format(format!("{} not found", manifest.display())));
        }
        let mut reader = csv::Reader::from_path(&manifest)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["filename", "label", "patient_id", "split"] {
            return Err(Error::Format(format!(
                "{}: header must be filename,label,patient_id,split",
                manifest.display()
            )));
        }
        let mut patches = Vec::new();
        for row in reader.deserialize() {
            let row: ManifestRow = row?;
            let label = profile.class_index(&row.label).ok_or_else(|| {
                Error::Validation(format!("{}: unknown class {:?}", row.filename, row.label))
            })?;
            let split = if row.split.is_empty() { None } else { Some(row.split.parse()?) };
            let image = PatchImage::load_png(&root.join(&row.filename))?;
            patches.push(LabeledPatch { id: row.filename, image, label, patient_id: row.patient_id, split });
        }
        PatchDataset::new(profile.clone(), patches)
    }

    /// Writes images under `<root>/<class>/` and the manifest. Patch ids become the relative paths.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut writer = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
        for p in &self.patches {
            p.image.save_png(&root.join(&p.id))?;
            writer.serialize(ManifestRow {
                filename: p.id.clone(),
                label: self.profile.class_names[p.label].clone(),
                patient_id: p.patient_id.clone(),
                split: p.split.map(|s| s.to_string()).unwrap_or_default(),
            })?;
        }
        writer.flush().map_err(|e| Error::io(root, e))?;
        Ok(())
    }

    /// Assigns every patient (and so all of its patches) to train/val/test.
    ///
    /// Patient counts per split follow `ratios` by largest remainder with at
    /// least one patient per split. Among a fixed number of seeded shuffles the
    /// assignment whose per-split class proportions deviate least from the
    /// global proportions is kept.
    pub fn split_by_patient(&self, ratios: [f64; 3], seed: u64) -> Result<PatchDataset> {
        if ratios.iter().any(|&r| r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split ratios {ratios:?} must be positive and sum to 1")));
        }
        let patients: Vec<&str> = self
            .patches
            .iter()
            .map(|p| p.patient_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if patients.len() < 3 {
            return Err(Error::InfeasibleSplit(format!(
                "{} distinct patients cannot fill 3 splits",
                patients.len()
            )));
        }
        let mut quota = largest_remainder(&ratios, patients.len());
        // every split gets at least one patient, taken from the largest
        for s in 0..3 {
            if quota[s] == 0 {
                let donor = (0..3).max_by_key(|&i| (quota[i], std::cmp::Reverse(i))).unwrap();
                quota[donor] -= 1;
                quota[s] += 1;
            }
        }
        let mut per_patient: HashMap<&str, Vec<usize>> = HashMap::new();
        for p in &self.patches {
            per_patient.entry(&p.patient_id).or_insert_with(|| vec![0; self.class_count()])[p.label] += 1;
        }
        let total: Vec<f64> = {
            let mut t = vec![0.0; self.class_count()];
            for p in &self.patches {
                t[p.label] += 1.0;
            }
            let n = self.patches.len() as f64;
            t.iter().map(|c| c / n).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, Vec<&str>)> = None;
        for _ in 0..64 {
            let mut order = patients.clone();
            order.shuffle(&mut rng);
            let mut counts = [vec![0usize; self.class_count()], vec![0; self.class_count()], vec![0; self.class_count()]];
            let mut offset = 0;
            for (s, &q) in quota.iter().enumerate() {
                for pid in &order[offset..offset + q] {
                    for (c, n) in per_patient[pid].iter().enumerate() {
                        counts[s][c] += n;
                    }
                }
                offset += q;
            }
            let dev = counts
                .iter()
                .map(|cs| {
                    let n: usize = cs.iter().sum();
                    if n == 0 {
                        return 1.0;
                    }
                    cs.iter().zip(&total).map(|(&c, &g)| (c as f64 / n as f64 - g).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(b, _)| dev < *b) {
                best = Some((dev, order));
            }
        }
        let (_, order) = best.expect("at least one candidate split");
        let mut assign: HashMap<&str, Split> = HashMap::new();
        let mut offset = 0;
        for (s, &q) in quota.iter().enumerate() {
            for pid in &order[offset..offset + q] {
                assign.insert(pid, Split::ALL[s]);
            }
            offset += q;
        }
        let patches = self
            .patches
            .iter()
            .map(|p| LabeledPatch { split: Some(assign[p.patient_id.as_str()]), ..p.clone() })
            .collect();
        PatchDataset::new(self.profile.clone(), patches)
    }

    /// Keeps round(fraction·N) patches of the training pool, stratified by class
    /// with largest-remainder rounding; other splits are left untouched.
    pub fn subset_fraction(&self, fraction: f64, seed: u64) -> Result<PatchDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Validation(format!("fraction {fraction} outside (0, 1]")));
        }
        let pool = self.training_pool();
        let sizes = self.class_sizes();
        let n: usize = sizes.iter().sum();
        let target = round_half_up(fraction * n as f64);
        let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        let quotas = if n == 0 { vec![0; sizes.len()] } else { largest_remainder_total(&weights, fraction, target) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: BTreeSet<&str> = BTreeSet::new();
        for (class, &q) in quotas.iter().enumerate() {
            let mut members: Vec<&LabeledPatch> = pool.iter().copied().filter(|p| p.label == class).collect();
            members.shuffle(&mut rng);
            keep.extend(members.iter().take(q).map(|p| p.id.as_str()));
        }
        let pooled: BTreeSet<&str> = pool.iter().map(|p| p.id.as_str()).collect();
        let patches = self
            .patches
            .iter()
            .filter(|p| !pooled.contains(p.id.as_str()) || keep.contains(p.id.as_str()))
            .cloned()
            .collect();
        PatchDataset::new(self.profile.clone(), patches)
    }

    /// Patches grouped by class (training pool only), in dataset order.
    pub fn train_by_class(&self) -> BTreeMap<usize, Vec<&LabeledPatch>> {
        let mut out: BTreeMap<usize, Vec<&LabeledPatch>> = BTreeMap::new();
        for p in self.training_pool() {
            out.entry(p.label).or_default().push(p);
        }
        out
    }

    /// Training-pool patches in dataset order.
    pub fn train_patches(&self) -> Vec<&LabeledPatch> {
        self.training_pool()
    }
}

/// Round half away from zero for non-negative values.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Splits `total` items in proportion to `weights` (largest remainder, ties to the lower index).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    largest_remainder_total(weights, total as f64 / sum, total)
}

/// floor(scale·w_i) per entry, then the remaining units of `target` go to the largest remainders.
fn largest_remainder_total(weights: &[f64], scale: f64, target: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * scale).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - out[a] as f64;
        let rb = exact[b] - out[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(target.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Two-class colour/texture patches: class 0 reddish with horizontal stripes,
/// class 1 bluish with vertical stripes, with random phase, period and noise.
/// Patches are spread round-robin over `patients` synthetic patients per class.
pub fn synthetic_toy_dataset(per_class: usize, patients: usize, seed: u64) -> Result<PatchDataset> {
    let profile = DatasetProfile::toy();
    let (h, w) = (profile.height, profile.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        for i in 0..per_class {
            let period = rng.random_range(5.0..9.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let tint: f64 = rng.random_range(0.85..1.0);
            let base = if class == 0 { [0.80, 0.35, 0.45] } else { [0.35, 0.40, 0.85] };
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let coord = if class == 0 { y } else { x } as f64;
                    let stripe = 0.5 + 0.5 * (coord * std::f64::consts::TAU / period + phase).sin();
                    for c in 0..3 {
                        let noise: f64 = rng.random_range(-0.05..0.05);
                        let v = base[c] * tint * (0.55 + 0.45 * stripe) + noise;
                        data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            patches.push(LabeledPatch {
                id: format!("{}/img_{i:04}.png", profile.class_names[class]),
                image: PatchImage::new(h, w, data)?,
                label: class,
                patient_id: format!("p{class}_{:02}", i % patients.max(1)),
                split: None,
            });
        }
    }
    PatchDataset::new(profile, patches)
}
