//! Synthetic "styled domains" data: class content rendered under a
//! per-domain channel style, SSDA splits, and the on-disk container.
//!
//! Class `k` content is a Gaussian bump centered at angle `2πk/K` on a circle
//! around the image center, plus a grating with class-indexed orientation,
//! identical in every channel. Per-sample nuisance comes from position and
//! grating-phase jitter. A domain then applies `gain_c · x + bias_c` per
//! channel and adds Gaussian pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.json";
pub const SPLIT_NAMES: [&str; 4] = ["source", "target_labeled", "target_unlabeled", "target_val"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("unknown domain id {0:?}")]
    UnknownDomain(String),
    #[error("class {class} has {available} target samples, {required} required")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("unsupported dataset format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    Truncated { path: PathBuf, len: u64, record: usize },
    #[error("split {split}: manifest declares {declared} samples, {file} holds {actual}")]
    LengthMismatch {
        split: String,
        file: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("split {split}: label {label} outside 0..{num_classes}")]
    BadLabel {
        split: String,
        label: i32,
        num_classes: usize,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub id: String,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_std: f64,
}

/// Shape of the class content and its per-sample nuisance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentSpec {
    /// Spatial std of the class bump, in pixels.
    pub bump_sigma: f64,
    /// Distance of class bump centers from the image center, in pixels.
    pub bump_radius: f64,
    /// Std of the per-sample bump displacement, in pixels.
    pub position_jitter: f64,
    /// Peak value of the bump.
    pub bump_amplitude: f64,
    pub grating_amplitude: f64,
    /// Angular frequency of the grating, in radians per pixel.
    pub grating_frequency: f64,
    /// Grating phase is drawn uniformly from `[-phase_jitter, phase_jitter]`.
    pub phase_jitter: f64,
}

impl Default for ContentSpec {
    fn default() -> Self {
        Self {
            bump_sigma: 2.5,
            bump_radius: 4.0,
            position_jitter: 2.0,
            bump_amplitude: 1.0,
            grating_amplitude: 0.3,
            grating_frequency: 1.2,
            phase_jitter: PI,
        }
    }
}

impl ContentSpec {
    /// Content with every per-sample nuisance switched off.
    pub fn without_jitter(mut self) -> Self {
        self.position_jitter = 0.0;
        self.phase_jitter = 0.0;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub content: ContentSpec,
    pub domains: Vec<DomainStyle>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            channels: 3,
            height: 16,
            width: 16,
            samples_per_class: 100,
            seed: 0,
            content: ContentSpec::default(),
            domains: vec![
                DomainStyle {
                    id: "source".into(),
                    gain: vec![1.0; 3],
                    bias: vec![0.0; 3],
                    noise_std: 0.05,
                },
                DomainStyle {
                    id: "target".into(),
                    gain: vec![1.0; 3],
                    bias: vec![0.0; 3],
                    noise_std: 0.7,
                },
            ],
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        for d in &self.domains {
            if d.gain.len() != self.channels || d.bias.len() != self.channels {
                return bad(format!(
                    "domain {:?}: gain/bias need {} entries",
                    d.id, self.channels
                ));
            }
            if d.gain.iter().any(|&g| !(g > 0.0)) {
                return bad(format!("domain {:?}: gains must be strictly positive", d.id));
            }
            if !(d.noise_std >= 0.0) {
                return bad(format!("domain {:?}: noise_std must be non-negative", d.id));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn domain(&self, id: &str) -> Result<&DomainStyle, DatasetError> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| DatasetError::UnknownDomain(id.to_string()))
    }
}

/// Labeled images stored as 32-bit floats, `C×H×W` row-major per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<u32>,
}

impl SampleSet {
    pub fn new(shape: [usize; 3], images: Vec<f32>, labels: Vec<u32>) -> Self {
        assert_eq!(images.len(), labels.len() * shape.iter().product::<usize>());
        Self {
            shape,
            images,
            labels,
        }
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self::new(shape, Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// `[B, C, H, W]` batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        batch_of(self.shape, &self.images, indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self::new(self.shape, images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Drops the labels; the returned pair keeps them apart.
    pub fn split_labels(self) -> (UnlabeledSet, HeldOutLabels) {
        (
            UnlabeledSet {
                shape: self.shape,
                images: self.images,
            },
            HeldOutLabels(self.labels),
        )
    }
}

fn batch_of(shape: [usize; 3], images: &[f32], indices: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend(images[i * n..(i + 1) * n].iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![indices.len(), shape[0], shape[1], shape[2]], data)
        .expect("batch of a non-empty selection")
}

/// Target images whose labels are withheld from training.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    shape: [usize; 3],
    images: Vec<f32>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.images.len() / self.shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        batch_of(self.shape, &self.images, indices)
    }
}

/// Ground truth of the unlabeled split, for evaluation and diagnostics only.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutLabels(Vec<u32>);

impl HeldOutLabels {
    pub fn new(labels: Vec<u32>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }
}

/// Borrowed splits handed to training code.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub source: &'a SampleSet,
    pub labeled_target: &'a SampleSet,
    pub unlabeled: &'a UnlabeledSet,
    pub val: &'a SampleSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub num_classes: usize,
    pub source_domain: String,
    pub target_domain: String,
    pub seed: u64,
    pub shots: usize,
    pub source: SampleSet,
    pub target_labeled: SampleSet,
    pub target_unlabeled: UnlabeledSet,
    pub unlabeled_truth: HeldOutLabels,
    pub target_val: SampleSet,
}

impl DatasetSplits {
    pub fn image_shape(&self) -> [usize; 3] {
        self.source.shape()
    }

    /// The splits a trainer may read; the unlabeled ground truth is left out.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            source: &self.source,
            labeled_target: &self.target_labeled,
            unlabeled: &self.target_unlabeled,
            val: &self.target_val,
        }
    }

    /// Unlabeled split with its ground truth re-attached, for evaluation.
    pub fn unlabeled_with_truth(&self) -> SampleSet {
        SampleSet::new(
            self.target_unlabeled.shape,
            self.target_unlabeled.images.clone(),
            self.unlabeled_truth.0.clone(),
        )
    }
}

fn render_content(spec: &DomainSpec, class: usize, rng: &mut Rng, out: &mut [f64]) {
    let c = &spec.content;
    let k = spec.num_classes as f64;
    let angle = 2.0 * PI * class as f64 / k;
    let cy = (spec.height as f64 - 1.0) / 2.0 + c.bump_radius * libm::sin(angle);
    let cx = (spec.width as f64 - 1.0) / 2.0 + c.bump_radius * libm::cos(angle);
    let dy = c.position_jitter * rng::standard_normal(rng);
    let dx = c.position_jitter * rng::standard_normal(rng);
    let phase = c.phase_jitter * (2.0 * rng::uniform(rng) - 1.0);
    let orientation = PI * class as f64 / k;
    let (ct, st) = (libm::cos(orientation), libm::sin(orientation));
    let plane = spec.height * spec.width;
    let (first, rest) = out.split_at_mut(plane);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (yf, xf) = (y as f64, x as f64);
            let r2 = (yf - cy - dy).powi(2) + (xf - cx - dx).powi(2);
            let bump = c.bump_amplitude * libm::exp(-r2 / (2.0 * c.bump_sigma * c.bump_sigma));
            let grating = c.grating_amplitude * libm::sin(c.grating_frequency * (xf * ct + yf * st) + phase);
            first[y * spec.width + x] = bump + grating;
        }
    }
    for ch in rest.chunks_exact_mut(plane) {
        ch.copy_from_slice(first);
    }
}

/// Renders `samples_per_class` images of every class in the named domain,
/// grouped by class.
pub fn generate_domain(spec: &DomainSpec, domain_id: &str, rng: &mut Rng) -> Result<SampleSet, DatasetError> {
    spec.validate()?;
    let style = spec.domain(domain_id)?;
    let sample_len = spec.channels * spec.height * spec.width;
    let plane = spec.height * spec.width;
    let total = spec.num_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(total * sample_len);
    let mut labels = Vec::with_capacity(total);
    let mut content = vec![0.0; sample_len];
    for class in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            render_content(spec, class, rng, &mut content);
            for (i, &v) in content.iter().enumerate() {
                let ch = i / plane;
                let noise = if style.noise_std > 0.0 {
                    style.noise_std * rng::standard_normal(rng)
                } else {
                    0.0
                };
                images.push((style.gain[ch] * v + style.bias[ch] + noise) as f32);
            }
            labels.push(class as u32);
        }
    }
    Ok(SampleSet::new(spec.image_shape(), images, labels))
}

/// Index partition of a target set into labeled, validation and unlabeled parts.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub val: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

pub fn split_indices(
    labels: &[u32],
    num_classes: usize,
    shots: usize,
    val_per_class: usize,
    rng: &mut Rng,
) -> Result<SplitIndices, DatasetError> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let required = shots + val_per_class;
    let mut out = SplitIndices {
        labeled: Vec::new(),
        val: Vec::new(),
        unlabeled: Vec::new(),
    };
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < required {
            return Err(DatasetError::InsufficientSamples {
                class,
                available: members.len(),
                required,
            });
        }
        rng::shuffle(rng, members);
        out.labeled.extend_from_slice(&members[..shots]);
        out.val.extend_from_slice(&members[shots..required]);
        out.unlabeled.extend_from_slice(&members[required..]);
    }
    out.labeled.sort_unstable();
    out.val.sort_unstable();
    out.unlabeled.sort_unstable();
    Ok(out)
}

pub fn make_splits(
    source: SampleSet,
    target: &SampleSet,
    num_classes: usize,
    shots: usize,
    val_per_class: usize,
    rng: &mut Rng,
) -> Result<(DatasetSplits, SplitIndices), DatasetError> {
    let idx = split_indices(target.labels(), num_classes, shots, val_per_class, rng)?;
    let (target_unlabeled, unlabeled_truth) = target.subset(&idx.unlabeled).split_labels();
    let splits = DatasetSplits {
        num_classes,
        source_domain: String::new(),
        target_domain: String::new(),
        seed: 0,
        shots,
        source,
        target_labeled: target.subset(&idx.labeled),
        target_unlabeled,
        unlabeled_truth,
        target_val: target.subset(&idx.val),
    };
    Ok((splits, idx))
}

/// Generates both domains of `spec` and splits the target, all from `spec.seed`.
pub fn build_dataset(
    spec: &DomainSpec,
    source_id: &str,
    target_id: &str,
    shots: usize,
    val_per_class: usize,
) -> Result<DatasetSplits, DatasetError> {
    let source = generate_domain(spec, source_id, &mut rng::stream(spec.seed, &format!("domain/{source_id}")))?;
    let target = generate_domain(spec, target_id, &mut rng::stream(spec.seed, &format!("domain/{target_id}")))?;
    let (mut splits, _) = make_splits(
        source,
        &target,
        spec.num_classes,
        shots,
        val_per_class,
        &mut rng::stream(spec.seed, "splits"),
    )?;
    splits.source_domain = source_id.to_string();
    splits.target_domain = target_id.to_string();
    splits.seed = spec.seed;
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub samples: usize,
    /// Ground truth is stored for evaluation but must not drive training.
    pub evaluation_only_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub shape: [usize; 3],
    pub source_domain: String,
    pub target_domain: String,
    pub seed: u64,
    pub shots: usize,
    pub splits: Vec<SplitEntry>,
}

fn split_files(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.f32")), dir.join(format!("{name}.labels.i32")))
}

fn write_split(dir: &Path, name: &str, images: &[f32], labels: &[u32]) -> Result<(), DatasetError> {
    let (img_path, lab_path) = split_files(dir, name);
    let img: Vec<u8> = images.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&img_path, img).map_err(io_err(&img_path))?;
    let lab: Vec<u8> = labels.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
    fs::write(&lab_path, lab).map_err(io_err(&lab_path))?;
    Ok(())
}

/// Writes `dataset.json` plus one image and one label file per split.
pub fn write_dataset(dir: &Path, d: &DatasetSplits) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let parts: [(&str, &[f32], &[u32]); 4] = [
        ("source", d.source.images(), d.source.labels()),
        ("target_labeled", d.target_labeled.images(), d.target_labeled.labels()),
        ("target_unlabeled", &d.target_unlabeled.images, d.unlabeled_truth.labels()),
        ("target_val", d.target_val.images(), d.target_val.labels()),
    ];
    for (name, images, labels) in parts {
        write_split(dir, name, images, labels)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_classes: d.num_classes,
        shape: d.image_shape(),
        source_domain: d.source_domain.clone(),
        target_domain: d.target_domain.clone(),
        seed: d.seed,
        shots: d.shots,
        splits: parts
            .iter()
            .map(|(name, _, labels)| SplitEntry {
                name: name.to_string(),
                samples: labels.len(),
                evaluation_only_labels: *name == "target_unlabeled",
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

fn read_records(path: &Path, record: usize) -> Result<Vec<[u8; 4]>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % record != 0 {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

fn read_split(dir: &Path, manifest: &Manifest, name: &str) -> Result<SampleSet, DatasetError> {
    let entry = manifest
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| DatasetError::InvalidSpec(format!("manifest lacks split {name:?}")))?;
    let sample_len: usize = manifest.shape.iter().product();
    let (img_path, lab_path) = split_files(dir, name);
    let images: Vec<f32> = read_records(&img_path, sample_len * 4)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect();
    let raw_labels: Vec<i32> = read_records(&lab_path, 4)?
        .into_iter()
        .map(i32::from_le_bytes)
        .collect();
    let image_count = images.len() / sample_len;
    for (file, actual) in [("image records", image_count), ("label records", raw_labels.len())] {
        if actual != entry.samples {
            return Err(DatasetError::LengthMismatch {
                split: name.to_string(),
                file,
                declared: entry.samples,
                actual,
            });
        }
    }
    let mut labels = Vec::with_capacity(raw_labels.len());
    for label in raw_labels {
        if label < 0 || label as usize >= manifest.num_classes {
            return Err(DatasetError::BadLabel {
                split: name.to_string(),
                label,
                num_classes: manifest.num_classes,
            });
        }
        labels.push(label as u32);
    }
    Ok(SampleSet::new(manifest.shape, images, labels))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    // check the version before the rest of the schema so old files fail clearly
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(DatasetError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplits, DatasetError> {
    let manifest = read_manifest(dir)?;
    let source = read_split(dir, &manifest, "source")?;
    let target_labeled = read_split(dir, &manifest, "target_labeled")?;
    let (target_unlabeled, unlabeled_truth) =
        read_split(dir, &manifest, "target_unlabeled")?.split_labels();
    let target_val = read_split(dir, &manifest, "target_val")?;
    Ok(DatasetSplits {
        num_classes: manifest.num_classes,
        source_domain: manifest.source_domain,
        target_domain: manifest.target_domain,
        seed: manifest.seed,
        shots: manifest.shots,
        source,
        target_labeled,
        target_unlabeled,
        unlabeled_truth,
        target_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        DomainSpec {
            samples_per_class: 6,
            ..DomainSpec::default()
        }
    }

    fn clean(spec: &mut DomainSpec) {
        spec.content = spec.content.clone().without_jitter();
        for d in &mut spec.domains {
            d.noise_std = 0.0;
        }
    }

    #[test]
    fn noiseless_same_class_samples_are_identical() {
        let mut spec = small_spec();
        clean(&mut spec);
        spec.domains[0].gain = vec![1.0; 3];
        let set = generate_domain(&spec, "source", &mut rng::stream(1, "d")).unwrap();
        assert_eq!(set.image(0), set.image(1));
        assert_ne!(set.image(0), set.image(6));
    }

    #[test]
    fn gain_scales_channel_means() {
        let mut spec = small_spec();
        clean(&mut spec);
        spec.domains[1].gain = vec![2.0; 3];
        spec.domains[1].bias = vec![0.0; 3];
        let a = generate_domain(&spec, "source", &mut rng::stream(1, "d")).unwrap();
        let b = generate_domain(&spec, "target", &mut rng::stream(1, "d")).unwrap();
        let plane = 16 * 16;
        for ch in 0..3 {
            let mean = |s: &SampleSet| {
                s.image(0)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>()
                    / plane as f64
            };
            assert!((mean(&b) - 2.0 * mean(&a)).abs() < 1e-5);
        }
    }

    #[test]
    fn default_spec_is_balanced() {
        let spec = DomainSpec::default();
        let set = generate_domain(&spec, "source", &mut rng::stream(0, "d")).unwrap();
        assert_eq!(set.len(), 500);
        for k in 0..5u32 {
            assert_eq!(set.labels().iter().filter(|&&y| y == k).count(), 100);
        }
    }

    #[test]
    fn unknown_domain_and_invalid_specs_are_rejected() {
        let spec = small_spec();
        assert!(matches!(
            generate_domain(&spec, "sketch", &mut rng::stream(0, "d")),
            Err(DatasetError::UnknownDomain(_))
        ));
        let mut one_class = small_spec();
        one_class.num_classes = 1;
        assert!(one_class.validate().is_err());
        let mut bad_gain = small_spec();
        bad_gain.domains[0].gain[1] = 0.0;
        assert!(bad_gain.validate().is_err());
    }

    #[test]
    fn distinct_styles_separate_channel_statistics() {
        let mut spec = small_spec();
        clean(&mut spec);
        spec.domains[1].gain = vec![1.8, 1.0, 0.5];
        spec.domains[1].bias = vec![0.3; 3];
        let a = generate_domain(&spec, "source", &mut rng::stream(1, "d")).unwrap();
        let b = generate_domain(&spec, "target", &mut rng::stream(1, "d")).unwrap();
        let moments = |s: &SampleSet, i: usize| {
            let t = s.batch(&[i]);
            crate::tensor::channel_moments(&t)
        };
        for class in 0..spec.num_classes {
            let i = class * spec.samples_per_class;
            let (ma, sa) = moments(&a, i);
            let (mb, sb) = moments(&b, i);
            for ch in 0..3 {
                assert!((ma[ch] - mb[ch]).abs() > 1e-3, "class {class} channel {ch} mean");
                // channel 1 keeps gain 1, so only its mean moves
                if ch != 1 {
                    assert!((sa[ch] - sb[ch]).abs() > 1e-3, "class {class} channel {ch} std");
                }
            }
        }
    }

    #[test]
    fn split_sizes_follow_shots() {
        let spec = DomainSpec::default();
        let d = build_dataset(&spec, "source", "target", 3, 10).unwrap();
        assert_eq!(d.target_labeled.len(), 15);
        assert_eq!(d.target_val.len(), 50);
        assert_eq!(d.target_unlabeled.len(), 435);
        let one = build_dataset(&spec, "source", "target", 1, 10).unwrap();
        assert_eq!(one.target_labeled.len(), 5);
        let zero = build_dataset(&spec, "source", "target", 0, 10).unwrap();
        assert!(zero.target_labeled.is_empty());
    }

    #[test]
    fn split_indices_partition_the_target() {
        let labels: Vec<u32> = (0..60).map(|i| (i % 5) as u32).collect();
        let idx = split_indices(&labels, 5, 2, 3, &mut rng::stream(4, "s")).unwrap();
        let mut all: Vec<usize> = idx
            .labeled
            .iter()
            .chain(&idx.val)
            .chain(&idx.unlabeled)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        let err = split_indices(&labels, 5, 10, 5, &mut rng::stream(4, "s")).unwrap_err();
        assert!(matches!(err, DatasetError::InsufficientSamples { class: 0, available: 12, required: 15 }));
    }
}
