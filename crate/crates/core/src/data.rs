//! Datasets: IDX ingestion, seeded synthetic ID sets, OOD generators and
//! per-channel normalization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{self, Named};
use crate::rng::SeededRng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodTest,
}

/// Applied (x − mean) / std, one entry per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images (H×W×C, channel-last) with optional labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<String>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn with_name(mut self, name: &str, role: Role) -> Self {
        self.name = name.to_string();
        self.role = role;
        self
    }

    /// Checks shared image shape, id uniqueness and label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let px = self.pixels();
        if let Some(i) = self.images.iter().position(|im| im.len() != px) {
            return Err(Error::Shape(format!("{}: image {i} has {} values, expected {px}", self.name, self.images[i].len())));
        }
        if self.ids.len() != self.images.len() {
            return Err(Error::Shape(format!("{}: {} ids for {} images", self.name, self.ids.len(), self.images.len())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("{}: duplicate id `{dup}`", self.name)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::Format(format!(
                    "{}: {} labels for {} images",
                    self.name,
                    labels.len(),
                    self.images.len()
                )));
            }
            if let Some(k) = num_classes {
                if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::Format(format!("{}: label {bad} outside [0, {k})", self.name)));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    fn subset(&self, idx: &[usize], name: &str, role: Role) -> Dataset {
        Dataset {
            name: name.to_string(),
            role,
            height: self.height,
            width: self.width,
            channels: self.channels,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            normalization: self.normalization.clone(),
        }
    }
}

// ---------------------------------------------------------------- IDX

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Loads big-endian IDX images (and optionally labels); bytes are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: wrong magic 0x{magic:08x} for IDX images (expected 0x{IDX_IMAGES_MAGIC:08x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(&bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&bytes, 12, images_path)? as usize;
    let px = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < n * px {
        return Err(Error::Format(format!(
            "{}: truncated payload, {} bytes for {n} images of {rows}x{cols}",
            images_path.display(),
            payload.len()
        )));
    }
    let images: Vec<Vec<f64>> = payload[..n * px]
        .chunks_exact(px.max(1))
        .take(n)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
            let magic = read_u32_be(&lb, 0, lp)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::Format(format!(
                    "{}: wrong magic 0x{magic:08x} for IDX labels (expected 0x{IDX_LABELS_MAGIC:08x})",
                    lp.display()
                )));
            }
            let m = read_u32_be(&lb, 4, lp)? as usize;
            if lb.len() - 8 < m {
                return Err(Error::Format(format!("{}: truncated payload", lp.display())));
            }
            if m != n {
                return Err(Error::Format(format!(
                    "count mismatch: {} has {n} images but {} has {m} labels",
                    images_path.display(),
                    lp.display()
                )));
            }
            Some(lb[8..8 + m].iter().map(|&b| b as usize).collect())
        }
    };
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(Dataset {
        ids: (0..n).map(|i| format!("{name}-{i}")).collect(),
        name,
        role: Role::IdTrain,
        height: rows,
        width: cols,
        channels: 1,
        images,
        labels,
        normalization: None,
    })
}

/// Writes single-channel [0, 1] images as IDX bytes (rounded to 0..=255).
pub fn write_idx_images(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.channels != 1 {
        return Err(Error::Invalid("IDX images are single-channel".into()));
    }
    let mut out = Vec::with_capacity(16 + ds.len() * ds.pixels());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in &ds.images {
        out.extend(im.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Invalid(format!("label {l} does not fit a byte")))?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------- synthesis

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternFamily {
    /// Oriented sinusoidal stripes; class sets angle and frequency.
    Stripes,
    /// A Gaussian blob whose centre sits on a circle, one angle per class.
    Blobs,
}

impl std::str::FromStr for PatternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "blobs" => Ok(Self::Blobs),
            _ => Err(Error::Invalid(format!("unknown pattern family `{s}` (known: stripes, blobs)"))),
        }
    }
}

/// Stripe frequencies (cycles per image width) used by ID classes.
pub const ID_STRIPE_CYCLES: (f64, f64) = (3.0, 4.0);
/// Stripe frequencies drawn for the pattern-shift OOD set; disjoint from ID.
pub const SHIFT_STRIPE_CYCLES: (f64, f64) = (6.0, 9.0);

/// (angle, cycles) of class `c`'s stripe pattern among `k` classes.
pub fn stripe_params(c: usize, k: usize) -> (f64, f64) {
    let angle = std::f64::consts::PI * c as f64 / k as f64;
    let cycles = if c % 2 == 0 { ID_STRIPE_CYCLES.0 } else { ID_STRIPE_CYCLES.1 };
    (angle, cycles)
}

fn stripes(h: usize, w: usize, angle: f64, cycles: f64) -> Vec<f64> {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let t = u * c + v * s;
            out.push(0.5 + 0.5 * libm::sin(2.0 * std::f64::consts::PI * cycles * t));
        }
    }
    out
}

fn blob(h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let theta = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
    let (cx, cy) = (0.5 + 0.3 * libm::cos(theta), 0.5 + 0.3 * libm::sin(theta));
    let s2 = 2.0 * 0.12f64.powi(2);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - cx;
            let v = (y as f64 + 0.5) / h as f64 - cy;
            out.push(libm::exp(-(u * u + v * v) / s2));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub pattern: PatternFamily,
    pub noise: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, noise: f64, seed: u64) -> Self {
        Self { classes, per_class, pattern: PatternFamily::Stripes, noise, seed, height: 28, width: 28 }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("per_class, height and width must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Invalid(format!("noise must be nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Noise-free template of class `c`.
pub fn class_pattern(spec: &SynthSpec, c: usize) -> Vec<f64> {
    match spec.pattern {
        PatternFamily::Stripes => {
            let (a, f) = stripe_params(c, spec.classes);
            stripes(spec.height, spec.width, a, f)
        }
        PatternFamily::Blobs => blob(spec.height, spec.width, c, spec.classes),
    }
}

fn add_noise(base: &[f64], sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    base.iter()
        .map(|&v| if sigma > 0.0 { (v + sigma * rng.normal()).clamp(0.0, 1.0) } else { v })
        .collect()
}

/// `per_class` noisy copies of each class template, class-major order.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.classes {
        let base = class_pattern(spec, c);
        for _ in 0..spec.per_class {
            images.push(add_noise(&base, spec.noise, &mut rng));
            labels.push(c);
        }
    }
    Ok(Dataset {
        name: "synth".into(),
        role: Role::IdTrain,
        height: spec.height,
        width: spec.width,
        channels: 1,
        ids: (0..images.len()).map(|i| format!("synth-{i}")).collect(),
        images,
        labels: Some(labels),
        normalization: None,
    })
}

/// Stratified, seeded partition into (ID-train, ID-test) with
/// `test_per_class` test images per class. Ids are kept, so the halves are
/// disjoint by id.
pub fn split_train_test(ds: &Dataset, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::Invalid("split needs labels".into()))?;
    let k = ds.num_classes().unwrap_or(0);
    let mut rng = SeededRng::with_stream(seed, 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() <= test_per_class {
            return Err(Error::Invalid(format!(
                "class {c} has {} images, cannot hold out {test_per_class}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        test.extend_from_slice(&idx[..test_per_class]);
        train.extend_from_slice(&idx[test_per_class..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train, "id-train", Role::IdTrain), ds.subset(&test, "id-test", Role::IdTest)))
}

// -------------------------------------------------------- OOD sources

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    pub n: usize,
    pub seed: u64,
    /// Pixel noise for generators that draw patterns.
    pub noise: f64,
}

/// A way of producing an OOD test set, given the ID reference set whose
/// shape (and, for some kinds, images) it follows.
pub trait OodGenerator: Named + Sync {
    fn generate(&self, spec: &OodSpec, reference: &Dataset) -> Result<Dataset>;
}

fn ood_dataset(kind: &str, reference: &Dataset, images: Vec<Vec<f64>>) -> Dataset {
    Dataset {
        name: kind.to_string(),
        role: Role::OodTest,
        height: reference.height,
        width: reference.width,
        channels: reference.channels,
        ids: (0..images.len()).map(|i| format!("{kind}-{i}")).collect(),
        images,
        labels: None,
        normalization: None,
    }
}

fn raw_reference(reference: &Dataset) -> Result<()> {
    if reference.normalization.is_some() {
        return Err(Error::Invalid("OOD generation expects an unnormalized reference set".into()));
    }
    Ok(())
}

/// I.i.d. uniform pixels.
pub struct UniformNoise;

impl Named for UniformNoise {
    fn name(&self) -> &'static str {
        "uniform-noise"
    }
}

impl OodGenerator for UniformNoise {
    fn generate(&self, spec: &OodSpec, reference: &Dataset) -> Result<Dataset> {
        raw_reference(reference)?;
        let mut rng = SeededRng::new(spec.seed);
        let px = reference.pixels();
        let images = (0..spec.n).map(|_| (0..px).map(|_| rng.uniform()).collect()).collect();
        Ok(ood_dataset(self.name(), reference, images))
    }
}

/// Stripes whose frequency lies in [`SHIFT_STRIPE_CYCLES`], at any angle.
pub struct PatternShift;

impl Named for PatternShift {
    fn name(&self) -> &'static str {
        "pattern-shift"
    }
}

impl OodGenerator for PatternShift {
    fn generate(&self, spec: &OodSpec, reference: &Dataset) -> Result<Dataset> {
        raw_reference(reference)?;
        if reference.channels != 1 {
            return Err(Error::Invalid("pattern-shift generates single-channel images".into()));
        }
        let mut rng = SeededRng::new(spec.seed);
        let (lo, hi) = SHIFT_STRIPE_CYCLES;
        let images = (0..spec.n)
            .map(|_| {
                let angle = rng.uniform_range(0.0, std::f64::consts::PI);
                let cycles = rng.uniform_range(lo, hi);
                let base = stripes(reference.height, reference.width, angle, cycles);
                add_noise(&base, spec.noise, &mut rng)
            })
            .collect();
        Ok(ood_dataset(self.name(), reference, images))
    }
}

/// x → 1 − x over the first `n` reference images.
pub struct Inverted;

impl Named for Inverted {
    fn name(&self) -> &'static str {
        "inverted"
    }
}

impl OodGenerator for Inverted {
    fn generate(&self, spec: &OodSpec, reference: &Dataset) -> Result<Dataset> {
        raw_reference(reference)?;
        if spec.n > reference.len() {
            return Err(Error::Invalid(format!(
                "inverted: asked for {} images but the reference set has {}",
                spec.n,
                reference.len()
            )));
        }
        let images = reference.images[..spec.n].iter().map(|im| invert(im)).collect();
        Ok(ood_dataset(self.name(), reference, images))
    }
}

pub fn invert(image: &[f64]) -> Vec<f64> {
    image.iter().map(|&x| 1.0 - x).collect()
}

static OOD_GENERATORS: [&dyn OodGenerator; 3] = [&UniformNoise, &PatternShift, &Inverted];

pub fn ood_generators() -> &'static [&'static dyn OodGenerator] {
    &OOD_GENERATORS
}

pub fn ood_generator(name: &str) -> Result<&'static dyn OodGenerator> {
    registry::lookup(&OOD_GENERATORS, "OOD generator", name)
}

/// Builds an OOD set of the named kind.
pub fn make_ood(kind: &str, spec: &OodSpec, reference: &Dataset) -> Result<Dataset> {
    ood_generator(kind)?.generate(spec, reference)
}

// ------------------------------------------------------ normalization

fn per_channel(values: &[f64], channels: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; channels]),
        n if n == channels => Ok(values.to_vec()),
        n => Err(Error::Invalid(format!("{what} has {n} entries for {channels} channels"))),
    }
}

/// (x − mean) / std per channel; the transform is recorded on the dataset.
pub fn normalize(ds: &Dataset, mean: &[f64], std: &[f64]) -> Result<Dataset> {
    if ds.normalization.is_some() {
        return Err(Error::Invalid(format!("{} is already normalized", ds.name)));
    }
    let mean = per_channel(mean, ds.channels, "mean")?;
    let std = per_channel(std, ds.channels, "std")?;
    if let Some(s) = std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Invalid(format!("std must be positive, got {s}")));
    }
    let c = ds.channels;
    let mut out = ds.clone();
    for im in &mut out.images {
        for (i, v) in im.iter_mut().enumerate() {
            *v = (*v - mean[i % c]) / std[i % c];
        }
    }
    out.normalization = Some(Normalization { mean, std });
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let norm = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("{} is not normalized", ds.name)))?;
    let c = ds.channels;
    let mut out = ds.clone();
    for im in &mut out.images {
        for (i, v) in im.iter_mut().enumerate() {
            *v = *v * norm.std[i % c] + norm.mean[i % c];
        }
    }
    out.normalization = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(noise: f64) -> SynthSpec {
        SynthSpec::new(4, 5, noise, 17)
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_dataset(&tiny_spec(0.2)).unwrap();
        let b = synth_dataset(&tiny_spec(0.2)).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&SynthSpec { seed: 18, ..tiny_spec(0.2) }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn zero_noise_gives_identical_class_images() {
        let ds = synth_dataset(&tiny_spec(0.0)).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if labels[i] == labels[j] {
                    assert_eq!(ds.images[i], ds.images[j]);
                }
            }
        }
    }

    #[test]
    fn class_templates_pairwise_distinct() {
        for pattern in [PatternFamily::Stripes, PatternFamily::Blobs] {
            let spec = SynthSpec { pattern, classes: 6, ..tiny_spec(0.0) };
            let t: Vec<_> = (0..6).map(|c| class_pattern(&spec, c)).collect();
            let mut min = f64::INFINITY;
            for i in 0..6 {
                for j in i + 1..6 {
                    let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    min = min.min(d);
                }
            }
            assert!(min > 0.0, "{pattern:?}: {min}");
        }
    }

    #[test]
    fn synth_rejects_bad_spec() {
        assert!(synth_dataset(&SynthSpec { classes: 1, ..tiny_spec(0.0) }).is_err());
        assert!(synth_dataset(&SynthSpec { per_class: 0, ..tiny_spec(0.0) }).is_err());
        assert!(synth_dataset(&SynthSpec { noise: -1.0, ..tiny_spec(0.0) }).is_err());
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let ds = synth_dataset(&tiny_spec(0.1)).unwrap();
        let (tr, te) = split_train_test(&ds, 2, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (12, 8));
        assert!(tr.ids.iter().all(|id| !te.ids.contains(id)));
        let (tr2, te2) = split_train_test(&ds, 2, 3).unwrap();
        assert_eq!((tr.ids.clone(), te.ids.clone()), (tr2.ids, te2.ids));
        assert_eq!(te.role, Role::IdTest);
        assert!(split_train_test(&ds, 5, 3).is_err());
    }

    #[test]
    fn uniform_noise_mean() {
        let reference = synth_dataset(&tiny_spec(0.0)).unwrap();
        let ood = make_ood("uniform-noise", &OodSpec { n: 1000, seed: 4, noise: 0.0 }, &reference).unwrap();
        let total: f64 = ood.images.iter().flatten().sum();
        let mean = total / (1000 * 784) as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert_eq!(ood.role, Role::OodTest);
        assert!(ood.labels.is_none());
    }

    #[test]
    fn inverted_is_an_involution() {
        let reference = synth_dataset(&tiny_spec(0.3)).unwrap();
        let ood = make_ood("inverted", &OodSpec { n: 20, seed: 0, noise: 0.0 }, &reference).unwrap();
        for (a, b) in ood.images.iter().zip(&reference.images) {
            for (x, y) in invert(a).iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(make_ood("inverted", &OodSpec { n: 21, seed: 0, noise: 0.0 }, &reference).is_err());
    }

    #[test]
    fn pattern_shift_frequencies_disjoint() {
        assert!(SHIFT_STRIPE_CYCLES.0 > ID_STRIPE_CYCLES.1);
        for k in 2..12 {
            for c in 0..k {
                let (_, f) = stripe_params(c, k);
                assert!(f >= ID_STRIPE_CYCLES.0 && f <= ID_STRIPE_CYCLES.1);
            }
        }
        let reference = synth_dataset(&tiny_spec(0.0)).unwrap();
        let ood = make_ood("pattern-shift", &OodSpec { n: 3, seed: 1, noise: 0.1 }, &reference).unwrap();
        assert_eq!(ood.len(), 3);
        assert!(ood.images.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unknown_ood_kind() {
        let reference = synth_dataset(&tiny_spec(0.0)).unwrap();
        let err = make_ood("gaussian", &OodSpec { n: 1, seed: 0, noise: 0.0 }, &reference).unwrap_err();
        assert!(err.to_string().contains("uniform-noise"));
    }

    #[test]
    fn normalize_examples() {
        let ds = synth_dataset(&tiny_spec(0.3)).unwrap();
        assert_eq!(normalize(&ds, &[0.0], &[1.0]).unwrap().images, ds.images);
        let n = normalize(&ds, &[0.5], &[0.25]).unwrap();
        let back = denormalize(&n).unwrap();
        for (a, b) in back.images.iter().flatten().zip(ds.images.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize(&ds, &[0.0], &[0.0]).is_err());
        assert!(normalize(&n, &[0.0], &[1.0]).is_err());

        let mut constant = ds.clone();
        constant.images = vec![vec![0.7; 784]];
        constant.ids = vec!["c".into()];
        constant.labels = None;
        let n = normalize(&constant, &[0.5], &[0.25]).unwrap();
        assert!(n.images[0].iter().all(|&v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let mut ds = synth_dataset(&SynthSpec::new(2, 1, 0.0, 0)).unwrap();
        ds.images[0][0] = 1.0;
        write_idx_images(&ip, &ds).unwrap();
        write_idx_labels(&lp, &[0, 1]).unwrap();
        let back = load_idx(&ip, Some(&lp)).unwrap();
        assert_eq!((back.len(), back.height, back.width, back.channels), (2, 28, 28, 1));
        assert_eq!(back.images[0][0], 1.0);
        assert_eq!(back.labels, Some(vec![0, 1]));

        write_idx_labels(&lp, &[0]).unwrap();
        let err = load_idx(&ip, Some(&lp)).unwrap_err().to_string();
        assert!(err.contains("count mismatch"), "{err}");

        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, None).unwrap_err().to_string();
        assert!(err.contains("0x00000899"), "{err}");
    }
}
