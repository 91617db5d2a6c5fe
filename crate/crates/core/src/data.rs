//! Labeled image datasets: CIFAR binary archives and a synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Contract("class_count must be positive".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {l} outside [0, {class_count})")));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.size() != first.size()) {
                return Err(Error::Contract(format!(
                    "mixed image sizes {} and {}",
                    first.size(),
                    bad.size()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length of every image, `None` when empty.
    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(Image::size)
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.size() * img.size();
            for c in 0..Image::CHANNELS {
                for &v in &img.pixels()[c * plane..(c + 1) * plane] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return ([0.0; 3], [1.0; 3]);
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [1.0; 3];
        for c in 0..3 {
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            // flat channels keep unit scale
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        (mean, std)
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    #[default]
    Cifar10,
    /// Two label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> (&'static [&'static str], usize) {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (
                &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
                50_000,
            ),
            (CifarVariant::Cifar10, Split::Test) => (&["test_batch.bin"], 10_000),
            (CifarVariant::Cifar100, Split::Train) => (&["train.bin"], 50_000),
            (CifarVariant::Cifar100, Split::Test) => (&["test.bin"], 10_000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

pub const CIFAR_SIZE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIZE * CIFAR_SIZE;

/// Parses raw CIFAR records. `origin` names the source in errors.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, origin: &Path) -> Result<LabeledDataset> {
    let lb = variant.label_bytes();
    let rec = lb + CIFAR_PIXELS;
    let parse_err = |offset: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.is_empty() {
        return Err(parse_err(0, "empty archive".into()));
    }
    if !bytes.len().is_multiple_of(rec) {
        let offset = bytes.len() / rec * rec;
        return Err(parse_err(
            offset,
            format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - offset
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[lb - 1] as usize;
        if label >= variant.classes() {
            return Err(parse_err(i * rec + lb - 1, format!("label {label} out of range")));
        }
        let px = chunk[lb..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(CIFAR_SIZE, px)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, variant.classes())
}

/// Loads a split. `path` is either the extracted batch directory or a
/// single `.bin` file; directory loads also check the split's record count.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<LabeledDataset> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return parse_cifar_bytes(&bytes, variant, path);
    }
    let (files, expected) = variant.files(split);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let p = path.join(f);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let ds = parse_cifar_bytes(&bytes, variant, &p)?;
        images.extend(ds.images);
        labels.extend(ds.labels);
    }
    if images.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("split holds {} records, expected {expected}", images.len()),
        });
    }
    LabeledDataset::new(images, labels, variant.classes())
}

/// Writes a dataset in the CIFAR-10 record layout, quantizing pixels to bytes.
pub fn write_cifar_binary(path: &Path, ds: &LabeledDataset) -> Result<()> {
    if ds.image_size().is_some_and(|s| s != CIFAR_SIZE) {
        return Err(Error::Contract(format!("CIFAR records hold {CIFAR_SIZE}x{CIFAR_SIZE} images")));
    }
    if ds.labels.iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::Contract("labels must fit in one byte".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + CIFAR_PIXELS));
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        out.push(l as u8);
        out.extend(img.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic generator.
///
/// Class `k` of `K` is the zero-mean sum of two cosine gratings at
/// orientations `+theta` and `-theta`, `theta = k * 90 / (K - 1)` degrees, so
/// the pattern survives a horizontal flip while a 90 degree turn maps it to
/// another class. A vertical luminance ramp marks "up" so the turn itself
/// stays detectable. Per-image nuisances (brightness, contrast, colour tint)
/// and pixel noise are drawn independently of the label, so a random encoder
/// sees mostly nuisance while the class stays linearly recoverable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScheme {
    /// Std of i.i.d. Gaussian pixel noise.
    pub noise: f64,
    /// Grating amplitude.
    pub amplitude: f64,
    /// Grating frequency in cycles per image side.
    pub frequency: f64,
    /// Peak-to-peak height of the vertical ramp.
    pub ramp: f64,
    /// Per-image brightness offset in `±nuisance / 4` and contrast factor in
    /// `[2^-nuisance, 2^nuisance]`.
    pub nuisance: f64,
    /// Scale of the per-image, per-channel colour offsets.
    pub tint: f64,
}

impl Default for SyntheticScheme {
    fn default() -> Self {
        Self {
            noise: 0.1,
            amplitude: 0.1,
            frequency: 3.0,
            ramp: 0.3,
            nuisance: 1.0,
            tint: 0.3,
        }
    }
}

impl SyntheticScheme {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise", self.noise),
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("ramp", self.ramp),
            ("nuisance", self.nuisance),
            ("tint", self.tint),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("dataset.scheme.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// `n / K` images per class in class-major order, deterministic in `seed`.
pub fn synthetic_dataset(n: usize, k: usize, size: usize, seed: u64, scheme: &SyntheticScheme) -> Result<LabeledDataset> {
    scheme.validate()?;
    if k == 0 || n == 0 || !n.is_multiple_of(k) {
        return Err(Error::config("dataset.n", format!("{n} must be a positive multiple of the class count {k}")));
    }
    if size < 2 {
        return Err(Error::config("dataset.size", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let s = size as f64;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..k {
        let theta = if k > 1 {
            std::f64::consts::FRAC_PI_2 * class as f64 / (k - 1) as f64
        } else {
            0.0
        };
        let (c, sn) = (theta.cos(), theta.sin());
        let w = 2.0 * std::f64::consts::PI * scheme.frequency / s;
        let mut template: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5 - s / 2.0, (i % size) as f64 + 0.5 - s / 2.0);
                0.5 * ((w * (x * c + y * sn)).cos() + (w * (-x * c + y * sn)).cos())
            })
            .collect();
        let mean = template.iter().sum::<f64>() / template.len() as f64;
        template.iter_mut().for_each(|v| *v -= mean);
        for _ in 0..n / k {
            let (bright, contrast) = if scheme.nuisance > 0.0 {
                (
                    scheme.nuisance * (rng.random::<f64>() - 0.5) / 2.0,
                    // log-uniform in [2^-nuisance, 2^nuisance]
                    (scheme.nuisance * (2.0 * rng.random::<f64>() - 1.0)).exp2(),
                )
            } else {
                (0.0, 1.0)
            };
            let tint: [f64; 3] = if scheme.tint > 0.0 {
                std::array::from_fn(|_| scheme.tint * (rng.random::<f64>() - 0.5))
            } else {
                [0.0; 3]
            };
            let mut px = Vec::with_capacity(3 * size * size);
            for t in tint {
                for (i, tv) in template.iter().enumerate() {
                    let y = (i / size) as f64 + 0.5;
                    // brighter toward the top row
                    let ramp = scheme.ramp * (0.5 - y / s);
                    let noise = if scheme.noise > 0.0 {
                        scheme.noise * gauss.sample(&mut rng)
                    } else {
                        0.0
                    };
                    let v = 0.5 + bright + t + contrast * (scheme.amplitude * tv + ramp) + noise;
                    px.push(v.clamp(0.0, 1.0));
                }
            }
            images.push(Image::new(size, px)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, k)
}

/// Where a run's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_train: usize,
        n_test: usize,
        classes: usize,
        size: usize,
        seed: u64,
        #[serde(default)]
        scheme: SyntheticScheme,
    },
    Cifar {
        #[serde(default)]
        path: PathBuf,
        #[serde(default)]
        variant: CifarVariant,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_train: 2048,
            n_test: 512,
            classes: 4,
            size: 32,
            seed: 7,
            scheme: SyntheticScheme::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic {
                n_train,
                n_test,
                classes,
                size,
                scheme,
                ..
            } => {
                scheme.validate()?;
                if *classes == 0 {
                    return Err(Error::config("dataset.classes", "must be positive"));
                }
                for (name, n) in [("dataset.n_train", n_train), ("dataset.n_test", n_test)] {
                    if *n == 0 || n % classes != 0 {
                        return Err(Error::config(name, format!("{n} must be a positive multiple of {classes}")));
                    }
                }
                if *size < 2 {
                    return Err(Error::config("dataset.size", "must be at least 2"));
                }
                Ok(())
            }
            DatasetSpec::Cifar { path, .. } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("dataset.path", "missing dataset path"));
                }
                if !path.exists() {
                    return Err(Error::config("dataset.path", format!("{} does not exist", path.display())));
                }
                Ok(())
            }
        }
    }

    /// Image side length without loading anything.
    pub fn image_size(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { size, .. } => *size,
            DatasetSpec::Cifar { .. } => CIFAR_SIZE,
        }
    }

    pub fn load(&self, split: Split) -> Result<LabeledDataset> {
        self.validate()?;
        match self {
            DatasetSpec::Synthetic {
                n_train,
                n_test,
                classes,
                size,
                seed,
                scheme,
            } => {
                let (n, s) = match split {
                    Split::Train => (*n_train, *seed),
                    // the test split is an independent draw
                    Split::Test => (*n_test, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
                };
                synthetic_dataset(n, *classes, *size, s, scheme)
            }
            DatasetSpec::Cifar { path, variant } => load_cifar_binary(path, *variant, split),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let s = SyntheticScheme::default();
        let ds = synthetic_dataset(8, 4, 8, 1, &s).unwrap();
        for c in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 2);
        }
        let again = synthetic_dataset(8, 4, 8, 1, &s).unwrap();
        assert!(ds.images().iter().zip(again.images()).all(|(a, b)| a == b));
        assert!(synthetic_dataset(9, 4, 8, 1, &s).is_err());
        assert!(synthetic_dataset(8, 4, 1, 1, &s).is_err());
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let s = SyntheticScheme {
            noise: 0.0,
            nuisance: 0.0,
            tint: 0.0,
            ..Default::default()
        };
        let ds = synthetic_dataset(12, 3, 8, 5, &s).unwrap();
        for c in 0..3 {
            let imgs: Vec<_> = ds.images().iter().zip(ds.labels()).filter(|(_, &l)| l == c).collect();
            assert!(imgs.windows(2).all(|w| w[0].0 == w[1].0));
        }
        assert_ne!(ds.images()[0], ds.images()[4]);
    }

    #[test]
    fn empty_and_truncated_archives() {
        let p = Path::new("mem.bin");
        match parse_cifar_bytes(&[], CifarVariant::Cifar10, p) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at 0, got {other:?}"),
        }
        let bytes = vec![1u8; 3073 + 10];
        match parse_cifar_bytes(&bytes, CifarVariant::Cifar10, p) {
            Err(Error::Parse { offset: 3073, .. }) => {}
            other => panic!("expected parse error at 3073, got {other:?}"),
        }
        let mut bad = vec![0u8; 3073];
        bad[0] = 10;
        assert!(matches!(
            parse_cifar_bytes(&bad, CifarVariant::Cifar10, p),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn two_record_labels() {
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 256) as u8));
        }
        let ds = parse_cifar_bytes(&bytes, CifarVariant::Cifar10, Path::new("x")).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.images()[0].pixels()[255], 1.0);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![4u8, 42];
        bytes.extend(std::iter::repeat_n(0u8, CIFAR_PIXELS));
        let ds = parse_cifar_bytes(&bytes, CifarVariant::Cifar100, Path::new("x")).unwrap();
        assert_eq!(ds.labels(), &[42]);
        assert_eq!(ds.class_count(), 100);
    }

    #[test]
    fn channel_stats_of_constant_images() {
        let imgs = vec![Image::filled(4, 0.25), Image::filled(4, 0.75)];
        let ds = LabeledDataset::new(imgs, vec![0, 1], 2).unwrap();
        let (m, s) = ds.channel_stats();
        assert!(m.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn dataset_spec_validation() {
        let spec = DatasetSpec::Cifar {
            path: PathBuf::new(),
            variant: CifarVariant::Cifar10,
        };
        match spec.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "dataset.path"),
            other => panic!("{other:?}"),
        }
        DatasetSpec::default().validate().unwrap();
    }
}
