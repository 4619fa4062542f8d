//! Indexed datasets, augmentation, and episodic sampling.
//!
//! Every instance carries a stable integer index (its position), which is
//! what the memory banks are addressed by. Indices are assigned in a sorted
//! canonical order at construction and never change.

use crate::error::{Error, Result};
use crate::init::standard_normal;
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::path::Path;

/// CIFAR-100 per-channel statistics used to standardize pixel values.
const CIFAR_MEAN: [f64; 3] = [0.5071, 0.4865, 0.4409];
const CIFAR_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];

const CIFAR_TRAIN_RECORDS: usize = 50_000;
const CIFAR_TEST_RECORDS: usize = 10_000;
/// coarse label byte + fine label byte + 32*32*3 pixels.
const CIFAR_RECORD_BYTES: usize = 2 + 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// In-memory dataset; the instance index is the array position.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    pub name: String,
    /// `(n, channels, height, width)`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl IndexedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), index)
    }

    pub fn resolution(&self) -> usize {
        self.images.dim().2
    }

    pub fn channels(&self) -> usize {
        self.images.dim().1
    }

    /// Gather a batch in the given index order.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.image(idx));
            labels.push(self.labels[idx]);
        }
        (out, labels)
    }

    /// Instance indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Materialize a sub-dataset from the given instance indices, in order.
    /// The new dataset renumbers instances from zero.
    pub fn subset(&self, indices: &[usize]) -> Result<IndexedDataset> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "subset index {i} out of range for {} instances",
                    self.len()
                )));
            }
        }
        let (images, labels) = self.batch(indices);
        Ok(IndexedDataset {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
        })
    }
}

/// Parameters of the generated desk-scale dataset. Classes are smooth random
/// templates; instances are shifted, contrast-jittered, noisy copies.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub resolution: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Maximum cyclic shift in pixels, per axis.
    pub shift: usize,
    /// Contrast scale drawn from [1 - jitter, 1 + jitter].
    pub contrast_jitter: f64,
    /// Fraction of train labels replaced with a uniformly drawn wrong class.
    /// The test split always keeps clean labels.
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if self.resolution == 0 || self.channels == 0 {
            return Err(Error::invalid("resolution and channels must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("per-class counts must be positive"));
        }
        if self.noise < 0.0 || self.contrast_jitter < 0.0 || self.contrast_jitter >= 1.0 {
            return Err(Error::invalid(
                "noise must be >= 0 and contrast_jitter in [0, 1)",
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid("label_noise must lie in [0, 1)"));
        }
        if self.shift >= self.resolution {
            return Err(Error::invalid("shift must be smaller than the resolution"));
        }
        Ok(())
    }
}

/// Generate one split. Templates depend only on the seed, so train and test
/// share the same class structure; instance noise differs per split.
pub fn synthetic(spec: &SyntheticSpec, split: Split) -> Result<IndexedDataset> {
    spec.validate()?;
    let templates = class_templates(spec);
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let salt = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ salt);
    let n = spec.classes * per_class;
    let (res, ch) = (spec.resolution, spec.channels);
    let mut images = Array4::zeros((n, ch, res, res));
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for item in 0..per_class {
            let idx = class * per_class + item;
            let dy = rng.gen_range(0..=2 * spec.shift) as isize - spec.shift as isize;
            let dx = rng.gen_range(0..=2 * spec.shift) as isize - spec.shift as isize;
            let contrast = 1.0 + spec.contrast_jitter * rng.gen_range(-1.0..1.0);
            for c in 0..ch {
                let t = &templates[class * ch + c];
                for y in 0..res {
                    for x in 0..res {
                        let sy = (y as isize + dy).rem_euclid(res as isize) as usize;
                        let sx = (x as isize + dx).rem_euclid(res as isize) as usize;
                        images[[idx, c, y, x]] =
                            contrast * t[sy * res + sx] + spec.noise * standard_normal(&mut rng);
                    }
                }
            }
            labels.push(class);
        }
    }
    if split == Split::Train && spec.label_noise > 0.0 {
        // Separate stream so images are identical with and without corruption.
        let mut flip_rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x666c_6970);
        for label in &mut labels {
            if flip_rng.gen_range(0.0..1.0) < spec.label_noise {
                let offset = flip_rng.gen_range(1..spec.classes);
                *label = (*label + offset) % spec.classes;
            }
        }
    }
    Ok(IndexedDataset {
        name: format!("synthetic-{}", split.as_str()),
        images,
        labels,
        classes: spec.classes,
    })
}

/// Smooth per-class, per-channel patterns: a few random low-frequency
/// cosines, standardized to zero mean and unit variance.
fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let res = spec.resolution;
    let mut templates = Vec::with_capacity(spec.classes * spec.channels);
    for _ in 0..spec.classes * spec.channels {
        let mut t = vec![0.0; res * res];
        for _ in 0..4 {
            let amp = standard_normal(&mut rng);
            let fy = rng.gen_range(0..3) as f64;
            let fx = rng.gen_range(0..3) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for y in 0..res {
                for x in 0..res {
                    let arg = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64)
                        / res as f64
                        + phase;
                    t[y * res + x] += amp * arg.cos();
                }
            }
        }
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        let std = var.sqrt().max(1e-6);
        for v in &mut t {
            *v = (*v - mean) / std;
        }
        templates.push(t);
    }
    templates
}

/// Load one split of the CIFAR-100 binary distribution from
/// `root/cifar-100-binary/{train,test}.bin`.
pub fn load_cifar100(root: &Path, split: Split) -> Result<IndexedDataset> {
    let file = root
        .join("cifar-100-binary")
        .join(format!("{}.bin", split.as_str()));
    let bytes = fs::read(&file).map_err(|e| {
        Error::invalid(format!(
            "cannot read {}: {e}; download the CIFAR-100 binary archive and unpack it so that \
             {}/cifar-100-binary/train.bin and test.bin exist",
            file.display(),
            root.display()
        ))
    })?;
    let expected = match split {
        Split::Train => CIFAR_TRAIN_RECORDS,
        Split::Test => CIFAR_TEST_RECORDS,
    };
    parse_cifar_records(&bytes, expected, split)
}

fn parse_cifar_records(bytes: &[u8], expected: usize, split: Split) -> Result<IndexedDataset> {
    if bytes.len() != expected * CIFAR_RECORD_BYTES {
        return Err(Error::Integrity(format!(
            "CIFAR-100 {} split should be {} bytes, found {}",
            split.as_str(),
            expected * CIFAR_RECORD_BYTES,
            bytes.len()
        )));
    }
    let mut images = Array4::zeros((expected, 3, 32, 32));
    let mut labels = Vec::with_capacity(expected);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        labels.push(record[1] as usize);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let raw = record[2 + c * 1024 + y * 32 + x] as f64 / 255.0;
                    images[[i, c, y, x]] = (raw - CIFAR_MEAN[c]) / CIFAR_STD[c];
                }
            }
        }
    }
    Ok(IndexedDataset {
        name: format!("cifar100-{}", split.as_str()),
        images,
        labels,
        classes: 100,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    Standard,
}

impl std::str::FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentPolicy::None),
            "standard" => Ok(AugmentPolicy::Standard),
            other => Err(Error::invalid(format!(
                "unknown augmentation policy '{other}' (expected none|standard)"
            ))),
        }
    }
}

/// Apply the augmentation policy to one image. `none` is the bitwise
/// identity; `standard` pads with zeros, crops back to size at a random
/// offset, and flips horizontally with probability one half. The pad width
/// scales with resolution (4 pixels at 32, at least 1).
pub fn augment<R: Rng + ?Sized>(
    image: ArrayView3<'_, f64>,
    policy: AugmentPolicy,
    rng: &mut R,
) -> Array3<f64> {
    match policy {
        AugmentPolicy::None => image.to_owned(),
        AugmentPolicy::Standard => {
            let (c, h, w) = image.dim();
            let pad = (h / 8).max(1);
            let oy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let ox = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let flip = rng.gen_bool(0.5);
            let mut out = Array3::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let tx = if flip { w - 1 - x } else { x };
                        let sx = x as isize + ox;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ch, y, tx]] = image[[ch, sy as usize, sx as usize]];
                    }
                }
            }
            out
        }
    }
}

/// Augment a whole batch row by row, drawing from the rng in row order.
pub fn augment_batch<R: Rng + ?Sized>(
    images: &Array4<f64>,
    policy: AugmentPolicy,
    rng: &mut R,
) -> Array4<f64> {
    let mut out = images.clone();
    if policy == AugmentPolicy::None {
        return out;
    }
    for row in 0..images.dim().0 {
        let augmented = augment(images.index_axis(Axis(0), row), policy, rng);
        out.index_axis_mut(Axis(0), row).assign(&augmented);
    }
    out
}

/// One sampled few-shot task. Support and query hold dataset indices grouped
/// by episode-class position (matching `classes`).
#[derive(Debug, Clone)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

/// Sample `way` distinct classes, then disjoint support and query instances
/// per class, all uniformly.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &IndexedDataset,
    way: usize,
    shot: usize,
    query_per_class: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way < 2 || shot < 1 || query_per_class < 1 {
        return Err(Error::invalid(
            "need way >= 2, shot >= 1 and query_per_class >= 1",
        ));
    }
    if way > dataset.classes {
        return Err(Error::invalid(format!(
            "way {way} exceeds the {} available classes",
            dataset.classes
        )));
    }
    let by_class = dataset.by_class();
    let need = shot + query_per_class;
    if by_class.iter().any(|g| g.len() < need) {
        return Err(Error::invalid(format!(
            "every class needs at least {need} instances for shot {shot} + query {query_per_class}"
        )));
    }

    let classes = choose_distinct(dataset.classes, way, rng);
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way);
    for &class in &classes {
        let picks = choose_distinct(by_class[class].len(), need, rng);
        support.push(picks[..shot].iter().map(|&p| by_class[class][p]).collect());
        query.push(picks[shot..].iter().map(|&p| by_class[class][p]).collect());
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// First `k` elements of a partial Fisher-Yates shuffle of `0..n`.
fn choose_distinct<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            resolution: 8,
            channels: 1,
            train_per_class: 10,
            test_per_class: 5,
            noise: 0.5,
            shift: 1,
            contrast_jitter: 0.2,
            label_noise: 0.0,
            seed: 99,
        }
    }

    #[test]
    fn synthetic_counts_and_canonical_order() {
        let train = synthetic(&toy_spec(), Split::Train).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(train.classes, 4);
        let mut sorted = train.labels.clone();
        sorted.sort_unstable();
        assert_eq!(train.labels, sorted, "labels are grouped in class order");
        let test = synthetic(&toy_spec(), Split::Test).unwrap();
        assert_eq!(test.len(), 20);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(&toy_spec(), Split::Train).unwrap();
        let b = synthetic(&toy_spec(), Split::Train).unwrap();
        assert_eq!(a.images, b.images);
        let mut other = toy_spec();
        other.seed = 100;
        let c = synthetic(&other, Split::Train).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_splits_differ_but_share_structure() {
        let train = synthetic(&toy_spec(), Split::Train).unwrap();
        let test = synthetic(&toy_spec(), Split::Test).unwrap();
        // Same class templates, different instances: per-class means should
        // correlate strongly across splits while raw instances differ.
        let class0_train = train.image(0);
        let class0_test = test.image(0);
        assert_ne!(class0_train, class0_test);
        let dot: f64 = class0_train
            .iter()
            .zip(class0_test.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot > 0.0, "same template should dominate the correlation");
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut s = toy_spec();
        s.classes = 1;
        assert!(synthetic(&s, Split::Train).is_err());
        let mut s = toy_spec();
        s.shift = 8;
        assert!(synthetic(&s, Split::Train).is_err());
        let mut s = toy_spec();
        s.contrast_jitter = 1.0;
        assert!(synthetic(&s, Split::Train).is_err());
        let mut s = toy_spec();
        s.label_noise = 1.0;
        assert!(synthetic(&s, Split::Train).is_err());
    }

    #[test]
    fn label_noise_corrupts_only_train_labels() {
        let clean = toy_spec();
        let mut noisy = toy_spec();
        noisy.label_noise = 0.3;
        noisy.train_per_class = 200;
        let mut big_clean = clean.clone();
        big_clean.train_per_class = 200;

        let a = synthetic(&big_clean, Split::Train).unwrap();
        let b = synthetic(&noisy, Split::Train).unwrap();
        assert_eq!(a.images, b.images, "corruption must not touch pixels");
        let flipped = a
            .labels
            .iter()
            .zip(&b.labels)
            .filter(|(x, y)| x != y)
            .count();
        let rate = flipped as f64 / a.len() as f64;
        assert!(
            (rate - 0.3).abs() < 0.05,
            "flip rate {rate} should be close to the requested 0.3"
        );
        assert!(b.labels.iter().all(|&l| l < b.classes));

        let t_clean = synthetic(&big_clean, Split::Test).unwrap();
        let t_noisy = synthetic(&noisy, Split::Test).unwrap();
        assert_eq!(t_clean.labels, t_noisy.labels, "test labels stay clean");

        let again = synthetic(&noisy, Split::Train).unwrap();
        assert_eq!(b.labels, again.labels, "corruption is deterministic");
    }

    #[test]
    fn batch_gathers_in_order() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let (images, labels) = data.batch(&[12, 0, 33]);
        assert_eq!(images.dim().0, 3);
        assert_eq!(labels, vec![data.labels[12], data.labels[0], data.labels[33]]);
        assert_eq!(images.index_axis(Axis(0), 1), data.image(0));
    }

    #[test]
    fn augment_none_is_bitwise_identity() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let out = augment(data.image(3), AugmentPolicy::None, &mut rng);
        for (a, b) in out.iter().zip(data.image(3).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn augment_standard_is_shape_preserving_and_deterministic() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = augment(data.image(3), AugmentPolicy::Standard, &mut rng);
        assert_eq!(a.dim(), data.image(3).dim());
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let b = augment(data.image(3), AugmentPolicy::Standard, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn augment_policy_parses() {
        assert_eq!("none".parse::<AugmentPolicy>().unwrap(), AugmentPolicy::None);
        assert_eq!(
            "standard".parse::<AugmentPolicy>().unwrap(),
            AugmentPolicy::Standard
        );
        assert!("mixup".parse::<AugmentPolicy>().is_err());
    }

    #[test]
    fn episode_counts() {
        let mut spec = toy_spec();
        spec.classes = 6;
        spec.train_per_class = 20;
        let data = synthetic(&spec, Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ep = sample_episode(&data, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.way(), 5);
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.query.iter().map(Vec::len).sum::<usize>(), 75);
    }

    #[test]
    fn episode_deterministic_under_seed() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = sample_episode(&data, 3, 2, 4, &mut rng).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let b = sample_episode(&data, 3, 2, 4, &mut rng).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.support, b.support);
        assert_eq!(a.query, b.query);
    }

    #[test]
    fn episode_support_query_disjoint() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let ep = sample_episode(&data, 3, 2, 3, &mut rng).unwrap();
            let support: HashSet<usize> = ep.support.iter().flatten().copied().collect();
            let query: HashSet<usize> = ep.query.iter().flatten().copied().collect();
            assert!(support.is_disjoint(&query));
            let distinct_classes: HashSet<usize> = ep.classes.iter().copied().collect();
            assert_eq!(distinct_classes.len(), ep.way());
        }
    }

    #[test]
    fn episode_rejects_insufficient_instances() {
        let data = synthetic(&toy_spec(), Split::Test).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        assert!(sample_episode(&data, 3, 3, 3, &mut rng).is_err());
        assert!(sample_episode(&data, 5, 1, 1, &mut rng).is_err(), "way > classes");
    }

    #[test]
    fn episode_class_selection_is_uniform() {
        let mut spec = toy_spec();
        spec.classes = 5;
        let data = synthetic(&spec, Split::Train).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut counts = [0usize; 5];
        let episodes = 10_000;
        for _ in 0..episodes {
            let ep = sample_episode(&data, 2, 1, 1, &mut rng).unwrap();
            for &c in &ep.classes {
                counts[c] += 1;
            }
        }
        // Each episode picks 2 of 5 classes; expected count per class is
        // episodes * 2 / 5. Chi-square with 4 degrees of freedom, 3-sigma
        // critical value 16.25.
        let expected = episodes as f64 * 2.0 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.25, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn cifar_parser_reads_records() {
        // Two fabricated records: fine labels 7 and 42, constant pixels.
        let mut bytes = Vec::new();
        for (fine, value) in [(7u8, 0u8), (42u8, 255u8)] {
            bytes.push(1); // coarse label, ignored
            bytes.push(fine);
            bytes.extend(std::iter::repeat(value).take(3072));
        }
        let data = parse_cifar_records(&bytes, 2, Split::Test).unwrap();
        assert_eq!(data.labels, vec![7, 42]);
        // Pixel 0 of record 0 is 0/255 standardized by channel 0 stats.
        let want = (0.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((data.images[[0, 0, 0, 0]] - want).abs() < 1e-12);
        let want = (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2];
        assert!((data.images[[1, 2, 31, 31]] - want).abs() < 1e-12);
    }

    #[test]
    fn cifar_parser_rejects_truncated_files() {
        let bytes = vec![0u8; CIFAR_RECORD_BYTES * 2 - 1];
        assert!(matches!(
            parse_cifar_records(&bytes, 2, Split::Test),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn cifar_missing_file_mentions_remedy() {
        let err = load_cifar100(Path::new("/nonexistent"), Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cifar-100-binary"), "message: {msg}");
        assert!(msg.contains("download"), "message: {msg}");
    }

    #[test]
    fn cifar_full_load_when_data_present() {
        // Only runs when a real copy is available locally.
        let root = match std::env::var("PEERDISTILL_DATA_ROOT") {
            Ok(r) => std::path::PathBuf::from(r),
            Err(_) => return,
        };
        if !root.join("cifar-100-binary").join("train.bin").exists() {
            return;
        }
        let train = load_cifar100(&root, Split::Train).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(train.classes, 100);
        let test = load_cifar100(&root, Split::Test).unwrap();
        assert_eq!(test.len(), 10_000);
    }

    #[test]
    fn subset_reindexes_and_keeps_content() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let sub = data.subset(&[3, 0]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels[0], data.labels[3]);
        assert_eq!(sub.labels[1], data.labels[0]);
        assert_eq!(sub.image(1), data.image(0));
        assert!(data.subset(&[data.len()]).is_err());
    }

    #[test]
    fn batch_augment_matches_row_order() {
        let data = synthetic(&toy_spec(), Split::Train).unwrap();
        let (images, _) = data.batch(&[0, 1, 2]);
        let mut rng_a = ChaCha20Rng::seed_from_u64(9);
        let whole = augment_batch(&images, AugmentPolicy::Standard, &mut rng_a);
        let mut rng_b = ChaCha20Rng::seed_from_u64(9);
        for row in 0..3 {
            let one = augment(images.index_axis(Axis(0), row), AugmentPolicy::Standard, &mut rng_b);
            assert_eq!(whole.index_axis(Axis(0), row), one.view());
        }
        let mut rng_c = ChaCha20Rng::seed_from_u64(9);
        let none = augment_batch(&images, AugmentPolicy::None, &mut rng_c);
        assert_eq!(none, images);
    }
}
