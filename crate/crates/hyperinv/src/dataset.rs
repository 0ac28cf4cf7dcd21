//! Labeled datasets over colored, rotated digit images, with per-factor
//! labels and provenance.

use crate::error::{Error, Result};
use crate::glyphs::synth_glyph_dataset;
use crate::idx::{load_idx_images, load_idx_labels};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transforms::{colorize, rotate_image, ANGLES};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Mnist,
    Kmnist,
    SyntheticGlyph,
}

/// Which per-factor label a task predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelField {
    Digit,
    Rotation,
    Color,
}

impl LabelField {
    pub fn class_count(self) -> usize {
        match self {
            LabelField::Digit => 10,
            LabelField::Rotation => 7,
            LabelField::Color => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelField::Digit => "digit",
            LabelField::Rotation => "rotation",
            LabelField::Color => "color",
        }
    }
}

/// One example: a [3, H, W] image plus its three factor labels.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub image: Tensor,
    pub digit_label: usize,
    pub rotation_label: usize,
    pub color_label: usize,
}

/// Images plus per-factor labels with provenance metadata.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// [N, 3, H, W], values in [0, 1].
    pub images: Tensor,
    pub digit_labels: Vec<usize>,
    pub rotation_labels: Vec<usize>,
    pub color_labels: Vec<usize>,
    pub source: Source,
    pub seed: u64,
    /// Set on subsampled datasets: description of the parent.
    pub parent: Option<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample {
            image: self.images.row(i),
            digit_label: self.digit_labels[i],
            rotation_label: self.rotation_labels[i],
            color_label: self.color_labels[i],
        }
    }

    pub fn labels(&self, field: LabelField) -> &[usize] {
        match field {
            LabelField::Digit => &self.digit_labels,
            LabelField::Rotation => &self.rotation_labels,
            LabelField::Color => &self.color_labels,
        }
    }

    pub fn per_class_counts(&self, field: LabelField) -> Vec<usize> {
        let mut counts = vec![0; field.class_count()];
        for &l in self.labels(field) {
            counts[l] += 1;
        }
        counts
    }

    /// Gather a batch: images [B, 3, H, W] and the labels of one field.
    pub fn batch(&self, indices: &[usize], field: LabelField) -> (Tensor, Vec<usize>) {
        let images = self.images.gather_rows(indices);
        let labels = indices.iter().map(|&i| self.labels(field)[i]).collect();
        (images, labels)
    }

    pub fn manifest(&self, name: &str) -> DatasetManifest {
        DatasetManifest {
            name: name.to_string(),
            source: self.source,
            seed: self.seed,
            size: self.len(),
            digit_counts: self.per_class_counts(LabelField::Digit),
            rotation_counts: self.per_class_counts(LabelField::Rotation),
            color_counts: self.per_class_counts(LabelField::Color),
            parent: self.parent.clone(),
        }
    }
}

/// JSON manifest recording source, seed, split sizes and per-class counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub source: Source,
    pub seed: u64,
    pub size: usize,
    pub digit_counts: Vec<usize>,
    pub rotation_counts: Vec<usize>,
    pub color_counts: Vec<usize>,
    pub parent: Option<String>,
}

/// Build the colored-rotated dataset: each grayscale base image gets one
/// uniformly sampled angle from the 7-angle set and one uniformly sampled
/// RGB channel. Factor labels are recorded; deterministic in `seed`.
pub fn build_colored_rotated(
    base: &Tensor,
    digit_labels: &[usize],
    source: Source,
    seed: u64,
) -> Result<LabeledDataset> {
    let s = base.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("build_colored_rotated", &[0, 1, 0, 0], s));
    }
    let n = s[0];
    if digit_labels.len() != n {
        return Err(Error::shape("build_colored_rotated labels", &[n], &[digit_labels.len()]));
    }
    let mut images = Vec::with_capacity(n);
    let mut rotation_labels = Vec::with_capacity(n);
    let mut color_labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::from_parts(seed, "colored-rotated", &[i as u64]);
        let angle_idx = rng.below(ANGLES.len());
        let channel = rng.below(3);
        let rotated = rotate_image(&base.row(i), ANGLES[angle_idx])?;
        images.push(colorize(&rotated, channel)?);
        rotation_labels.push(angle_idx);
        color_labels.push(channel);
    }
    Ok(LabeledDataset {
        images: Tensor::stack(&images)?,
        digit_labels: digit_labels.to_vec(),
        rotation_labels,
        color_labels,
        source,
        seed,
        parent: None,
    })
}

/// Exactly `n_per_class` examples per class of `field`, drawn uniformly
/// without replacement, deterministic in `seed`.
pub fn subsample_per_class(
    dataset: &LabeledDataset,
    n_per_class: usize,
    field: LabelField,
    seed: u64,
) -> Result<LabeledDataset> {
    let labels = dataset.labels(field);
    let classes = field.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(n_per_class * classes);
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < n_per_class {
            return Err(Error::InsufficientClass {
                class,
                available: pool.len(),
                requested: n_per_class,
            });
        }
        let mut rng = Rng::from_parts(seed, "subsample", &[field.class_count() as u64, class as u64]);
        let picks = rng.sample_without_replacement(pool.len(), n_per_class);
        chosen.extend(picks.into_iter().map(|p| pool[p]));
    }
    chosen.sort_unstable();
    Ok(LabeledDataset {
        images: dataset.images.gather_rows(&chosen),
        digit_labels: chosen.iter().map(|&i| dataset.digit_labels[i]).collect(),
        rotation_labels: chosen.iter().map(|&i| dataset.rotation_labels[i]).collect(),
        color_labels: chosen.iter().map(|&i| dataset.color_labels[i]).collect(),
        source: dataset.source,
        seed,
        parent: Some(format!(
            "{:?} seed {} size {} (subsampled {} per {} class)",
            dataset.source,
            dataset.seed,
            dataset.len(),
            n_per_class,
            field.name()
        )),
    })
}

/// Colored-rotated dataset over freshly synthesized glyphs.
pub fn glyph_colored_rotated(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let (base, labels) = synth_glyph_dataset(n_per_class, seed);
    build_colored_rotated(&base, &labels, Source::SyntheticGlyph, seed)
}

/// The downstream stand-in domain: same factor structure over the
/// transfer glyph alphabet.
pub fn glyph_transfer_colored_rotated(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let (base, labels) = crate::glyphs::synth_glyph_dataset_from(
        crate::glyphs::GlyphAlphabet::Transfer,
        n_per_class,
        seed,
    );
    build_colored_rotated(&base, &labels, Source::SyntheticGlyph, seed)
}

/// Colored-rotated dataset over an IDX image/label pair on disk.
pub fn idx_colored_rotated(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    source: Source,
    seed: u64,
) -> Result<LabeledDataset> {
    let base = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    build_colored_rotated(&base, &labels, source, seed)
}
