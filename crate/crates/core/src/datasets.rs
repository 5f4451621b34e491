//! Dataset provisioning: synthetic labeled images for desk-scale runs, a
//! CSV manifest loader for real grayscale data, and the private/public/test
//! split logic.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pgm;
use crate::preprocess::GrayImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// (H, W, C) tensors, all sharing one shape, values in [0,1].
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stacks the given items into an (N, H, W, C) batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(CoreError::domain("empty batch"));
        }
        let shape = self.image_shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.images[0].numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            labels.push(self.labels[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend(shape);
        Ok((Tensor::from_vec(&bshape, data)?, labels))
    }

    /// New dataset holding clones of the selected items, in index order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub private_fraction: f64,
    pub public_fraction: f64,
    pub test_fraction: f64,
    pub disjoint: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            private_fraction: 0.8,
            public_fraction: 0.5,
            test_fraction: 0.5,
            disjoint: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub private_pool: LabeledDataset,
    pub public_set: LabeledDataset,
    pub test_set: LabeledDataset,
}

/// Class-distinguishable synthetic images: a class-positioned blob plus a
/// class-frequency stripe pattern and seeded uniform noise.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    shape: (usize, usize),
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(CoreError::domain("need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(CoreError::domain("per_class must be at least 1"));
    }
    let (h, w) = shape;
    if h < 4 || w < 4 {
        return Err(CoreError::domain("synthetic images must be at least 4x4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_scale = 0.05;
    let sigma = h as f64 / 8.0;
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let cy = h as f64 / 2.0 + 0.3 * h as f64 * angle.sin();
        let cx = w as f64 / 2.0 + 0.3 * w as f64 * angle.cos();
        let freq = (c + 1) as f64;
        for _ in 0..per_class {
            let mut data = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let blob = 0.5 * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let stripe =
                        0.15 * (std::f64::consts::TAU * freq * x as f64 / w as f64).sin();
                    let noise = rng.gen_range(-noise_scale..=noise_scale);
                    data.push((0.25 + blob + stripe + noise).clamp(0.0, 1.0));
                }
            }
            images.push(Tensor::from_vec(&[h, w, 1], data)?);
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        class_names: (0..classes).map(|c| format!("class{}", c)).collect(),
        provenance: Provenance::Synthetic,
    })
}

fn draw_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor() as usize).max(1)
}

/// Draws the private/public/test sets from one dataset.
///
/// With `disjoint = false` the three draws are independent samples of the
/// original and may overlap; with `disjoint = true` a single shuffle is
/// partitioned.
pub fn split_dataset(ds: &LabeledDataset, spec: &SplitSpec) -> Result<ExperimentData> {
    if ds.is_empty() {
        return Err(CoreError::domain("cannot split an empty dataset"));
    }
    for (name, f) in [
        ("private_fraction", spec.private_fraction),
        ("public_fraction", spec.public_fraction),
        ("test_fraction", spec.test_fraction),
    ] {
        if !(0.0 < f && f <= 1.0) {
            return Err(CoreError::domain(format!("{} {} outside (0,1]", name, f)));
        }
    }
    let n = ds.len();
    let sizes = [
        draw_size(spec.private_fraction, n),
        draw_size(spec.public_fraction, n),
        draw_size(spec.test_fraction, n),
    ];
    let indices: Vec<Vec<usize>> = if spec.disjoint {
        if sizes.iter().sum::<usize>() > n {
            return Err(CoreError::domain(format!(
                "disjoint split sizes {:?} exceed dataset size {}",
                sizes, n
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(spec.seed, "split", 0));
        order.shuffle(&mut rng);
        let mut start = 0;
        sizes
            .iter()
            .map(|&k| {
                let part = order[start..start + k].to_vec();
                start += k;
                part
            })
            .collect()
    } else {
        sizes
            .iter()
            .enumerate()
            .map(|(draw, &k)| {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(crate::derive_seed(spec.seed, "split", draw as u64));
                order.shuffle(&mut rng);
                order.truncate(k);
                order
            })
            .collect()
    };
    Ok(ExperimentData {
        private_pool: ds.subset(&indices[0]),
        public_set: ds.subset(&indices[1]),
        test_set: ds.subset(&indices[2]),
    })
}

/// Loads a `path,label` manifest of PGM images. Labels are mapped to
/// indices by first appearance; images are normalized to [0,1] with one
/// channel.
pub fn load_manifest(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CoreError::format(format!("{}: {}", path.display(), e)))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut class_names: Vec<String> = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is row 1
        let record =
            record.map_err(|e| CoreError::format(format!("manifest row {}: {}", row, e)))?;
        if record.len() != 2 {
            return Err(CoreError::format(format!(
                "manifest row {}: expected 2 columns, got {}",
                row,
                record.len()
            )));
        }
        let rel = record.get(0).unwrap();
        let label_name = record.get(1).unwrap().to_string();
        let img = pgm::read_pgm(&base.join(rel))?;
        let norm = img.normalize()?;
        let tensor = norm.replicate_channels(1)?;
        if let Some(first) = images.first() {
            let first: &Tensor = first;
            if first.shape() != tensor.shape() {
                return Err(CoreError::shape(format!(
                    "manifest row {}: image shape {:?} differs from {:?}",
                    row,
                    tensor.shape(),
                    first.shape()
                )));
            }
        }
        let label = match class_names.iter().position(|c| *c == label_name) {
            Some(idx) => idx,
            None => {
                class_names.push(label_name);
                class_names.len() - 1
            }
        };
        images.push(tensor);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(CoreError::format(format!(
            "{}: manifest has no data rows",
            path.display()
        )));
    }
    Ok(LabeledDataset {
        images,
        labels,
        class_names,
        provenance: Provenance::Manifest,
    })
}

/// Writes a dataset as a PGM tree (one subdirectory per class) plus a
/// `manifest.csv` loadable by `load_manifest`. Returns the manifest path.
pub fn export_pgm_tree(ds: &LabeledDataset, out_dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)
        .map_err(|e| CoreError::format(e.to_string()))?;
    writer
        .write_record(["path", "label"])
        .map_err(|e| CoreError::format(e.to_string()))?;
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let class = &ds.class_names[label];
        let dir = out_dir.join(class);
        std::fs::create_dir_all(&dir)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        // Channel 0 only; synthetic data is single-channel.
        let c = img.shape()[2];
        let pixels: Vec<f64> = img.data().iter().step_by(c).copied().collect();
        let gray = GrayImage::from_normalized(h, w, 8, pixels)?;
        let levels = gray.levels();
        let raw = GrayImage::from_levels(h, w, 8, levels)?;
        let rel = format!("{}/img{:05}.pgm", class, i);
        pgm::write_pgm(&out_dir.join(&rel), &raw)?;
        writer
            .write_record([rel.as_str(), class.as_str()])
            .map_err(|e| CoreError::format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn synthetic_counts_and_balance() {
        let ds = generate_synthetic(3, 100, (32, 32), 1).unwrap();
        assert_eq!(ds.len(), 300);
        for c in 0..3 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(ds.image_shape(), &[32, 32, 1]);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic(3, 10, (16, 16), 9).unwrap();
        let b = generate_synthetic(3, 10, (16, 16), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_class_means_separated() {
        let ds = generate_synthetic(3, 50, (32, 32), 2).unwrap();
        let n_pix = 32 * 32;
        let mut means = vec![vec![0.0f64; n_pix]; 3];
        for (img, &label) in ds.images.iter().zip(&ds.labels) {
            for (m, v) in means[label].iter_mut().zip(img.data()) {
                *m += v / 50.0;
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let l2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(l2 > 5.0 * 0.05, "classes {} and {} too close: {}", a, b, l2);
            }
        }
    }

    #[test]
    fn split_sizes_match_floor_rule() {
        let ds = generate_synthetic(2, 1532, (4, 4), 3).unwrap();
        assert_eq!(ds.len(), 3064);
        let data = split_dataset(&ds, &SplitSpec::default()).unwrap();
        assert_eq!(data.private_pool.len(), 2451);
        assert_eq!(data.public_set.len(), 1532);
        assert_eq!(data.test_set.len(), 1532);
    }

    #[test]
    fn full_fractions_copy_everything() {
        let ds = generate_synthetic(2, 5, (4, 4), 3).unwrap();
        let spec = SplitSpec {
            private_fraction: 1.0,
            public_fraction: 1.0,
            test_fraction: 1.0,
            ..Default::default()
        };
        let data = split_dataset(&ds, &spec).unwrap();
        assert_eq!(data.private_pool.len(), 10);
        assert_eq!(data.public_set.len(), 10);
        assert_eq!(data.test_set.len(), 10);
    }

    #[test]
    fn disjoint_split_partitions() {
        let ds = generate_synthetic(2, 50, (4, 4), 3).unwrap();
        let spec = SplitSpec {
            private_fraction: 0.5,
            public_fraction: 0.25,
            test_fraction: 0.25,
            disjoint: true,
            seed: 11,
        };
        let data = split_dataset(&ds, &spec).unwrap();
        assert_eq!(
            (data.private_pool.len(), data.public_set.len(), data.test_set.len()),
            (50, 25, 25)
        );
    }

    #[test]
    fn disjoint_overflow_rejected() {
        let ds = generate_synthetic(2, 50, (4, 4), 3).unwrap();
        let spec = SplitSpec {
            disjoint: true,
            ..Default::default()
        };
        assert!(split_dataset(&ds, &spec).is_err());
    }

    #[test]
    fn split_reproducible_and_seed_sensitive() {
        let ds = generate_synthetic(2, 100, (4, 4), 3).unwrap();
        let spec = SplitSpec::default();
        let a = split_dataset(&ds, &spec).unwrap();
        let b = split_dataset(&ds, &spec).unwrap();
        assert_eq!(a.private_pool.labels, b.private_pool.labels);
        assert_eq!(a.private_pool.images, b.private_pool.images);
        let other = split_dataset(
            &ds,
            &SplitSpec {
                seed: 99,
                ..spec
            },
        )
        .unwrap();
        assert_ne!(a.private_pool.images, other.private_pool.images);
    }

    #[test]
    fn pgm_tree_round_trip() {
        let dir = tempdir().unwrap();
        let ds = generate_synthetic(2, 3, (8, 8), 4).unwrap();
        let manifest = export_pgm_tree(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.class_names, ds.class_names);
        assert_eq!(loaded.labels, ds.labels);
        // Quantized to 8 bits on the way out.
        for (a, b) in loaded.images.iter().zip(&ds.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "path,label\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(CoreError::Format(_))));
    }

    #[test]
    fn degenerate_generator_inputs_rejected() {
        assert!(generate_synthetic(1, 10, (8, 8), 0).is_err());
        assert!(generate_synthetic(3, 0, (8, 8), 0).is_err());
    }
}
