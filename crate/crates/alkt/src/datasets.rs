//! Synthetic dataset generation and small-image ingestion with deterministic
//! splits.
//!
//! Ground-truth labels are private to this module: scoring code cannot read
//! them, only the simulated oracle ([`Dataset::oracle_label`]) and evaluation
//! paths ([`Dataset::labels_for`]) can.

use crate::error::{AlktError, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Scale byte features to [0,1] (divide by 255); leave reals untouched.
    ZeroOne,
    /// Per-feature standardization to zero mean, unit variance.
    Standardize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    features: Tensor,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub train_pool: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub classes: usize,
    pub checksum: String,
}

impl Dataset {
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Simulated annotation oracle: ground-truth label for one index.
    pub fn oracle_label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Evaluation-path label access.
    pub fn labels_for(&self, idxs: &[usize]) -> Vec<usize> {
        idxs.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// SHA-256 over features and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            n: self.len(),
            classes: self.num_classes,
            checksum: self.checksum(),
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }
}

/// Deterministic class centers: evenly spaced on the unit circle in the
/// first two dimensions (evenly spaced on a line for 1-D).
fn blob_center(class: usize, num_classes: usize, dims: usize) -> Vec<f64> {
    let mut c = vec![0.0; dims];
    if dims == 1 {
        c[0] = class as f64 * 2.0;
    } else {
        let theta = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        c[0] = theta.cos();
        c[1] = theta.sin();
    }
    c
}

/// Gaussian clusters with per-class sizes, stratified 80/20
/// train-pool/test split, deterministic in `seed`.
pub fn make_blobs(per_class: &[usize], dims: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let num_classes = per_class.len();
    if num_classes < 2 || dims == 0 || spread <= 0.0 || per_class.iter().any(|&n| n == 0) {
        return Err(AlktError::invalid(
            "make-blobs needs >=2 classes with positive sizes, dims and spread",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let n: usize = per_class.iter().sum();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in per_class.iter().enumerate() {
        let center = blob_center(class, num_classes, dims);
        for _ in 0..count {
            for &c in &center {
                data.push(c + normal.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    let features = Tensor::new(vec![n, dims], data)?;
    let (train_pool, test) = stratified_split(&labels, num_classes, 0.8, &mut rng);
    Ok(Dataset {
        name: format!("blobs-{num_classes}x{dims}d"),
        features,
        labels,
        num_classes,
        train_pool,
        test,
    })
}

fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idxs.shuffle(rng);
        let cut = (train_fraction * idxs.len() as f64).floor() as usize;
        train.extend_from_slice(&idxs[..cut]);
        test.extend_from_slice(&idxs[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Subsample each class to the given fraction, deterministically.
pub fn make_imbalanced(base: &Dataset, class_fractions: &[f64], seed: u64) -> Result<Dataset> {
    if class_fractions.len() != base.num_classes {
        return Err(AlktError::invalid(format!(
            "need one fraction per class ({}), got {}",
            base.num_classes,
            class_fractions.len()
        )));
    }
    if class_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(AlktError::invalid("class fractions must be in (0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, &frac) in class_fractions.iter().enumerate() {
        let mut idxs: Vec<usize> = (0..base.len())
            .filter(|&i| base.labels[i] == class)
            .collect();
        let target = (frac * idxs.len() as f64).round() as usize;
        if target == 0 {
            return Err(AlktError::invalid(format!(
                "fraction {frac} empties class {class}"
            )));
        }
        idxs.shuffle(&mut rng);
        keep.extend_from_slice(&idxs[..target]);
    }
    keep.sort_unstable();
    // compact indices; split membership is preserved
    let old_to_new: std::collections::HashMap<usize, usize> =
        keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let features = base.features.gather_rows(&keep);
    let labels: Vec<usize> = keep.iter().map(|&i| base.labels[i]).collect();
    let remap = |split: &[usize]| -> Vec<usize> {
        split
            .iter()
            .filter_map(|i| old_to_new.get(i).copied())
            .collect()
    };
    Ok(Dataset {
        name: format!("{}-imbalanced", base.name),
        features,
        labels,
        num_classes: base.num_classes,
        train_pool: remap(&base.train_pool),
        test: remap(&base.test),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], pos: usize) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AlktError::parse(format!("unexpected end of file at byte {pos}")))
}

/// Load an IDX image/label file pair (big-endian, standard magic numbers).
/// Images become `[n, 1, h, w]` features.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    normalization: Normalization,
    split_seed: u64,
) -> Result<Dataset> {
    let mut images = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut images)?;
    let magic = read_u32_be(&images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(AlktError::parse(format!(
            "bad image magic {magic:#010x} at byte 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&images, 4)? as usize;
    let h = read_u32_be(&images, 8)? as usize;
    let w = read_u32_be(&images, 12)? as usize;
    let payload = &images[16..];
    if payload.len() != n * h * w {
        return Err(AlktError::parse(format!(
            "image payload is {} bytes at byte 16, header implies {}",
            payload.len(),
            n * h * w
        )));
    }

    let mut label_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut label_bytes)?;
    let lmagic = read_u32_be(&label_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(AlktError::parse(format!(
            "bad label magic {lmagic:#010x} at byte 0, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&label_bytes, 4)? as usize;
    if ln != n {
        return Err(AlktError::parse(format!(
            "{n} images but {ln} labels"
        )));
    }
    if label_bytes.len() != 8 + n {
        return Err(AlktError::parse(format!(
            "label payload is {} bytes at byte 8, header implies {n}",
            label_bytes.len() - 8
        )));
    }
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0).max(2);
    let mut data: Vec<f64> = payload.iter().map(|&b| b as f64).collect();
    normalize_features(&mut data, n, h * w, normalization, true);
    let features = Tensor::new(vec![n, 1, h, w], data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let (train_pool, test) = stratified_split(&labels, num_classes, 0.8, &mut rng);
    Ok(Dataset {
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        features,
        labels,
        num_classes,
        train_pool,
        test,
    })
}

fn normalize_features(
    data: &mut [f64],
    n: usize,
    dim: usize,
    normalization: Normalization,
    byte_scale: bool,
) {
    match normalization {
        Normalization::ZeroOne => {
            if byte_scale {
                data.iter_mut().for_each(|v| *v /= 255.0);
            }
        }
        Normalization::Standardize => {
            for j in 0..dim {
                let mut mean = 0.0;
                for i in 0..n {
                    mean += data[i * dim + j];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for i in 0..n {
                    let d = data[i * dim + j] - mean;
                    var += d * d;
                }
                let sd = (var / n as f64).sqrt().max(1e-12);
                for i in 0..n {
                    data[i * dim + j] = (data[i * dim + j] - mean) / sd;
                }
            }
        }
    }
}

/// Load `label,feature...` CSV rows. Labels must be below `num_classes`.
pub fn load_csv(path: &Path, num_classes: usize, split_seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| AlktError::parse(format!("line {}: bad label", lineno + 1)))?;
        if label >= num_classes {
            return Err(AlktError::parse(format!(
                "line {}: label {label} out of range for {num_classes} classes",
                lineno + 1
            )));
        }
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| AlktError::parse(format!("line {}: bad feature value", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(AlktError::parse(format!(
                    "line {}: expected {d} features, got {}",
                    lineno + 1,
                    feats.len()
                )));
            }
            _ => {}
        }
        labels.push(label);
        data.extend(feats);
    }
    let dim = dim.ok_or_else(|| AlktError::parse("empty CSV file"))?;
    let n = labels.len();
    let features = Tensor::new(vec![n, dim], data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let (train_pool, test) = stratified_split(&labels, num_classes, 0.8, &mut rng);
    Ok(Dataset {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        features,
        labels,
        num_classes,
        train_pool,
        test,
    })
}

/// Write a dataset back out as `label,feature...` rows (flattened features).
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let inner: usize = dataset.features.shape()[1..].iter().product();
    for i in 0..dataset.len() {
        write!(f, "{}", dataset.labels[i])?;
        for v in &dataset.features.data()[i * inner..(i + 1) * inner] {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_sizes_and_split() {
        let d = make_blobs(&[500; 4], 2, 0.5, 1).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.train_pool.len(), 1600);
        assert_eq!(d.test.len(), 400);
        assert_eq!(d.class_counts(), vec![500; 4]);
        // splits disjoint
        for i in &d.train_pool {
            assert!(d.test.binary_search(i).is_err());
        }
    }

    #[test]
    fn blobs_deterministic_in_seed() {
        let a = make_blobs(&[50; 3], 2, 0.3, 9).unwrap();
        let b = make_blobs(&[50; 3], 2, 0.3, 9).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        assert_eq!(a.train_pool, b.train_pool);
    }

    #[test]
    fn blobs_uneven_class_counts() {
        let d = make_blobs(&[800, 80], 2, 0.2, 2).unwrap();
        assert_eq!(d.class_counts(), vec![800, 80]);
    }

    #[test]
    fn tight_blobs_nearest_centroid_perfect() {
        let d = make_blobs(&[100; 3], 2, 1e-6, 4).unwrap();
        let centers: Vec<Vec<f64>> = (0..3).map(|c| blob_center(c, 3, 2)).collect();
        for &i in &d.test {
            let x = &d.features().data()[i * 2..(i + 1) * 2];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let dd: f64 = x.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum();
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assert_eq!(best, d.oracle_label(i));
        }
    }

    #[test]
    fn blob_centers_pairwise_distinct() {
        for classes in 2..8 {
            for dims in [1, 2, 5] {
                let centers: Vec<Vec<f64>> =
                    (0..classes).map(|c| blob_center(c, classes, dims)).collect();
                for i in 0..classes {
                    for j in i + 1..classes {
                        assert_ne!(centers[i], centers[j], "{classes} classes, {dims} dims");
                    }
                }
            }
        }
    }

    #[test]
    fn imbalanced_identity_and_subsample() {
        let base = make_blobs(&[100, 100], 2, 0.3, 5).unwrap();
        let same = make_imbalanced(&base, &[1.0, 1.0], 0).unwrap();
        assert_eq!(same.class_counts(), vec![100, 100]);

        let half = make_imbalanced(&base, &[1.0, 0.5], 0).unwrap();
        assert_eq!(half.class_counts(), vec![100, 50]);

        assert!(make_imbalanced(&base, &[1.0, 0.001], 0).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lab = dir.path().join("labels.idx");
        let (n, h, w) = (10usize, 4usize, 4usize);
        let mut bytes = Vec::new();
        bytes.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend((n as u32).to_be_bytes());
        bytes.extend((h as u32).to_be_bytes());
        bytes.extend((w as u32).to_be_bytes());
        bytes.extend((0..n * h * w).map(|i| (i % 256) as u8));
        std::fs::write(&img, &bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lbytes.extend((n as u32).to_be_bytes());
        lbytes.extend((0..n).map(|i| (i % 3) as u8));
        std::fs::write(&lab, &lbytes).unwrap();

        let d = load_idx(&img, &lab, Normalization::ZeroOne, 0).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(&d.features().shape()[1..], &[1, 4, 4]);
        assert!((d.features().data()[1] - 1.0 / 255.0).abs() < 1e-15);

        // corrupt the magic
        let mut bad = bytes.clone();
        bad[3] = 0x07;
        std::fs::write(&img, &bad).unwrap();
        let err = load_idx(&img, &lab, Normalization::ZeroOne, 0).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let base = make_blobs(&[20, 20], 3, 0.4, 8).unwrap();
        write_csv(&base, &path).unwrap();
        let loaded = load_csv(&path, 2, 0).unwrap();
        assert_eq!(loaded.len(), base.len());
        for (a, b) in loaded.features().data().iter().zip(base.features().data()) {
            assert!((a - b).abs() < 1e-12);
        }

        std::fs::write(&path, "0,1.0,2.0\n5,1.0,2.0\n").unwrap();
        let err = load_csv(&path, 2, 0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn checksum_stable_and_sensitive() {
        let a = make_blobs(&[10, 10], 2, 0.3, 1).unwrap();
        let b = make_blobs(&[10, 10], 2, 0.3, 1).unwrap();
        let c = make_blobs(&[10, 10], 2, 0.3, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
