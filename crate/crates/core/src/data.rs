//! Dataset loading: MNIST IDX and CIFAR binary formats, bit-exact, plus
//! seeded synthetic hierarchies for desk-scale runs. Pixels normalize to
//! [0, 1] by dividing by 255.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::LabelTree;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR100_RECORD: usize = 3074;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub name: String,
    pub class_names: Vec<String>,
    /// (source, sha256 hex) per input file or generator descriptor.
    pub checksums: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// [N, C, H, W] in [0, 1].
    pub images: Tensor<T>,
    pub fine_labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    /// (C, H, W) of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, index: usize) -> &[T] {
        let stride: usize = self.sample_shape().iter().product();
        &self.images.data()[index * stride..(index + 1) * stride]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.fine_labels[i]);
        }
        Dataset {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sized"),
            fine_labels: labels,
            meta: self.meta.clone(),
        }
    }

    pub fn truncated(&self, limit: usize) -> Dataset<T> {
        if limit >= self.len() {
            return self.clone();
        }
        let indices: Vec<usize> = (0..limit).collect();
        self.subset(&indices)
    }

    /// Seeded shuffle-split; `held_out` is the fraction in the second part.
    pub fn split(&self, held_out: f64, seed: u64) -> (Dataset<T>, Dataset<T>) {
        let n = self.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let cut = n - ((n as f64) * held_out).round() as usize;
        (self.subset(&indices[..cut]), self.subset(&indices[cut..]))
    }

    /// Every label must map into the bound tree's leaves.
    pub fn validate_against(&self, tree: &LabelTree) -> Result<()> {
        let c = tree.leaf_count();
        for &label in &self.fine_labels {
            if label >= c {
                return Err(Error::LabelRange { label, limit: c });
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn read_be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parse IDX image/label pairs (big-endian headers, magic 0x803 / 0x801).
pub fn load_mnist<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    if img_bytes.len() < 16 {
        return Err(Error::DataFormat(format!(
            "{}: truncated IDX header",
            images_path.display()
        )));
    }
    let magic = read_be_u32(&img_bytes, 0);
    if magic != MNIST_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: wrong magic 0x{magic:08x}, expected 0x{MNIST_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let n = read_be_u32(&img_bytes, 4) as usize;
    let rows = read_be_u32(&img_bytes, 8) as usize;
    let cols = read_be_u32(&img_bytes, 12) as usize;
    if img_bytes.len() != 16 + n * rows * cols {
        return Err(Error::DataFormat(format!(
            "{}: payload length {} disagrees with declared {}x{}x{}",
            images_path.display(),
            img_bytes.len() - 16,
            n,
            rows,
            cols
        )));
    }

    if lbl_bytes.len() < 8 {
        return Err(Error::DataFormat(format!(
            "{}: truncated IDX header",
            labels_path.display()
        )));
    }
    let lmagic = read_be_u32(&lbl_bytes, 0);
    if lmagic != MNIST_LABELS_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: wrong magic 0x{lmagic:08x}, expected 0x{MNIST_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let ln = read_be_u32(&lbl_bytes, 4) as usize;
    if lbl_bytes.len() != 8 + ln {
        return Err(Error::DataFormat(format!(
            "{}: payload length {} disagrees with declared count {}",
            labels_path.display(),
            lbl_bytes.len() - 8,
            ln
        )));
    }
    if n != ln {
        return Err(Error::DataFormat(format!(
            "image count {n} != label count {ln}"
        )));
    }

    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = img_bytes[16..]
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();
    let fine_labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, rows, cols], data)?,
        fine_labels,
        meta: DatasetMeta {
            name: "mnist".into(),
            class_names: (0..10).map(|d| d.to_string()).collect(),
            checksums: vec![
                (images_path.display().to_string(), sha256_hex(&img_bytes)),
                (labels_path.display().to_string(), sha256_hex(&lbl_bytes)),
            ],
        },
    })
}

const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Parse CIFAR-10 binary batches: 1 label byte + 3072 channel-planar pixel
/// bytes per record.
pub fn load_cifar10<T: Scalar>(batch_paths: &[PathBuf]) -> Result<Dataset<T>> {
    if batch_paths.is_empty() {
        return Err(Error::DataFormat("no CIFAR-10 batch files given".into()));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let mut data: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut checksums = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
            return Err(Error::DataFormat(format!(
                "{}: length {} is not a multiple of the {CIFAR10_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR10_RECORD) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(Error::DataFormat(format!(
                    "{}: label {label} > 9",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| T::from_f64(b as f64) * scale));
        }
        checksums.push((path.display().to_string(), sha256_hex(&bytes)));
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        fine_labels: labels,
        meta: DatasetMeta {
            name: "cifar10".into(),
            class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
            checksums,
        },
    })
}

/// Outcome of checking stored coarse bytes against the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseCheck {
    /// Whether the tree declared a dataset coarse level at all.
    pub declared: bool,
    pub records: usize,
    pub mismatches: usize,
}

impl CoarseCheck {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.declared {
            out.push(
                "tree declares no dataset-coarse-level mapping; stored coarse bytes ignored"
                    .to_string(),
            );
        } else if self.mismatches > 0 {
            out.push(format!(
                "{} of {} records have a stored coarse byte that contradicts the tree",
                self.mismatches, self.records
            ));
        }
        out
    }
}

/// Parse CIFAR-100 binary: coarse byte + fine byte + 3072 pixel bytes per
/// record. Fine labels bind to the tree's leaves; stored coarse bytes are
/// cross-checked against the declared tree level, or ignored with a warning
/// when the tree declares none.
pub fn load_cifar100<T: Scalar>(
    path: impl AsRef<Path>,
    tree: &LabelTree,
) -> Result<(Dataset<T>, CoarseCheck)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR100_RECORD != 0 {
        return Err(Error::DataFormat(format!(
            "{}: length {} is not a multiple of the {CIFAR100_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let leaves = tree.leaf_count();
    let scale = T::from_f64(1.0 / 255.0);
    let mut data: Vec<T> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let coarse_level = tree.coarse_level();
    let mut mismatches = 0usize;
    for record in bytes.chunks_exact(CIFAR100_RECORD) {
        let coarse = record[0] as usize;
        let fine = record[1] as usize;
        if fine >= 100 {
            return Err(Error::DataFormat(format!(
                "{}: fine label {fine} >= 100",
                path.display()
            )));
        }
        if fine >= leaves {
            return Err(Error::LabelRange {
                label: fine,
                limit: leaves,
            });
        }
        if let Some(level) = coarse_level {
            let ancestors = tree.labels_for_leaf(fine)?;
            if ancestors.per_level[level - 1] != coarse {
                mismatches += 1;
            }
        }
        labels.push(fine);
        data.extend(record[2..].iter().map(|&b| T::from_f64(b as f64) * scale));
    }
    let n = labels.len();
    let check = CoarseCheck {
        declared: coarse_level.is_some(),
        records: n,
        mismatches,
    };
    let class_names = (0..leaves)
        .map(|i| tree.leaf_name(i).map(|s| s.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
            fine_labels: labels,
            meta: DatasetMeta {
                name: "cifar100".into(),
                class_names,
                checksums: vec![(path.display().to_string(), sha256_hex(&bytes))],
            },
        },
        check,
    ))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded hierarchical Gaussian blobs: every tree node adds a node-specific
/// pattern on top of its parent's, so leaves under one parent share most of
/// their appearance and level-1 classes are linearly separable from raw
/// pixels. Pixels are clamped to [0, 1].
pub fn make_synthetic<T: Scalar>(
    tree: &LabelTree,
    n_per_leaf: usize,
    image_shape: [usize; 3],
    seed: u64,
) -> Dataset<T> {
    let [c, h, w] = image_shape;
    let pixels = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Node patterns, drawn in node order so the layout is seed-stable.
    let mut patterns: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes().len()];
    for node in tree.nodes() {
        let mut pattern = match node.parent {
            Some(p) => patterns[p].clone(),
            None => vec![0.0; pixels],
        };
        if node.level > 0 {
            let amp = (0.20 * 0.6f64.powi(node.level as i32 - 1)).max(0.08);
            for v in pattern.iter_mut() {
                *v += amp * gauss(&mut rng);
            }
        }
        patterns[node.id] = pattern;
    }

    let leaves = tree.leaf_count();
    let n = leaves * n_per_leaf;
    let mut data: Vec<T> = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for fine in 0..leaves {
        let leaf = tree.leaf_id(fine).expect("fine < leaves");
        let pattern = &patterns[leaf];
        for _ in 0..n_per_leaf {
            for &p in pattern {
                let v = (0.5 + p + 0.08 * gauss(&mut rng)).clamp(0.0, 1.0);
                data.push(T::from_f64(v));
            }
            labels.push(fine);
        }
    }

    let descriptor = format!(
        "synthetic(tree={},n_per_leaf={n_per_leaf},shape={c}x{h}x{w},seed={seed})",
        sha256_hex(tree.serialize().as_bytes())
    );
    let class_names = (0..leaves)
        .map(|i| tree.leaf_name(i).map(|s| s.to_string()).unwrap_or_default())
        .collect();
    Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data).expect("sized"),
        fine_labels: labels,
        meta: DatasetMeta {
            name: "synthetic".into(),
            class_names,
            checksums: vec![(descriptor.clone(), sha256_hex(descriptor.as_bytes()))],
        },
    }
}
