//! Dataset loading and anomaly-detection protocol splits.
//!
//! Two families of data are supported:
//!
//! - **MNIST-format IDX files** read from a dataset root directory (no
//!   network access; missing files produce an actionable message).
//! - **Synthetic generators** — jittered filled circles vs squares, and
//!   uniform-noise images — that need no files at all and keep the full
//!   pipeline runnable in CI.
//!
//! [`load_protocol`] turns a [`ProtocolSpec`] into training images (normals
//! only — the training API never sees test labels) plus a labeled test set
//! with anomaly = 1.

use crate::augment::resize_bilinear;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::{child_seed, stream_rng};
use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Environment variable overriding the dataset root directory.
pub const DATA_ROOT_ENV: &str = "ROBAD_DATA_ROOT";

/// Default dataset root, relative to the working directory.
pub const DEFAULT_DATA_ROOT: &str = "data";

/// Which anomaly-detection protocol to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// One class of one dataset is normal; every other class is anomalous.
    OneClass,
    /// One dataset (all classes, label-free) is normal; a second dataset
    /// supplies the anomalies.
    MultiClass,
}

/// Declarative description of a data protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Normal-side dataset: "mnist", "shapes", or "noise".
    pub dataset: String,
    /// Normal class for the one-class protocol.
    pub class_id: usize,
    /// Anomaly-side dataset for the multi-class protocol.
    pub out_dataset: String,
    /// Square image resolution; datasets at other native sizes are
    /// bilinearly resized.
    pub resolution: usize,
    /// Output channel count; grayscale sources are replicated.
    pub channels: usize,
    /// Seed for subset selection and synthetic generation.
    pub seed: u64,
    /// Cap on training normals (None = all available).
    pub train_limit: Option<usize>,
    /// Cap on normal test samples.
    pub test_normal_limit: Option<usize>,
    /// Cap on anomalous test samples.
    pub test_anomaly_limit: Option<usize>,
    /// Dataset root directory; falls back to `ROBAD_DATA_ROOT`, then
    /// `data/`.
    pub root: Option<PathBuf>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::OneClass,
            dataset: "shapes".into(),
            class_id: 0,
            out_dataset: "noise".into(),
            resolution: 28,
            channels: 1,
            seed: 0,
            train_limit: None,
            test_normal_limit: None,
            test_anomaly_limit: None,
            root: None,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if ![28, 32, 64].contains(&self.resolution) {
            return Err(Error::InvalidArgument(format!(
                "resolution must be 28, 32 or 64 (got {})",
                self.resolution
            )));
        }
        if self.channels == 0 || self.channels > 4 {
            return Err(Error::InvalidArgument(format!(
                "channels must be in 1..=4 (got {})",
                self.channels
            )));
        }
        match self.dataset.as_str() {
            "mnist" => {
                if self.kind == ProtocolKind::OneClass && self.class_id > 9 {
                    return Err(Error::InvalidArgument(format!(
                        "mnist class_id must be 0..=9 (got {})",
                        self.class_id
                    )));
                }
            }
            "shapes" => {
                if self.kind == ProtocolKind::OneClass && self.class_id > 1 {
                    return Err(Error::InvalidArgument(format!(
                        "shapes class_id must be 0 (circle) or 1 (square), got {}",
                        self.class_id
                    )));
                }
            }
            "noise" => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown dataset '{other}' (expected mnist, shapes or noise)"
                )));
            }
        }
        if self.kind == ProtocolKind::MultiClass
            && !["mnist", "shapes", "noise"].contains(&self.out_dataset.as_str())
        {
            return Err(Error::InvalidArgument(format!(
                "unknown out_dataset '{}'",
                self.out_dataset
            )));
        }
        Ok(())
    }

    /// Effective dataset root: explicit field, else env var, else `data/`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(root) = &self.root {
            return root.clone();
        }
        if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
            if !env_root.is_empty() {
                return PathBuf::from(env_root);
            }
        }
        PathBuf::from(DEFAULT_DATA_ROOT)
    }
}

/// A fully assembled protocol: unlabeled training normals and a labeled
/// test set.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub train: ImageBatch,
    pub test: ImageBatch,
    /// 0 = normal, 1 = anomaly; aligned with `test`.
    pub test_labels: Vec<u8>,
}

impl ProtocolData {
    /// Fraction of the test set labeled anomalous.
    pub fn anomaly_fraction(&self) -> f64 {
        let pos = self.test_labels.iter().filter(|&&l| l == 1).count();
        pos as f64 / self.test_labels.len().max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// IDX readers
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn open_idx(path_gz: &Path) -> Result<Vec<u8>> {
    // Prefer the gzipped file; accept an already-unpacked sibling.
    let plain = path_gz.with_extension("");
    let raw = if path_gz.is_file() {
        let file = std::fs::File::open(path_gz)?;
        let mut decoder = flate2::read::GzDecoder::new(file);
        let mut buf = Vec::new();
        decoder.read_to_end(&mut buf).map_err(|e| {
            Error::DataFormat(format!("{}: not a gzip stream ({e})", path_gz.display()))
        })?;
        buf
    } else if plain.is_file() {
        std::fs::read(&plain)?
    } else {
        return Err(Error::MissingInput(format!(
            "dataset file {} not found. Download the four MNIST IDX archives \
             (train-images-idx3-ubyte.gz, train-labels-idx1-ubyte.gz, \
             t10k-images-idx3-ubyte.gz, t10k-labels-idx1-ubyte.gz) into \
             <root>/mnist/, or set {DATA_ROOT_ENV} to a directory that \
             contains them",
            path_gz.display()
        )));
    };
    Ok(raw)
}

fn read_idx_images(path: &Path) -> Result<Vec<Array3<f64>>> {
    let raw = open_idx(path)?;
    let mut cursor = std::io::Cursor::new(&raw);
    let magic = cursor.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad image magic {magic}",
            path.display()
        )));
    }
    let n = cursor.read_u32::<BigEndian>()? as usize;
    let h = cursor.read_u32::<BigEndian>()? as usize;
    let w = cursor.read_u32::<BigEndian>()? as usize;
    let body = &raw[16..];
    if body.len() != n * h * w {
        return Err(Error::DataFormat(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            body.len(),
            n * h * w
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let slice = &body[i * h * w..(i + 1) * h * w];
        let img = Array3::from_shape_vec(
            (1, h, w),
            slice.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("image shape agrees with byte count");
        out.push(img);
    }
    Ok(out)
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let raw = open_idx(path)?;
    let mut cursor = std::io::Cursor::new(&raw);
    let magic = cursor.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad label magic {magic}",
            path.display()
        )));
    }
    let n = cursor.read_u32::<BigEndian>()? as usize;
    let body = &raw[8..];
    if body.len() != n {
        return Err(Error::DataFormat(format!(
            "{}: payload is {} labels, expected {n}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// A labeled image collection straight from disk or a generator.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<u8>,
}

/// Load one MNIST split (images + labels) from `<root>/mnist/`.
pub fn load_mnist_split(root: &Path, train: bool) -> Result<RawDataset> {
    let dir = root.join("mnist");
    let (img_name, lbl_name) = if train {
        ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")
    } else {
        ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")
    };
    let images = read_idx_images(&dir.join(img_name))?;
    let labels = read_idx_labels(&dir.join(lbl_name))?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "mnist {}: {} images vs {} labels",
            if train { "train" } else { "test" },
            images.len(),
            labels.len()
        )));
    }
    Ok(RawDataset { images, labels })
}

// ---------------------------------------------------------------------------
// synthetic generators
// ---------------------------------------------------------------------------

fn shape_image(resolution: usize, square: bool, rng: &mut impl Rng) -> Array3<f64> {
    let res = resolution as f64;
    // Jittered center and scale; soft edge for the circle so the classes
    // differ in geometry, not aliasing artifacts.
    let cx = res * rng.gen_range(0.40..0.60);
    let cy = res * rng.gen_range(0.40..0.60);
    let r = res * rng.gen_range(0.18..0.32);
    let fg = rng.gen_range(0.75..0.95);
    let bg = rng.gen_range(0.02..0.10);

    let mut img = Array3::from_elem((1, resolution, resolution), bg);
    for y in 0..resolution {
        for x in 0..resolution {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let inside = if square {
                dy.abs() <= r && dx.abs() <= r
            } else {
                (dy * dy + dx * dx).sqrt() <= r
            };
            if inside {
                img[[0, y, x]] = fg;
            }
        }
    }
    img
}

/// Balanced two-class synthetic dataset: label 0 = filled circle,
/// label 1 = filled square, both with jittered position, scale and
/// intensity.  Deterministic in `seed`.
pub fn make_synthetic_shapes(n: usize, resolution: usize, seed: u64) -> Result<RawDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic shapes need n >= 2 (got {n})"
        )));
    }
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic shapes need resolution >= 8 (got {resolution})"
        )));
    }
    let half = n / 2;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let square = i >= half;
        let mut rng = stream_rng(seed, "shape_image", &[i as u64]);
        images.push(shape_image(resolution, square, &mut rng));
        labels.push(u8::from(square));
    }
    Ok(RawDataset { images, labels })
}

/// Uniform-noise images in [0,1]; deterministic in `seed`.
pub fn make_noise_images(n: usize, resolution: usize, seed: u64) -> Result<Vec<Array3<f64>>> {
    if n == 0 {
        return Err(Error::EmptyBatch("noise images".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, "noise_image", &[i as u64]);
        out.push(Array3::from_shape_fn(
            (1, resolution, resolution),
            |_| rng.gen_range(0.0..1.0),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// protocol assembly
// ---------------------------------------------------------------------------

/// Resize (if needed) and expand channels, then pack into a batch.
fn pack(images: Vec<Array3<f64>>, spec: &ProtocolSpec) -> Result<ImageBatch> {
    if images.is_empty() {
        return Err(Error::EmptyBatch("protocol split".into()));
    }
    let target = spec.resolution;
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let (c, h, w) = img.dim();
        let resized = if h == target && w == target {
            img
        } else {
            resize_bilinear(&img, target, target)
        };
        let expanded = if c == spec.channels {
            resized
        } else if c == 1 {
            let mut e = Array3::zeros((spec.channels, target, target));
            for ch in 0..spec.channels {
                e.index_axis_mut(ndarray::Axis(0), ch)
                    .assign(&resized.index_axis(ndarray::Axis(0), 0));
            }
            e
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot expand {c}-channel image to {} channels",
                spec.channels
            )));
        };
        out.push(expanded);
    }
    // Resampling can overshoot [0,1] marginally at sharp edges; clamp.
    let n = out.len();
    let mut arr = Array4::zeros((n, spec.channels, target, target));
    for (i, img) in out.into_iter().enumerate() {
        arr.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    ImageBatch::from_clamped(arr)
}

/// Seeded subset of `indices`, capped at `limit`.
fn subset(mut indices: Vec<usize>, limit: Option<usize>, seed: u64, stream: &str) -> Vec<usize> {
    if let Some(cap) = limit {
        if cap < indices.len() {
            let mut rng = stream_rng(seed, stream, &[]);
            indices.shuffle(&mut rng);
            indices.truncate(cap);
            indices.sort_unstable();
        }
    }
    indices
}

fn gather(images: &[Array3<f64>], indices: &[usize]) -> Vec<Array3<f64>> {
    indices.iter().map(|&i| images[i].clone()).collect()
}

/// Assemble the train/test splits described by `spec`.
///
/// Training data contains only normal samples and carries no labels; test
/// labels use 1 for anomalies.
pub fn load_protocol(spec: &ProtocolSpec) -> Result<ProtocolData> {
    spec.validate()?;
    match (spec.kind, spec.dataset.as_str()) {
        (ProtocolKind::OneClass, "mnist") => one_class_mnist(spec),
        (ProtocolKind::OneClass, "shapes") => one_class_shapes(spec),
        (ProtocolKind::OneClass, other) => Err(Error::InvalidArgument(format!(
            "one_class protocol not defined for dataset '{other}'"
        ))),
        (ProtocolKind::MultiClass, _) => multi_class(spec),
    }
}

fn one_class_mnist(spec: &ProtocolSpec) -> Result<ProtocolData> {
    let root = spec.data_root();
    let train_raw = load_mnist_split(&root, true)?;
    let test_raw = load_mnist_split(&root, false)?;
    let class = spec.class_id as u8;

    let train_idx: Vec<usize> = (0..train_raw.labels.len())
        .filter(|&i| train_raw.labels[i] == class)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training samples for mnist class {class}"
        )));
    }
    let train_idx = subset(train_idx, spec.train_limit, spec.seed, "train_subset");

    let normal_idx: Vec<usize> = (0..test_raw.labels.len())
        .filter(|&i| test_raw.labels[i] == class)
        .collect();
    let anomaly_idx: Vec<usize> = (0..test_raw.labels.len())
        .filter(|&i| test_raw.labels[i] != class)
        .collect();
    let normal_idx = subset(
        normal_idx,
        spec.test_normal_limit,
        spec.seed,
        "test_normal_subset",
    );
    let anomaly_idx = subset(
        anomaly_idx,
        spec.test_anomaly_limit,
        spec.seed,
        "test_anomaly_subset",
    );

    let mut test_images = gather(&test_raw.images, &normal_idx);
    test_images.extend(gather(&test_raw.images, &anomaly_idx));
    let mut test_labels = vec![0u8; normal_idx.len()];
    test_labels.extend(std::iter::repeat_n(1u8, anomaly_idx.len()));

    Ok(ProtocolData {
        train: pack(gather(&train_raw.images, &train_idx), spec)?,
        test: pack(test_images, spec)?,
        test_labels,
    })
}

fn one_class_shapes(spec: &ProtocolSpec) -> Result<ProtocolData> {
    let n_train = spec.train_limit.unwrap_or(400);
    let n_test_norm = spec.test_normal_limit.unwrap_or(100);
    let n_test_anom = spec.test_anomaly_limit.unwrap_or(100);
    // One generator pool per class; train and test draw disjoint index
    // ranges from it.
    let normal_count = n_train + n_test_norm;
    let pool = make_synthetic_shapes(2 * normal_count.max(n_test_anom), spec.resolution, spec.seed)?;
    let (circles, squares): (Vec<_>, Vec<_>) = pool
        .images
        .into_iter()
        .zip(&pool.labels)
        .partition(|(_, &l)| l == 0);
    let mut normals: Vec<Array3<f64>> = circles.into_iter().map(|(img, _)| img).collect();
    let mut anomalies: Vec<Array3<f64>> = squares.into_iter().map(|(img, _)| img).collect();
    if spec.class_id == 1 {
        std::mem::swap(&mut normals, &mut anomalies);
    }
    if normals.len() < normal_count || anomalies.len() < n_test_anom {
        return Err(Error::InvalidArgument(
            "synthetic pool smaller than requested splits".into(),
        ));
    }

    let train: Vec<_> = normals[..n_train].to_vec();
    let mut test: Vec<_> = normals[n_train..normal_count].to_vec();
    test.extend(anomalies[..n_test_anom].to_vec());
    let mut test_labels = vec![0u8; n_test_norm];
    test_labels.extend(std::iter::repeat_n(1u8, n_test_anom));

    Ok(ProtocolData {
        train: pack(train, spec)?,
        test: pack(test, spec)?,
        test_labels,
    })
}

fn multi_class(spec: &ProtocolSpec) -> Result<ProtocolData> {
    // Normal side: every class of the in-distribution dataset, label-free.
    let (train_in, test_in) = match spec.dataset.as_str() {
        "mnist" => {
            let root = spec.data_root();
            let tr = load_mnist_split(&root, true)?;
            let te = load_mnist_split(&root, false)?;
            (tr.images, te.images)
        }
        "shapes" => {
            let n_train = spec.train_limit.unwrap_or(400);
            let n_test = spec.test_normal_limit.unwrap_or(100);
            let pool = make_synthetic_shapes(n_train + n_test, spec.resolution, spec.seed)?;
            let test = pool.images[n_train..].to_vec();
            let mut train = pool.images;
            train.truncate(n_train);
            (train, test)
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "multi_class protocol not defined for in-dataset '{other}'"
            )));
        }
    };

    let train_idx = subset(
        (0..train_in.len()).collect(),
        spec.train_limit,
        spec.seed,
        "train_subset",
    );
    let normal_idx = subset(
        (0..test_in.len()).collect(),
        spec.test_normal_limit,
        spec.seed,
        "test_normal_subset",
    );

    // Anomaly side.
    let n_anom = spec.test_anomaly_limit.unwrap_or(normal_idx.len());
    let anomalies: Vec<Array3<f64>> = match spec.out_dataset.as_str() {
        "noise" => make_noise_images(n_anom, spec.resolution, child_seed(spec.seed, "out_dataset"))?,
        "shapes" => {
            let pool = make_synthetic_shapes(2 * n_anom, spec.resolution, child_seed(spec.seed, "out_dataset"))?;
            // Squares only, so the anomaly set is visually coherent.
            pool.images
                .into_iter()
                .zip(&pool.labels)
                .filter(|(_, &l)| l == 1)
                .map(|(img, _)| img)
                .take(n_anom)
                .collect()
        }
        "mnist" => {
            let root = spec.data_root();
            let te = load_mnist_split(&root, false)?;
            let idx = subset(
                (0..te.images.len()).collect(),
                Some(n_anom),
                spec.seed,
                "test_anomaly_subset",
            );
            gather(&te.images, &idx)
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "multi_class protocol not defined for out-dataset '{other}'"
            )));
        }
    };

    let mut test_images = gather(&test_in, &normal_idx);
    let n_norm = test_images.len();
    test_images.extend(anomalies);
    let mut test_labels = vec![0u8; n_norm];
    test_labels.extend(std::iter::repeat_n(1u8, test_images.len() - n_norm));

    Ok(ProtocolData {
        train: pack(gather(&train_in, &train_idx), spec)?,
        test: pack(test_images, spec)?,
        test_labels,
    })
}
