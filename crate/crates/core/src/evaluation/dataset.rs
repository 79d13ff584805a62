//! Desk-scale datasets for the built-in trainer: CSV (label, pixels...),
//! IDX image/label pairs, and a generated two-class separable image set.

use crate::genome::TensorShape;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
}

/// One labelled image, pixels flattened as depth-major `[c][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pixels: Vec<f64>,
    pub label: u32,
}

/// A train/validation split with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub input_shape: TensorShape,
    pub num_classes: u32,
}

impl Dataset {
    /// Verify every example matches the shape metadata.
    pub fn check(&self) -> Result<(), DatasetError> {
        if self.num_classes < 2 {
            return Err(DatasetError::Inconsistent("need at least two classes".into()));
        }
        if self.train.is_empty() || self.val.is_empty() {
            return Err(DatasetError::Inconsistent(
                "both train and validation splits must be non-empty".into(),
            ));
        }
        let len = (self.input_shape.depth * self.input_shape.width * self.input_shape.height)
            as usize;
        for (split, examples) in [("train", &self.train), ("val", &self.val)] {
            for (i, ex) in examples.iter().enumerate() {
                if ex.pixels.len() != len {
                    return Err(DatasetError::Inconsistent(format!(
                        "{split} example {i} has {} pixels, expected {len}",
                        ex.pixels.len()
                    )));
                }
                if ex.label >= self.num_classes {
                    return Err(DatasetError::Inconsistent(format!(
                        "{split} example {i} label {} >= {} classes",
                        ex.label, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Declarative dataset selection, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Rows of `label, pixel, pixel, ...`; pixels are divided by
    /// `pixel_scale`. Every `val_every`-th example goes to validation.
    Csv {
        path: PathBuf,
        depth: u32,
        width: u32,
        height: u32,
        num_classes: u32,
        #[serde(default = "default_pixel_scale")]
        pixel_scale: f64,
        #[serde(default = "default_val_every")]
        val_every: usize,
    },
    /// Two classes of images separated by mean intensity (0.3 vs 0.7 with
    /// +-0.1 uniform pixel noise): linearly separable from global average
    /// pooling by construction.
    SyntheticTwoClass {
        n_train: usize,
        n_val: usize,
        depth: u32,
        width: u32,
        height: u32,
        seed: u64,
    },
    /// IDX image/label file pairs (big-endian, magic 0x00000803 for images
    /// and 0x00000801 for labels). Without explicit validation files, every
    /// `val_every`-th training example is held out.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        val_images: Option<PathBuf>,
        #[serde(default)]
        val_labels: Option<PathBuf>,
        #[serde(default = "default_val_every")]
        val_every: usize,
        #[serde(default)]
        num_classes: Option<u32>,
    },
}

fn default_pixel_scale() -> f64 {
    1.0
}

fn default_val_every() -> usize {
    5
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset, DatasetError> {
        let dataset = match self {
            DatasetSpec::Csv {
                path,
                depth,
                width,
                height,
                num_classes,
                pixel_scale,
                val_every,
            } => {
                let shape = TensorShape::new(*depth, *width, *height);
                let examples = load_csv(path, shape, *pixel_scale)?;
                let (train, val) = split_every(examples, *val_every);
                Dataset { train, val, input_shape: shape, num_classes: *num_classes }
            }
            DatasetSpec::SyntheticTwoClass { n_train, n_val, depth, width, height, seed } => {
                synthetic_two_class(
                    *n_train,
                    *n_val,
                    TensorShape::new(*depth, *width, *height),
                    *seed,
                )
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
                val_every,
                num_classes,
            } => {
                let (train, shape) = load_idx_pair(train_images, train_labels)?;
                let (train, val) = match (val_images, val_labels) {
                    (Some(vi), Some(vl)) => {
                        let (val, val_shape) = load_idx_pair(vi, vl)?;
                        if val_shape != shape {
                            return Err(DatasetError::Inconsistent(format!(
                                "validation shape {val_shape} differs from training shape {shape}"
                            )));
                        }
                        (train, val)
                    }
                    (None, None) => split_every(train, *val_every),
                    _ => {
                        return Err(DatasetError::Inconsistent(
                            "val_images and val_labels must be given together".into(),
                        ))
                    }
                };
                let max_label = train.iter().chain(&val).map(|e| e.label).max().unwrap_or(0);
                Dataset {
                    train,
                    val,
                    input_shape: shape,
                    num_classes: num_classes.unwrap_or(max_label + 1),
                }
            }
        };
        dataset.check()?;
        Ok(dataset)
    }
}

/// Deterministic split: indices 0, k, 2k, ... go to validation.
fn split_every(examples: Vec<Example>, val_every: usize) -> (Vec<Example>, Vec<Example>) {
    let k = val_every.max(2);
    let mut train = Vec::with_capacity(examples.len());
    let mut val = Vec::with_capacity(examples.len() / k + 1);
    for (i, ex) in examples.into_iter().enumerate() {
        if i % k == 0 {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, val)
}

fn load_csv(path: &Path, shape: TensorShape, pixel_scale: f64) -> Result<Vec<Example>, DatasetError> {
    if pixel_scale == 0.0 {
        return Err(DatasetError::Format("pixel_scale must be non-zero".into()));
    }
    let expected = (shape.depth * shape.width * shape.height) as usize;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::Format(e.to_string()))?;
    let mut examples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Format(e.to_string()))?;
        if record.len() != expected + 1 {
            return Err(DatasetError::Format(format!(
                "row {row}: {} fields, expected {} (label + pixels)",
                record.len(),
                expected + 1
            )));
        }
        let label: u32 = record[0]
            .parse()
            .map_err(|e| DatasetError::Format(format!("row {row}: bad label: {e}")))?;
        let mut pixels = Vec::with_capacity(expected);
        for field in record.iter().skip(1) {
            let value: f64 = field
                .parse()
                .map_err(|e| DatasetError::Format(format!("row {row}: bad pixel: {e}")))?;
            pixels.push(value / pixel_scale);
        }
        examples.push(Example { pixels, label });
    }
    Ok(examples)
}

/// Generate the two-class separable set. Class 0 images have mean 0.3 and
/// class 1 images mean 0.7, with +-0.1 uniform noise per pixel, so the
/// per-image mean never crosses the 0.5 midpoint.
pub fn synthetic_two_class(
    n_train: usize,
    n_val: usize,
    shape: TensorShape,
    seed: u64,
) -> Dataset {
    let mut rng = crate::rng::stream(seed, &[0x5359_4e54]);
    let pixel_count = (shape.depth * shape.width * shape.height) as usize;
    let mut generate = |count: usize| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let label = (i % 2) as u32;
                let mean = if label == 0 { 0.3 } else { 0.7 };
                let pixels = (0..pixel_count)
                    .map(|_| mean + rng.gen_range(-0.1..=0.1))
                    .collect();
                Example { pixels, label }
            })
            .collect()
    };
    Dataset {
        train: generate(n_train),
        val: generate(n_val),
        input_shape: shape,
        num_classes: 2,
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse an IDX image/label file pair. Pixels are scaled from [0, 255] to
/// [0, 1]; images are single-channel.
pub fn load_idx_pair(
    images_path: &Path,
    labels_path: &Path,
) -> Result<(Vec<Example>, TensorShape), DatasetError> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)?;
    let cols = read_u32_be(&mut images)?;
    if rows == 0 || cols == 0 {
        return Err(DatasetError::Format("image dimensions must be positive".into()));
    }
    let mut pixel_bytes = vec![0u8; count * (rows * cols) as usize];
    images.read_exact(&mut pixel_bytes)?;
    let mut trailing = [0u8; 1];
    if images.read(&mut trailing)? != 0 {
        return Err(DatasetError::Format("trailing bytes after image data".into()));
    }

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let label_count = read_u32_be(&mut labels)? as usize;
    if label_count != count {
        return Err(DatasetError::Inconsistent(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels.read_exact(&mut label_bytes)?;
    if labels.read(&mut trailing)? != 0 {
        return Err(DatasetError::Format("trailing bytes after label data".into()));
    }

    let stride = (rows * cols) as usize;
    let examples = label_bytes
        .into_iter()
        .enumerate()
        .map(|(i, label)| Example {
            pixels: pixel_bytes[i * stride..(i + 1) * stride]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: label as u32,
        })
        .collect();
    Ok((examples, TensorShape::new(1, cols, rows)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_set_is_separable_by_image_mean() {
        // Closed form: class means 0.3 vs 0.7 with noise bounded by 0.1,
        // so every class-0 image mean is <= 0.4 and every class-1 mean is
        // >= 0.6.
        let data = synthetic_two_class(64, 32, TensorShape::new(3, 8, 8), 5);
        data.check().unwrap();
        for ex in data.train.iter().chain(&data.val) {
            let mean: f64 = ex.pixels.iter().sum::<f64>() / ex.pixels.len() as f64;
            if ex.label == 0 {
                assert!(mean <= 0.4 + 1e-9);
            } else {
                assert!(mean >= 0.6 - 1e-9);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        let mut file = File::create(&path).unwrap();
        // 2x2 single-channel images, labels 0..2.
        for i in 0..10 {
            writeln!(file, "{},{},{},{},{}", i % 2, i, i + 1, i + 2, i + 3).unwrap();
        }
        drop(file);

        let spec = DatasetSpec::Csv {
            path,
            depth: 1,
            width: 2,
            height: 2,
            num_classes: 2,
            pixel_scale: 16.0,
            val_every: 5,
        };
        let data = spec.load().unwrap();
        assert_eq!(data.train.len(), 8);
        assert_eq!(data.val.len(), 2);
        assert!((data.train[0].pixels[0] - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn csv_rejects_wrong_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,1,2\n").unwrap();
        let spec = DatasetSpec::Csv {
            path,
            depth: 1,
            width: 2,
            height: 2,
            num_classes: 2,
            pixel_scale: 1.0,
            val_every: 5,
        };
        assert!(matches!(spec.load(), Err(DatasetError::Format(_))));
    }

    /// Hand-assembled IDX bytes, bit-exact per the standard layout.
    fn write_idx_fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let images_path = dir.join("images-idx3-ubyte");
        let labels_path = dir.join("labels-idx1-ubyte");

        let mut images: Vec<u8> = Vec::new();
        images.extend(0x0000_0803u32.to_be_bytes()); // magic
        images.extend(3u32.to_be_bytes()); // count
        images.extend(2u32.to_be_bytes()); // rows
        images.extend(2u32.to_be_bytes()); // cols
        images.extend([0, 51, 102, 153, 204, 255, 0, 255, 10, 20, 30, 40]);
        std::fs::write(&images_path, images).unwrap();

        let mut labels: Vec<u8> = Vec::new();
        labels.extend(0x0000_0801u32.to_be_bytes());
        labels.extend(3u32.to_be_bytes());
        labels.extend([0u8, 1, 2]);
        std::fs::write(&labels_path, labels).unwrap();

        (images_path, labels_path)
    }

    #[test]
    fn idx_pair_parses_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (images_path, labels_path) = write_idx_fixture(dir.path());
        let (examples, shape) = load_idx_pair(&images_path, &labels_path).unwrap();
        assert_eq!(shape, TensorShape::new(1, 2, 2));
        assert_eq!(examples.len(), 3);
        assert_eq!(examples[0].label, 0);
        assert_eq!(examples[2].label, 2);
        assert!((examples[0].pixels[1] - 51.0 / 255.0).abs() < 1e-12);
        assert_eq!(examples[1].pixels[1], 1.0);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images_path, labels_path) = write_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&images_path).unwrap();
        bytes[3] = 0x07;
        std::fs::write(&images_path, bytes).unwrap();
        assert!(matches!(
            load_idx_pair(&images_path, &labels_path),
            Err(DatasetError::Format(_))
        ));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images_path, labels_path) = write_idx_fixture(dir.path());
        let mut labels: Vec<u8> = Vec::new();
        labels.extend(0x0000_0801u32.to_be_bytes());
        labels.extend(2u32.to_be_bytes());
        labels.extend([0u8, 1]);
        std::fs::write(&labels_path, labels).unwrap();
        assert!(matches!(
            load_idx_pair(&images_path, &labels_path),
            Err(DatasetError::Inconsistent(_))
        ));
    }
}
