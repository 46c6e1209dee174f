//! Dataset ingestion, deterministic splits, and evaluation-pair sampling.
//!
//! Two sources: IDX image files (the classic big-endian digit layout) and
//! the binary tensor container shared with checkpoints (one rank-4 tensor
//! named "images", values already in [0,1]) for pre-converted corpora.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Image collection with deterministic train/validation/test membership.
/// Pixels live in [0,1]; labels are never loaded (attacks and scoring are
/// label-free).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<f64>,
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    split_seed: u64,
}

impl Dataset {
    /// Assemble a dataset from a training corpus and a separate test corpus,
    /// carving the validation split out of the training images.
    pub fn from_corpora(
        name: impl Into<String>,
        dims: (usize, usize, usize),
        train_images: Vec<f64>,
        test_images: Vec<f64>,
        split_seed: u64,
        val_fraction: f64,
    ) -> Result<Dataset> {
        let (channels, height, width) = dims;
        let pixels = channels * height * width;
        if pixels == 0 || train_images.len() % pixels != 0 || test_images.len() % pixels != 0 {
            return Err(Error::invalid("image buffers do not match the stated dims"));
        }
        if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
            return Err(Error::Config(format!(
                "validation fraction must be in (0,1), got {val_fraction}"
            )));
        }
        let n_train_source = train_images.len() / pixels;
        let n_test = test_images.len() / pixels;
        let mut images = train_images;
        images.extend_from_slice(&test_images);
        for &v in &images {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
            }
        }

        let mut order: Vec<usize> = (0..n_train_source).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        order.shuffle(&mut rng);
        let n_val = ((n_train_source as f64) * val_fraction).round() as usize;
        let validation: Vec<usize> = order[..n_val].to_vec();
        let train: Vec<usize> = order[n_val..].to_vec();
        let test: Vec<usize> = (n_train_source..n_train_source + n_test).collect();

        Ok(Dataset {
            name: name.into(),
            channels,
            height,
            width,
            images,
            train,
            validation,
            test,
            split_seed,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.validation
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    /// One flat image `[pixels]`.
    pub fn image(&self, index: usize) -> Tensor {
        let p = self.pixels();
        Tensor::new(vec![p], self.images[index * p..(index + 1) * p].to_vec())
            .expect("stored images are well-formed")
    }

    /// Stacked flat images `[len(indices), pixels]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(&self.images[i * p..(i + 1) * p]);
        }
        Tensor::new(vec![indices.len(), p], data).expect("stored images are well-formed")
    }
}

/// Load IDX image files from a directory holding `train-images-idx3-ubyte`
/// and `t10k-images-idx3-ubyte`. Pixels are scaled to [0,1] by /255.
pub fn load_mnist(dir: &Path, split_seed: u64, val_fraction: f64) -> Result<Dataset> {
    let (train, dims) = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let (test, test_dims) = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    if dims != test_dims {
        return Err(Error::invalid(format!(
            "train images are {dims:?} but test images are {test_dims:?}"
        )));
    }
    Dataset::from_corpora(
        "mnist",
        (1, dims.0, dims.1),
        train,
        test,
        split_seed,
        val_fraction,
    )
}

/// Parse one IDX image file; returns the flat [0,1] pixel buffer and
/// (rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<f64>, (usize, usize))> {
    let mut r = IdxReader::new(path)?;
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.err(format!(
            "bad IDX magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.err(format!("degenerate image dims {rows}x{cols}")));
    }
    let expected = count * rows * cols;
    let mut bytes = vec![0u8; expected];
    r.read(&mut bytes)?;
    // anything after the pixel payload is a format violation
    let mut probe = [0u8; 1];
    if r.reader.read(&mut probe)? != 0 {
        return Err(r.err(format!("trailing bytes after {expected} pixels")));
    }
    Ok((
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        (rows, cols),
    ))
}

/// Load a pre-converted corpus from the binary tensor container: one rank-4
/// tensor named "images" with dims (count, channels, height, width). The
/// test split is held out of the single corpus (20%), then the validation
/// split is carved from the remainder.
pub fn load_raw_tensor(path: &Path, split_seed: u64, val_fraction: f64) -> Result<Dataset> {
    const TEST_FRACTION: f64 = 0.2;
    let (_descriptor, mut tensors) = checkpoint::read_tensors(path)?;
    let images = tensors.remove("images").ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        message: "no tensor named `images`".into(),
    })?;
    if images.rank() != 4 {
        return Err(Error::invalid(format!(
            "images tensor has rank {}, expected 4 (count, channels, height, width)",
            images.rank()
        )));
    }
    let shape = images.shape().to_vec();
    let (count, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = images.into_data();
    for &v in &data {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
    }
    let pixels = c * h * w;
    let n_test = ((count as f64) * TEST_FRACTION).round() as usize;
    let n_train = count - n_test;
    let train = data[..n_train * pixels].to_vec();
    let test = data[n_train * pixels..].to_vec();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raw".into());
    Dataset::from_corpora(name, (c, h, w), train, test, split_seed, val_fraction)
}

/// Write a corpus in the raw tensor container format.
pub fn write_raw_tensor(path: &Path, dims: (usize, usize, usize), images: &[f64]) -> Result<()> {
    let (c, h, w) = dims;
    let pixels = c * h * w;
    if pixels == 0 || images.len() % pixels != 0 {
        return Err(Error::invalid("image buffer does not match the stated dims"));
    }
    let count = images.len() / pixels;
    let tensor = Tensor::new(vec![count, c, h, w], images.to_vec())?;
    let mut tensors = std::collections::BTreeMap::new();
    tensors.insert("images".to_string(), tensor);
    checkpoint::write_tensors(path, "raw-images", &tensors)
}

/// The fixed original/target pairs every model of a dataset is attacked on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationSet {
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Sample `count` original/target pairs from the test split without
/// replacement. Deterministic per seed; every index is distinct, so no
/// original coincides with its target.
pub fn sample_evaluation_pairs(dataset: &Dataset, seed: u64, count: usize) -> Result<EvaluationSet> {
    if count == 0 {
        return Err(Error::invalid("pair count must be positive"));
    }
    let test = dataset.test_indices();
    if test.len() < 2 * count {
        return Err(Error::invalid(format!(
            "test split has {} images, need at least {} for {count} pairs",
            test.len(),
            2 * count
        )));
    }
    let mut order = test.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pairs = (0..count).map(|i| (order[2 * i], order[2 * i + 1])).collect();
    Ok(EvaluationSet { pairs, seed })
}

/// Reader over an IDX file tracking the byte offset for error messages.
struct IdxReader {
    reader: BufReader<File>,
    offset: u64,
    path: String,
}

impl IdxReader {
    fn new(path: &Path) -> Result<Self> {
        Ok(IdxReader {
            reader: BufReader::new(File::open(path)?),
            offset: 0,
            path: path.display().to_string(),
        })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.offset,
            message,
        }
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.reader.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(self.err(format!(
                "file truncated: expected {} more bytes",
                buf.len()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}
