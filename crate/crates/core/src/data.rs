//! In-memory image datasets, the IDX reader and a synthetic Gaussian-blob
//! generator.
//!
//! IDX layout (big-endian): `magic: u32` (`0x00000803` for u8 images with three
//! dimensions, `0x00000801` for u8 labels), one `u32` per dimension, then the
//! raw bytes. Files may be gzip-compressed (`.gz` suffix). Pixel bytes are
//! scaled to `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn size(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A labelled set of images stored sample-major (`n × c × h × w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dims: ImageDims,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(dims: ImageDims, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() * dims.size() {
            return Err(Error::DimensionMismatch { expected: labels.len() * dims.size(), actual: inputs.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { dims, classes, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dims.size();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let d = self.dims.size();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Batch { dims: self.dims, classes: self.classes, inputs, labels }
    }

    pub fn all(&self) -> Shard<'_> {
        Shard::full(self)
    }

    pub fn shard<'a>(&'a self, indices: &'a [usize]) -> Shard<'a> {
        Shard { data: self, indices: Some(indices) }
    }
}

/// A view selecting samples of a [`Batch`]; `indices == None` means all of them.
#[derive(Debug, Clone, Copy)]
pub struct Shard<'a> {
    pub data: &'a Batch,
    pub indices: Option<&'a [usize]>,
}

impl<'a> Shard<'a> {
    pub fn full(data: &'a Batch) -> Self {
        Self { data, indices: None }
    }

    pub fn len(&self) -> usize {
        self.indices.map_or(self.data.len(), |ix| ix.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index into the underlying batch of the `i`-th member of the shard.
    pub fn index(&self, i: usize) -> usize {
        self.indices.map_or(i, |ix| ix[i])
    }

    pub fn label(&self, i: usize) -> usize {
        self.data.labels[self.index(i)]
    }

    pub fn gather_range(&self, start: usize, end: usize) -> Batch {
        let ix: Vec<usize> = (start..end).map(|i| self.index(i)).collect();
        self.data.gather(&ix)
    }

    pub fn gather(&self, positions: &[usize]) -> Batch {
        let ix: Vec<usize> = positions.iter().map(|&i| self.index(i)).collect();
        self.data.gather(&ix)
    }

    pub fn to_batch(&self) -> Batch {
        self.gather_range(0, self.len())
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::Dataset { path: path.to_owned(), reason: e.to_string() })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |reason: String| Error::Dataset { path: path.to_owned(), reason };
    let mut bytes = Vec::new();
    open_maybe_gz(path)?.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
    if bytes.len() < 4 {
        return Err(bad("truncated header".into()));
    }
    let word = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let magic = word(0);
    if magic != expected_magic {
        return Err(bad(format!("bad magic {magic:#010x}, expected {expected_magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| word(4 + 4 * d) as usize).collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(bad(format!("expected {} payload bytes, found {}", total, bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Reads an IDX image/label file pair into a single-channel [`Batch`].
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Batch> {
    let (idims, pixels) = read_idx(images, 0x0000_0803)?;
    let (ldims, raw_labels) = read_idx(labels, 0x0000_0801)?;
    if idims[0] != ldims[0] {
        return Err(Error::Dataset {
            path: labels.to_owned(),
            reason: format!("{} labels for {} images", ldims[0], idims[0]),
        });
    }
    let dims = ImageDims::new(1, idims[1], idims[2]);
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = raw_labels.iter().map(|&l| l as usize).collect();
    Batch::new(dims, classes, inputs, labels)
        .map_err(|e| Error::Dataset { path: images.to_owned(), reason: e.to_string() })
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")].into_iter().map(|n| dir.join(n)).find(|p| p.exists())
}

/// Loads `<dir>/train-{images-idx3,labels-idx1}-ubyte[.gz]` and, when present,
/// the matching `t10k-*` pair.
pub fn load_idx_dir(dir: &Path, classes: usize) -> Result<(Batch, Option<Batch>)> {
    let missing = |what: &str| Error::Dataset {
        path: dir.to_owned(),
        reason: format!(
            "missing {what}; expected IDX files such as train-images-idx3-ubyte.gz \
             (run scripts/fetch_mnist.py or point ADAAGG_DATA_DIR at a dataset root)"
        ),
    };
    let train_x = find_file(dir, "train-images-idx3-ubyte").ok_or_else(|| missing("training images"))?;
    let train_y = find_file(dir, "train-labels-idx1-ubyte").ok_or_else(|| missing("training labels"))?;
    let train = load_idx(&train_x, &train_y, classes)?;
    let test = match (find_file(dir, "t10k-images-idx3-ubyte"), find_file(dir, "t10k-labels-idx1-ubyte")) {
        (Some(x), Some(y)) => Some(load_idx(&x, &y, classes)?),
        _ => None,
    };
    Ok((train, test))
}

/// Serializes a single-channel batch into the IDX pair layout (uncompressed).
pub fn write_idx(batch: &Batch, images: &Path, labels: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + batch.inputs.len());
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [batch.len(), batch.dims.height, batch.dims.width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(batch.inputs.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(images, out)?;
    let mut out = Vec::with_capacity(8 + batch.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    out.extend(batch.labels.iter().map(|&l| l as u8));
    std::fs::write(labels, out)?;
    Ok(())
}

/// Parameters of the synthetic blob dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dims: ImageDims,
    pub classes: usize,
    /// Distance of each class mean from the grey centre along the circle.
    pub radius: f64,
    /// Per-pixel noise standard deviation.
    pub sigma: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { dims: ImageDims::new(1, 12, 12), classes: 4, radius: 0.35, sigma: 0.1 }
    }
}

/// Class means lie on a circle spanned by two fixed pixel patterns; samples are
/// the mean plus isotropic Gaussian noise, clamped to `[0, 1]`. Labels are
/// balanced (`i mod M`) and shuffled.
pub fn synthetic_blobs(n: usize, spec: &BlobSpec, seed: u64) -> Result<Batch> {
    if spec.classes < 2 {
        return Err(invalid("synthetic blobs need at least two classes"));
    }
    let d = spec.dims.size();
    let u: Vec<f64> = (0..d).map(|j| (std::f64::consts::TAU * 3.0 * j as f64 / d as f64).cos()).collect();
    let v: Vec<f64> = (0..d).map(|j| (std::f64::consts::TAU * 2.0 * j as f64 / d as f64 + 0.7).sin()).collect();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let ang = std::f64::consts::TAU * k as f64 / spec.classes as f64;
            (0..d).map(|j| 0.5 + spec.radius * (ang.cos() * u[j] + ang.sin() * v[j])).collect()
        })
        .collect();
    let mut rng: Rng = rng_from(seed, &[0xb10b]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| invalid(e.to_string()))?;
    let mut inputs = Vec::with_capacity(n * d);
    for &l in &labels {
        inputs.extend(means[l].iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Batch::new(spec.dims, spec.classes, inputs, labels)
}
