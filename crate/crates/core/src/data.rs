//! Datasets: IDX and CSV ingestion, synthetic Gaussian class blobs, and
//! seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    Full,
}

/// Features are stored row-major, one sample of `sample_shape` after another.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if sample_shape.is_empty() || d == 0 || features.len() != d * labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            sample_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Stacks the given samples into a `[n, ...sample_shape]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// A copy holding only the given samples, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (x, labels) = self.gather(indices)?;
        Dataset::new(x.into_data(), self.sample_shape.clone(), labels, self.num_classes, split)
    }
}

/// Affine standardization `(x - mean) / std`, applied after any format
/// specific scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalization needs finite mean and positive std, got {self:?}"
            )));
        }
        Ok(())
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Raw contents of an IDX image file (magic 0x00000803).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let dims = idx_header(bytes, "images", IDX_IMAGES_MAGIC, 3)?;
        let (count, rows, cols) = (dims[0], dims[1], dims[2]);
        if rows == 0 || cols == 0 {
            return Err(Error::Dataset(format!("IDX images: zero-sized {rows}x{cols} images")));
        }
        let pixels = idx_payload(bytes, "images", 16, count * rows * cols)?;
        Ok(IdxImages { rows, cols, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.count() as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Raw contents of an IDX label file (magic 0x00000801).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let dims = idx_header(bytes, "labels", IDX_LABELS_MAGIC, 1)?;
        let labels = idx_payload(bytes, "labels", 8, dims[0])?;
        Ok(IdxLabels { labels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

fn idx_header(bytes: &[u8], file: &'static str, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let header = 4 + 4 * ndims;
    let truncated = |needed| Error::Truncated {
        file,
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(header));
    }
    let found = word(0);
    if found != magic {
        return Err(Error::BadMagic {
            file,
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(truncated(header));
    }
    Ok((1..=ndims).map(|i| word(i) as usize).collect())
}

fn idx_payload(bytes: &[u8], file: &'static str, offset: usize, len: usize) -> Result<Vec<u8>> {
    let needed = offset + len;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            file,
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::Dataset(format!(
            "IDX {file}: {} unexpected bytes after payload",
            bytes.len() - needed
        )));
    }
    Ok(bytes[offset..].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Builds a dataset from parsed IDX files. Pixels are scaled to [0, 1] and
/// then standardized. Samples have shape `[1, rows, cols]`.
pub fn idx_dataset(
    images: &IdxImages,
    labels: &IdxLabels,
    norm: Normalization,
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    norm.validate()?;
    if images.count() != labels.labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.labels.len(),
        });
    }
    let features = images.pixels.iter().map(|&p| norm.apply(f64::from(p) / 255.0)).collect();
    let labels = labels.labels.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(features, vec![1, images.rows, images.cols], labels, num_classes, split)
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    norm: Normalization,
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    let images = IdxImages::parse(&read(images_path.as_ref())?)?;
    let labels = IdxLabels::parse(&read(labels_path.as_ref())?)?;
    idx_dataset(&images, &labels, norm, num_classes, split)
}

pub fn write_idx(
    images: &IdxImages,
    labels: &IdxLabels,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, images.to_bytes()).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels.to_bytes()).map_err(|e| Error::io(lp, e))
}

/// Parses `label,x1,x2,...` rows. A first row whose first field is not an
/// integer is treated as a header. Feature values are standardized as given.
pub fn parse_csv(text: &str, norm: Normalization, num_classes: usize, split: Split) -> Result<Dataset> {
    norm.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("csv: {e}")))?;
        let first = record.get(0).unwrap_or("");
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(Error::Dataset(format!("csv row {}: bad label {first:?}", row + 1))),
        };
        let n = record.len() - 1;
        if n == 0 || width.is_some_and(|w| w != n) {
            return Err(Error::Dataset(format!("csv row {}: {n} features", row + 1)));
        }
        width = Some(n);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Dataset(format!("csv row {}: bad value {field:?}", row + 1)))?;
            features.push(norm.apply(v));
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Dataset("csv has no data rows".into()))?;
    Dataset::new(features, vec![width], labels, num_classes, split)
}

pub fn load_csv(path: impl AsRef<Path>, norm: Normalization, num_classes: usize, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, norm, num_classes, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

/// Gaussian class blobs. Centers are uniform on the unit sphere, samples are
/// `Normal(center, spread² I)`. Each class is split 80/20 into train/test,
/// and the test split is at least one sample per class.
pub fn synth_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let BlobSpec {
        classes: k,
        n_per_class: n,
        dim,
        spread,
    } = *spec;
    if k < 2 || n < 2 || dim == 0 || !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid blob spec {spec:?}")));
    }
    let centers = blob_centers(k, dim, seed);
    let mut rng = rng_from_seed(derive_seed(seed, "blobs/samples"));
    let n_test = (n / 5).max(1);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for class in 0..k {
        let center = &centers[class * dim..(class + 1) * dim];
        for i in 0..n {
            let dst = if i < n - n_test { &mut train } else { &mut test };
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                dst.0.push(c + spread * z);
            }
            dst.1.push(class);
        }
    }
    Ok((
        Dataset::new(train.0, vec![dim], train.1, k, Split::Train)?,
        Dataset::new(test.0, vec![dim], test.1, k, Split::Test)?,
    ))
}

/// The `classes × dim` unit-norm class centers used by [`synth_blobs`].
pub fn blob_centers(classes: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, "blobs/centers"));
    let mut centers = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        centers.extend(c);
    }
    centers
}

/// Index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = rng_from_seed(derive_seed(seed, &format!("epoch/{epoch}")));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
