//! MNIST IDX ingestion, train/validation splitting and mini-batching.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::{stream, Prng};
use crate::tensor::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// Examples as rows of `images` (pixels in `[0, 1]`) with matching labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                left: images.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Dataset {
            images: Matrix::from_vec(indices.len(), f, data).expect("sized by construction"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// The examples at `indices` laid out as a `features × indices.len()` batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let f = self.features();
        let b = indices.len();
        let mut x = Matrix::zeros(f, b);
        for (j, &i) in indices.iter().enumerate() {
            for (k, &v) in self.images.row(i).iter().enumerate() {
                x.data_mut()[k * b + j] = v;
            }
        }
        Batch {
            x,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sequential batches of at most `size`, keeping the tail.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |c| {
            let end = ((c + 1) * size).min(idx.len());
            self.batch(&idx[c * size..end])
        })
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            if l < CLASSES {
                h[l] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `features × batch`.
    pub x: Matrix,
    pub labels: Vec<usize>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.pos,
            reason: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                reason: format!("truncated payload: expected {len} bytes, found {have}"),
            });
        }
        if have > len {
            return Err(Error::Parse {
                offset: self.pos + len,
                reason: format!("dimension mismatch: {} trailing bytes", have - len),
            });
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn expect_magic(c: &mut Cursor, magic: u32) -> Result<()> {
    let found = c.u32()?;
    if found != magic {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("unexpected magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into a `count × (rows·cols)` matrix scaled to `[0, 1]`.
pub fn load_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let mut c = Cursor { bytes, pos: 0 };
    expect_magic(&mut c, IMAGE_MAGIC)?;
    let count = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.payload(count * rows * cols)?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Matrix::from_vec(count, rows * cols, data)
}

pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, pos: 0 };
    expect_magic(&mut c, LABEL_MAGIC)?;
    let count = c.u32()? as usize;
    let start = c.pos;
    let raw = c.payload(count)?;
    if let Some(i) = raw.iter().position(|&l| l as usize >= CLASSES) {
        return Err(Error::Parse {
            offset: start + i,
            reason: format!("label {} out of range", raw[i]),
        });
    }
    Ok(raw.iter().map(|&l| l as usize).collect())
}

/// Serializes images back to IDX3 (pixels rounded to the nearest byte).
pub fn write_idx_images(images: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != images.cols() {
        return Err(Error::Shape {
            op: "write_idx_images",
            left: images.shape(),
            right: (rows, cols),
        });
    }
    let mut out = Vec::with_capacity(16 + images.data().len());
    for v in [IMAGE_MAGIC, images.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(stem),
                std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
            )
        })
}

/// Loads `{prefix}-images-idx3-ubyte[.gz]` and `{prefix}-labels-idx1-ubyte[.gz]`.
pub fn load_pair(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = load_idx_images(&read_maybe_gz(&find(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = load_idx_labels(&read_maybe_gz(&find(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    Dataset::new(images, labels)
}

/// The standard training and test files found in `dir`.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train: Dataset,
    pub test: Dataset,
}

impl MnistFiles {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_pair(dir, "train")?,
            test: load_pair(dir, "t10k")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub valid_count: usize,
    pub shuffle_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_count: 40_000,
            valid_count: 10_000,
            shuffle_seed: 0,
        }
    }
}

/// Seeded shuffle of all examples; the first `train_count` become the
/// training set and the next `valid_count` the validation set.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let required = spec.train_count + spec.valid_count;
    if dataset.len() < required {
        return Err(Error::InsufficientExamples {
            available: dataset.len(),
            required,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Prng::with_stream(spec.shuffle_seed, stream::SHUFFLE).shuffle(&mut order);
    Ok((
        dataset.subset(&order[..spec.train_count]),
        dataset.subset(&order[spec.train_count..required]),
    ))
}

/// Index batches for one epoch: a seeded permutation cut into full batches,
/// with any short tail dropped.
pub fn minibatches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size {batch_size} < 2")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    Prng::with_stream(epoch_seed, stream::SHUFFLE | 1).shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
