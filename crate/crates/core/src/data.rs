//! Image datasets, the AUG1 binary format, subsets and epoch batching.

use augsearch_autodiff::Tensor;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AUG1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic bytes {0:?} (expected \"AUG1\")")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("label {label} of image {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f32 },
    #[error("image tensor must be [N,C,H,W], got {0:?}")]
    BadShape(Vec<usize>),
    #[error("{images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("subset of {size} requested from {available} images")]
    SubsetTooLarge { size: usize, available: usize },
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("dimension {0} does not fit the format's 32-bit header")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    /// `[N,C,H,W]` pixels in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl DatasetBundle {
    /// Validates shape, label range and pixel range.
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::BadShape(images.shape().to_vec()));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::LabelCount {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes: class_count,
            });
        }
        if let Some((index, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelOutOfRange { index, value });
        }
        Ok(DatasetBundle {
            name: name.into(),
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn select(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let images = self.images.select0(indices).expect("indices in range");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.numel() * 4 + self.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION as usize, s[0], s[1], s[2], s[3], self.class_count] {
            let v = u32::try_from(v).map_err(|_| DataError::TooLarge(v))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &p in self.images.data() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 {
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let version = word(0) as u32;
        if version != VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let (n, c, h, w, classes) = (word(1), word(2), word(3), word(4), word(5));
        let pixels = n * c * h * w;
        let payload = HEADER_LEN + pixels * 4 + n * 4;
        let expected = payload + 4;
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes(bytes.len() - expected));
        }
        let stored = u32::from_le_bytes(bytes[payload..expected].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..payload]);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        let floats = &bytes[HEADER_LEN..HEADER_LEN + pixels * 4];
        let data = floats
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let labels = bytes[HEADER_LEN + pixels * 4..payload]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        let images = Tensor::new(vec![n, c, h, w], data).expect("length computed from header");
        DatasetBundle::new(name, images, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        DatasetBundle::from_bytes(name, &bytes)
    }

    /// Uniform random subset of `size` images without replacement, in
    /// shuffled order.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Self, DataError> {
        if size > self.len() {
            return Err(DataError::SubsetTooLarge {
                size,
                available: self.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(size);
        let (images, labels) = if size == 0 {
            let (c, h, w) = self.image_dims();
            (Tensor::zeros(&[0, c, h, w]), Vec::new())
        } else {
            self.select(&idx)
        };
        let out = DatasetBundle {
            name: format!("{}-subset{size}", self.name),
            images,
            labels,
            class_count: self.class_count,
        };
        info!("subset of {size} from {}: per-class counts {:?}", self.name, out.class_counts());
        Ok(out)
    }
}

/// The order in which an epoch visits the dataset.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    idx
}

/// Index batches of one epoch; the final ragged batch is dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BatchSize(batch_size));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// `(images, labels)` batches of one epoch.
pub fn batches(
    bundle: &DatasetBundle,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + '_, DataError> {
    let idx = batch_indices(bundle.len(), batch_size, seed, epoch)?;
    Ok(idx.into_iter().map(move |b| bundle.select(&b)))
}
