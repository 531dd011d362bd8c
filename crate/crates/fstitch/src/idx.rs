//! MNIST IDX files: big-endian header (magic, dimensions) followed by raw
//! unsigned bytes.

use std::fs;
use std::path::{Path, PathBuf};

use fstitch_core::{LabeledSet, Tensor};
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
}

fn format_err(offset: usize, message: impl Into<String>) -> IdxError {
    IdxError::Format {
        offset,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "truncated header"))
}

/// Decodes an image file into an `N x 784` tensor with pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, Vec<f64>), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(format_err(8, format!("image dims {rows}x{cols}, expected 28x28")));
    }
    let payload = &bytes[16..];
    let expected = count * PIXELS;
    if payload.len() < expected {
        return Err(format_err(
            16 + payload.len(),
            format!("payload truncated: {} of {expected} pixel bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(16 + expected, "trailing bytes after payload"));
    }
    Ok((count, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_err(
            8 + payload.len().min(count),
            format!("{} label bytes for a count of {count}", payload.len()),
        ));
    }
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b <= 9 {
                Ok(b as usize)
            } else {
                Err(format_err(8 + i, format!("label {b} outside [0, 9]")))
            }
        })
        .collect()
}

/// Loads an image file. An empty file yields `None` shape-wise, so the
/// count is returned alongside the row-major pixel buffer.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor, IdxError> {
    let (count, pixels) = parse_images(&read(path.as_ref())?)?;
    Tensor::new(vec![count, PIXELS], pixels).map_err(|e| format_err(4, e.to_string()))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>, IdxError> {
    parse_labels(&read(path.as_ref())?)
}

/// Encodes pixel bytes as an IDX image file.
pub fn encode_images(count: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * PIXELS);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, SIDE as u32, SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// The four standard MNIST files of a directory.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub fn load_set(images: &Path, labels: &Path) -> Result<LabeledSet, IdxError> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    LabeledSet::with_positions(x, y).map_err(|e| format_err(0, e.to_string()))
}

/// Loads both sets. Source ids run through the training images first and
/// continue into the test images, so every image of the corpus has its own.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist, IdxError> {
    let dir = dir.as_ref();
    let train = load_set(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let x = load_idx_images(dir.join(TEST_IMAGES))?;
    let y = load_idx_labels(dir.join(TEST_LABELS))?;
    let offset = train.len() as u64;
    let ids = (offset..offset + y.len() as u64).collect();
    let test = LabeledSet::new(x, y, ids).map_err(|e| format_err(0, e.to_string()))?;
    Ok(Mnist { train, test })
}

/// True if `dir` holds all four MNIST files.
pub fn has_mnist(dir: impl AsRef<Path>) -> bool {
    let dir = dir.as_ref();
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|f| dir.join(f).is_file())
}
