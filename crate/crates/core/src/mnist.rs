//! MNIST in the IDX container format.
//!
//! An IDX file is a big-endian 32-bit magic number (`0x00000803` for images,
//! `0x00000801` for labels), one big-endian 32-bit size per dimension, then
//! the raw unsigned bytes. The four standard files are
//! `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Pixel scale applied when converting bytes to network inputs.
pub const PIXEL_SCALE: f64 = 1.0 / 256.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

fn idx_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Idx { offset, message: message.into() }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(bytes.len(), "truncated header"))
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<&[u8]> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(idx_err(bytes.len(), format!("truncated payload: expected {expected} bytes, found {have}")));
    }
    if have > expected {
        return Err(idx_err(header + expected, format!("{} trailing bytes after payload", have - expected)));
    }
    Ok(&bytes[header..])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(idx_err(0, format!("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let payload = check_payload(bytes, 16, count * rows * cols)?;
    Ok(IdxImages { rows, cols, pixels: payload.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(idx_err(0, format!("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let payload = check_payload(bytes, 8, count)?;
    if let Some(pos) = payload.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(idx_err(8 + pos, format!("label {} out of range 0..{NUM_CLASSES}", payload[pos])));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images and labels kept as raw bytes; batches are converted to `f64`
/// tensors of shape `(N, 1, rows, cols)` scaled by 1/256 on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: IdxImages,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::Config(format!(
                "image count {} differs from label count {}",
                images.count(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange { label: l as usize, classes: NUM_CLASSES });
        }
        Ok(Dataset { images, labels })
    }

    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let images = parse_idx_images(&fs::read(images_path)?)?;
        let labels = parse_idx_labels(&fs::read(labels_path)?)?;
        Dataset::new(images, labels)
    }

    /// Loads the standard training and test files from one directory.
    pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
        let train = Dataset::load(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
        let test = Dataset::load(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
        Ok((train, test))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.images.rows, self.images.cols]
    }

    pub fn raw_images(&self) -> &IdxImages {
        &self.images
    }

    pub fn raw_labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let px = self.images.rows * self.images.cols;
        Dataset {
            images: IdxImages { pixels: self.images.pixels[..n * px].to_vec(), ..self.images.clone() },
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Normalized image tensor and labels for the given example indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let px = self.images.rows * self.images.cols;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.images.pixels[i * px..(i + 1) * px].iter().map(|&b| b as f64 * PIXEL_SCALE));
            labels.push(self.labels[i] as usize);
        }
        let shape = vec![indices.len(), 1, self.images.rows, self.images.cols];
        (Tensor::new(shape, data).expect("gathered data matches shape"), labels)
    }

    /// Seeded minibatches for one epoch; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        batch_indices(self.len(), batch_size, seed, epoch)
            .into_iter()
            .map(move |idx| self.gather(&idx))
    }
}

/// Index batches of a seeded per-epoch permutation of `0..n`.
///
/// # Panics
/// If `batch_size` is zero.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[0x5348_5546, epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_bytes() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, 1, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 128, 255, 1]);
        b
    }

    #[test]
    fn minimal_image_stream() {
        let imgs = parse_idx_images(&image_bytes()).unwrap();
        assert_eq!((imgs.count(), imgs.rows, imgs.cols), (1, 2, 2));
        assert_eq!(imgs.pixels, vec![0, 128, 255, 1]);
        assert_eq!(encode_idx_images(&imgs), image_bytes());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut b = image_bytes();
        b[3] = 0x01;
        let err = parse_idx_images(&b).unwrap_err().to_string();
        assert!(err.contains("expected image magic"), "{err}");
        assert!(parse_idx_labels(&image_bytes()).is_err());
    }

    #[test]
    fn truncation_reports_offset() {
        let b = image_bytes();
        match parse_idx_images(&b[..18]) {
            Err(Error::Idx { offset, message }) => {
                assert_eq!(offset, 18);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_idx_images(&b[..6]), Err(Error::Idx { .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(parse_idx_images(&long), Err(Error::Idx { offset: 20, .. })));
    }

    #[test]
    fn labels() {
        let b = encode_idx_labels(&[7, 2, 1]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 2, 1]);
        let bad = encode_idx_labels(&[7, 10]);
        assert!(matches!(parse_idx_labels(&bad), Err(Error::Idx { offset: 9, .. })));
    }

    #[test]
    fn normalization_is_exact() {
        let ds = Dataset::new(parse_idx_images(&image_bytes()).unwrap(), vec![3]).unwrap();
        let (x, y) = ds.gather(&[0]);
        assert_eq!(x.shape(), &[1, 1, 2, 2]);
        assert_eq!(x.data(), &[0.0, 0.5, 255.0 / 256.0, 1.0 / 256.0]);
        assert_eq!(y, vec![3]);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let b = batch_indices(5, 2, 9, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(b, batch_indices(5, 2, 9, 0));
        assert_ne!(batch_indices(100, 10, 9, 0), batch_indices(100, 10, 9, 1));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..5).collect::<Vec<_>>());
    }
}
