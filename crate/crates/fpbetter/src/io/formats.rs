//! Binary dataset loaders: IDX (the MNIST container) and the CIFAR-10
//! binary layout. Both validate magic numbers, counts and dimensions, scale
//! pixels to [0, 1], and declare that range so attack clipping engages.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::io::dataset::DatasetHandle;
use crate::tensor::Tensor;

fn format_err(path: &Path, kind: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind,
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(Reader {
            path,
            bytes: std::fs::read(path)?,
            pos: 0,
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.path,
                FormatError::Truncated {
                    needed: self.pos + n,
                    available: self.bytes.len(),
                },
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // u8 elements, 3 dimensions
const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // u8 elements, 1 dimension

/// Load an IDX image/label pair (u8 payloads, 3-d images + 1-d labels).
/// Pixels are scaled to [0, 1]; images come out as [n, 1, rows, cols].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle> {
    let mut images = Reader::open(images_path)?;
    let magic = images.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            FormatError::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                found: magic,
            },
        ));
    }
    let n = images.u32_be()? as usize;
    let rows = images.u32_be()? as usize;
    let cols = images.u32_be()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(
            images_path,
            FormatError::CountMismatch(format!("degenerate dimensions {n}x{rows}x{cols}")),
        ));
    }
    let pixel_bytes = images.take(n * rows * cols)?;
    let data: Vec<f64> = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    if images.remaining() != 0 {
        return Err(format_err(
            images_path,
            FormatError::CountMismatch(format!(
                "{} trailing bytes after {n} images",
                images.remaining()
            )),
        ));
    }

    let mut labels = Reader::open(labels_path)?;
    let magic = labels.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            FormatError::BadMagic {
                expected: IDX_LABELS_MAGIC,
                found: magic,
            },
        ));
    }
    let n_labels = labels.u32_be()? as usize;
    if n_labels != n {
        return Err(format_err(
            labels_path,
            FormatError::CountMismatch(format!("{n_labels} labels for {n} images")),
        ));
    }
    let label_bytes = labels.take(n)?.to_vec();
    if labels.remaining() != 0 {
        return Err(format_err(
            labels_path,
            FormatError::CountMismatch(format!(
                "{} trailing bytes after {n} labels",
                labels.remaining()
            )),
        ));
    }
    let label_values: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = label_values.iter().max().copied().unwrap_or(0) + 1;

    let examples = Tensor::from_vec_finite(vec![n, 1, rows, cols], data)?;
    let mut handle = DatasetHandle::new(examples, label_values, classes.max(2))?;
    handle.range = Some((0.0, 1.0));
    Ok(handle)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Load one or more CIFAR-10 binary batch files (records of one label byte
/// followed by 3072 pixel bytes). Pixels are scaled to [0, 1]; images come
/// out as [n, 3, 32, 32].
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<DatasetHandle> {
    if paths.is_empty() {
        return Err(Error::Dataset("no CIFAR batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                FormatError::Truncated {
                    needed: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
                    available: bytes.len(),
                },
            ));
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(format_err(
                    path,
                    FormatError::CountMismatch(format!(
                        "label byte {label} exceeds class count {CIFAR_CLASSES}"
                    )),
                ));
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let examples = Tensor::from_vec_finite(vec![n, 3, 32, 32], data)?;
    let mut handle = DatasetHandle::new(examples, labels, CIFAR_CLASSES)?;
    handle.range = Some((0.0, 1.0));
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FormatError;
    use std::io::Write;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    /// Two 2x3 images with known bytes plus matching labels.
    fn idx_fixture(dir: &tempfile::TempDir) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut images = vec![0x00, 0x00, 0x08, 0x03];
        images.extend(2u32.to_be_bytes()); // count
        images.extend(2u32.to_be_bytes()); // rows
        images.extend(3u32.to_be_bytes()); // cols
        images.extend([0, 51, 102, 153, 204, 255]); // image 0
        images.extend([255, 0, 255, 0, 255, 0]); // image 1
        let mut labels = vec![0x00, 0x00, 0x08, 0x01];
        labels.extend(2u32.to_be_bytes());
        labels.extend([1u8, 0u8]);
        (
            write_tmp(dir, "images-idx3", &images),
            write_tmp(dir, "labels-idx1", &labels),
        )
    }

    #[test]
    fn idx_fixture_round_trips_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture(&dir);
        let d = load_idx(&images, &labels).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.example_shape(), &[1, 2, 3]);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.range, Some((0.0, 1.0)));
        let expected: Vec<f64> = [0u8, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        assert_eq!(d.examples.data(), expected.as_slice());
    }

    #[test]
    fn idx_empty_file_is_truncation_not_crash() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_tmp(&dir, "empty", &[]);
        let (_, labels) = idx_fixture(&dir);
        match load_idx(&empty, &labels) {
            Err(Error::Format {
                kind: FormatError::Truncated { .. },
                ..
            }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture(&dir);
        match load_idx(&labels, &images) {
            Err(Error::Format {
                kind: FormatError::BadMagic { .. },
                ..
            }) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = idx_fixture(&dir);
        let mut labels = vec![0x00, 0x00, 0x08, 0x01];
        labels.extend(3u32.to_be_bytes());
        labels.extend([1u8, 0u8, 1u8]);
        let labels = write_tmp(&dir, "labels-bad", &labels);
        match load_idx(&images, &labels) {
            Err(Error::Format {
                kind: FormatError::CountMismatch(_),
                ..
            }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(fill).take(3072));
        rec
    }

    #[test]
    fn cifar_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_record(3, 255);
        bytes.extend(cifar_record(7, 0));
        let path = write_tmp(&dir, "batch.bin", &bytes);
        let d = load_cifar_binary(&[path]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.example_shape(), &[3, 32, 32]);
        assert_eq!(d.labels, vec![3, 7]);
        assert!(d.examples.data()[..3072].iter().all(|&v| v == 1.0));
        assert!(d.examples.data()[3072..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_truncated_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "short.bin", &cifar_record(1, 9)[..100]);
        match load_cifar_binary(&[path]) {
            Err(Error::Format {
                kind: FormatError::Truncated { .. },
                ..
            }) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(&dir, "badlabel.bin", &cifar_record(10, 4));
        match load_cifar_binary(&[path]) {
            Err(Error::Format {
                kind: FormatError::CountMismatch(_),
                ..
            }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }
}
