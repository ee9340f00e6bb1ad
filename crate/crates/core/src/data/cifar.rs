//! CIFAR-10 binary batches: 10000 records of 1 label byte + 3072 planar RGB bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataSource, Dataset, ImageBatch};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read_required(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Loads the five training batches, in file order.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    let files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    load_cifar10_files(&files)
}

pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    load_cifar10_files(&[dir.join("test_batch.bin")])
}

pub fn load_cifar10_files(files: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in files {
        let bytes = read_required(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::DatasetFormat(format!(
                "{}: length {} is not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        data.reserve(bytes.len());
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0];
            if label > 9 {
                return Err(Error::DatasetFormat(format!(
                    "{}: label byte {label} > 9",
                    path.display()
                )));
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(ImageBatch::from_vec(n, 32, 32, data)?, Some(labels), DataSource::Cifar10)
}

/// Writes records in the official layout; pixels are quantized to bytes.
pub fn write_cifar10_batch(path: &Path, images: &ImageBatch<f32>, labels: &[u8]) -> Result<()> {
    if images.h != 32 || images.w != 32 || labels.len() != images.b {
        return Err(Error::DatasetFormat("CIFAR-10 records are 32x32 with one label each".into()));
    }
    let mut out = Vec::with_capacity(images.b * CIFAR_RECORD);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label);
        out.extend(images.image(i).iter().map(|&v| super::quantize(v)));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 3;
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar10_files(&[path]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels.as_deref(), Some(&[3u8][..]));
        assert!(ds.images.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10_files(&[path]), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        fs::write(&path, &rec).unwrap();
        assert!(matches!(load_cifar10_files(&[path]), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::DatasetNotFound(_))));
        assert!(matches!(
            load_cifar10(&dir.path().join("nope")),
            Err(Error::DatasetNotFound(_))
        ));
    }

    #[test]
    fn five_batches_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        // 3 records per file keeps the test small; layout arithmetic is the same
        for f in 1..=5u8 {
            let mut bytes = Vec::new();
            for r in 0..3u8 {
                bytes.push(r);
                bytes.extend(std::iter::repeat_n(f * 10 + r, 3072));
            }
            fs::write(dir.path().join(format!("data_batch_{f}.bin")), bytes).unwrap();
        }
        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!(ds.image(4)[0], 21.0 / 255.0);
        assert_eq!(ds.labels.as_ref().unwrap()[4], 1);
        let again = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds, again);
    }
}
