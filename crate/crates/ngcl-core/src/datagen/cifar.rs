//! CIFAR-10 binary batch ingestion.
//!
//! Record layout per the published format: 1 label byte, then 3072 pixel
//! bytes (R, G, B planes of a 32x32 image in row-major order), 10000
//! records per file, so each file is exactly 30_730_000 bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledSet;

const RECORD_BYTES: usize = 1 + 3072;
const RECORDS_PER_FILE: usize = 10_000;
const FILE_BYTES: u64 = (RECORD_BYTES * RECORDS_PER_FILE) as u64;
const PIXELS: usize = 3072;
const PLANE: usize = 1024;
const CLASSES: usize = 10;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn read_batch_file(path: &Path, x: &mut Tensor, y: &mut Vec<usize>, row_off: usize) -> Result<()> {
    let name = path.display().to_string();
    let meta = std::fs::metadata(path).map_err(|e| Error::Data {
        path: name.clone(),
        detail: format!("missing file: {e}"),
    })?;
    if meta.len() != FILE_BYTES {
        return Err(Error::Data {
            path: name.clone(),
            detail: format!("wrong file size {} (expected {FILE_BYTES})", meta.len()),
        });
    }
    let bytes = std::fs::read(path)?;
    for r in 0..RECORDS_PER_FILE {
        let rec = &bytes[r * RECORD_BYTES..(r + 1) * RECORD_BYTES];
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Data {
                path: name.clone(),
                detail: format!("record {r}: label out of range [0,{CLASSES})"),
            });
        }
        y.push(label);
        let row = x.row_mut(row_off + r);
        for (i, &b) in rec[1..].iter().enumerate() {
            row[i] = b as f64 / 255.0;
        }
    }
    Ok(())
}

/// Load the five training batches and the test batch from `dir`. Pixels are
/// scaled to [0,1] and then standardized per channel using the training
/// set's channel means and stddevs.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let mut train_x = Tensor::zeros(5 * RECORDS_PER_FILE, PIXELS);
    let mut train_y = Vec::with_capacity(5 * RECORDS_PER_FILE);
    for (i, file) in TRAIN_FILES.iter().enumerate() {
        read_batch_file(&dir.join(file), &mut train_x, &mut train_y, i * RECORDS_PER_FILE)?;
    }
    let mut test_x = Tensor::zeros(RECORDS_PER_FILE, PIXELS);
    let mut test_y = Vec::with_capacity(RECORDS_PER_FILE);
    read_batch_file(&dir.join(TEST_FILE), &mut test_x, &mut test_y, 0)?;

    // Channel statistics over the training set only.
    let n_train = train_x.rows();
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    for c in 0..3 {
        let mut acc = 0.0;
        for i in 0..n_train {
            let row = train_x.row(i);
            acc += row[c * PLANE..(c + 1) * PLANE].iter().sum::<f64>();
        }
        mean[c] = acc / (n_train * PLANE) as f64;
        let mut acc2 = 0.0;
        for i in 0..n_train {
            let row = train_x.row(i);
            acc2 += row[c * PLANE..(c + 1) * PLANE]
                .iter()
                .map(|&v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
        var[c] = acc2 / (n_train * PLANE) as f64;
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();

    for x in [&mut train_x, &mut test_x] {
        for i in 0..x.rows() {
            let row = x.row_mut(i);
            for c in 0..3 {
                for v in row[c * PLANE..(c + 1) * PLANE].iter_mut() {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
    }

    Ok((
        LabeledSet {
            x: train_x,
            y: train_y,
            class_count: CLASSES,
        },
        LabeledSet {
            x: test_x,
            y: test_y,
            class_count: CLASSES,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Write a synthetic directory in the CIFAR-10 binary layout. Files are
    /// large (30.7 MB each), so the happy path and the error paths share a
    /// single directory below.
    fn fake_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for file in TRAIN_FILES.iter().chain([&TEST_FILE]) {
            let mut f = std::fs::File::create(dir.path().join(file)).unwrap();
            let mut buf = Vec::with_capacity(RECORD_BYTES * RECORDS_PER_FILE);
            for r in 0..RECORDS_PER_FILE {
                buf.push((r % 10) as u8);
                for p in 0..PIXELS {
                    buf.push(((r + p) % 256) as u8);
                }
            }
            f.write_all(&buf).unwrap();
        }
        dir
    }

    #[test]
    fn format_contract_end_to_end() {
        let dir = fake_dir();

        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.x.rows(), 50_000);
        assert_eq!(test.x.rows(), 10_000);
        assert_eq!(train.x.cols(), 3072);
        // Per-channel training mean should be ~0 after standardization.
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..train.x.rows() {
                acc += train.x.row(i)[c * PLANE..(c + 1) * PLANE].iter().sum::<f64>();
            }
            let m = acc / (train.x.rows() * PLANE) as f64;
            assert!(m.abs() < 1e-9, "channel {c} mean {m}");
        }

        // Truncation: size error naming the file.
        let path = dir.path().join("data_batch_3.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_3.bin"), "{err}");
        assert!(err.contains("size"), "{err}");

        // Bad label byte.
        let mut fixed = bytes;
        fixed[137 * RECORD_BYTES] = 255;
        std::fs::write(&path, &fixed).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("label out of range [0,10)"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin"), "{err}");
    }
}
