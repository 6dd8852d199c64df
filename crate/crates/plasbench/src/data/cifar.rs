//! CIFAR-10 binary batches: each record is 1 label byte followed by 3072
//! pixel bytes (R, G, B planes of a 32x32 image, row-major). Train batches
//! hold 10000 records each; pixels are scaled to [0, 1] on load.

use std::path::Path;

use crate::error::{Error, Result};

use super::LabeledDataset;

pub const RECORD_BYTES: usize = 3073;
pub const RECORDS_PER_TRAIN_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const NUM_CLASSES: usize = 10;

/// Parses raw batch bytes (any positive multiple of the record size) into
/// pixels in [0,1] and labels.
pub fn parse_batch(bytes: &[u8]) -> Result<(Vec<f32>, Vec<u32>)> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch must be a positive multiple of {RECORD_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    let records = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(records * (RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(records);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let label = rec[0] as u32;
        if label as usize >= NUM_CLASSES {
            return Err(Error::Format(format!(
                "CIFAR label byte {label} out of range 0..{NUM_CLASSES}"
            )));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_sized(path: &Path, expect: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: expected {expect} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Loads the five train batch files from `dir` (N = 50000, 10 classes).
pub fn load_cifar10_binary(dir: &Path) -> Result<LabeledDataset> {
    let mut pixels = Vec::with_capacity(5 * RECORDS_PER_TRAIN_FILE * (RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(5 * RECORDS_PER_TRAIN_FILE);
    for name in TRAIN_FILES {
        let bytes = read_sized(&dir.join(name), RECORDS_PER_TRAIN_FILE * RECORD_BYTES)?;
        let (p, l) = parse_batch(&bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    LabeledDataset::new("cifar10-train", vec![3, 32, 32], pixels, labels, NUM_CLASSES)
}

/// Loads a single batch file (e.g. `test_batch.bin`).
pub fn load_cifar10_file(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let (pixels, labels) = parse_batch(&bytes)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".into());
    LabeledDataset::new(name, vec![3, 32, 32], pixels, labels, NUM_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_record_recovered() {
        // One record: label 7, all pixels 255 -> tensor of ones.
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat(255u8).take(RECORD_BYTES - 1));
        let (pixels, labels) = parse_batch(&bytes).unwrap();
        assert_eq!(labels, vec![7]);
        assert!(pixels.iter().all(|&p| p == 1.0));
        assert_eq!(pixels.len(), 3072);
    }

    #[test]
    fn wrong_size_reports_expected_and_actual() {
        let bytes = vec![0u8; 100];
        let err = parse_batch(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3073") && msg.contains("100"), "{msg}");
    }

    #[test]
    fn train_loader_rejects_short_files() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES {
            std::fs::write(dir.path().join(name), vec![0u8; 10]).unwrap();
        }
        let err = load_cifar10_binary(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("30730000"), "{err}");
    }

    #[test]
    fn balanced_fixture_has_equal_class_counts() {
        // Two records per class, interleaved.
        let mut bytes = Vec::new();
        for i in 0..20u8 {
            bytes.push(i % 10);
            bytes.extend(std::iter::repeat(i.wrapping_mul(13)).take(RECORD_BYTES - 1));
        }
        let (pixels, labels) = parse_batch(&bytes).unwrap();
        let ds = LabeledDataset::new("fix", vec![3, 32, 32], pixels, labels, 10).unwrap();
        assert!(ds.class_histogram().iter().all(|&c| c == 2));
    }

    #[test]
    fn out_of_range_label_is_format_error() {
        let mut bytes = vec![11u8];
        bytes.extend(std::iter::repeat(0u8).take(RECORD_BYTES - 1));
        assert!(matches!(parse_batch(&bytes), Err(Error::Format(_))));
    }
}
