//! IDX binary format (MNIST-style): big-endian u32 header, u8 payload.
//!
//! Images carry magic `00 00 08 03` and three extents (count, rows, cols);
//! labels carry magic `00 00 08 01` and one extent. Pixels are scaled to
//! [0, 1] on load.

use std::path::Path;

use crate::error::{Error, Result};

use super::LabeledDataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated IDX file reading {what}")))
}

/// Parses an IDX image file: returns (count, rows, cols, pixels in [0,1]).
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let expect = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX header extents overflow".into()))?;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, header implies {expect}",
            payload.len()
        )));
    }
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file: returns the labels.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, header implies {count}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as u32).collect())
}

/// Builds the dataset from parsed image and label bytes, checking that the
/// counts agree.
pub fn from_bytes(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "image count {count} does not match label count {}",
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    LabeledDataset::new("idx", vec![1, rows, cols], pixels, labels, num_classes.max(2))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let mut ds = from_bytes(&image_bytes, &label_bytes)?;
    ds.name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(ds)
}

/// Serializes a dataset back to IDX image bytes (rounding pixels to u8).
pub fn write_images_bytes(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let [c, rows, cols] = ds.feature_shape() else {
        return Err(Error::Contract(format!(
            "IDX images need CxHxW features, got {:?}",
            ds.feature_shape()
        )));
    };
    if *c != 1 {
        return Err(Error::Contract("IDX images are single-channel".into()));
    }
    let mut out = Vec::with_capacity(16 + ds.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&(*rows as u32).to_be_bytes());
    out.extend_from_slice(&(*cols as u32).to_be_bytes());
    for i in 0..ds.len() {
        for &v in ds.example(i) {
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn write_labels_bytes(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels().iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Byte-level fixture: two 2x3 images with known pixels.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255]); // image 0
        images.extend_from_slice(&[255, 0, 255, 0, 255, 0]); // image 1

        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 1]);
        (images, labels)
    }

    #[test]
    fn fixture_pixels_recovered_exactly() {
        let (images, labels) = fixture();
        let ds = from_bytes(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_shape(), &[1, 2, 3]);
        let expect: Vec<f32> = [0u8, 51, 102, 153, 204, 255]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(ds.example(0), &expect[..]);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.label(1), 1);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let (mut images, labels) = fixture();
        images[3] = 0x01;
        assert!(matches!(
            from_bytes(&images, &labels),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_format_error_not_crash() {
        let (images, labels) = fixture();
        for cut in [0, 3, 10, images.len() - 1] {
            assert!(matches!(parse_images(&images[..cut]), Err(Error::Format(_))));
        }
        assert!(matches!(parse_labels(&labels[..9]), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let (images, _) = fixture();
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            from_bytes(&images, &labels),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn round_trip_preserves_tensors_and_labels() {
        let (images, labels) = fixture();
        let ds = from_bytes(&images, &labels).unwrap();
        let images2 = write_images_bytes(&ds).unwrap();
        let labels2 = write_labels_bytes(&ds);
        assert_eq!(images, images2);
        assert_eq!(labels, labels2);
        let ds2 = from_bytes(&images2, &labels2).unwrap();
        assert_eq!(ds.example(1), ds2.example(1));
        assert_eq!(ds.labels(), ds2.labels());
    }
}
