//! IDX reader/writer for grayscale image sets: big-endian u32 header fields,
//! images magic `0x00000803` (count, rows, cols), labels magic `0x00000801`
//! (count), one unsigned byte per pixel or label.

use std::path::Path;

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::ImageShape;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("idx {what}: header ends at byte {}", buf.len())))
}

fn check_magic(buf: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(buf, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            expected: format!("{expected:#010x} ({what})"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Maps a byte to `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Parses in-memory image and label files; `classes` is one more than the
/// largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    check_magic(labels, LABELS_MAGIC, "labels")?;
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            what: "idx images vs labels",
            left: n,
            right: n_labels,
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::EmptyBatch);
    }
    let need = 16 + n * rows * cols;
    if images.len() < need {
        return Err(Error::Truncated(format!(
            "idx images: expected {need} bytes, found {}",
            images.len()
        )));
    }
    if labels.len() < 8 + n {
        return Err(Error::Truncated(format!(
            "idx labels: expected {} bytes, found {}",
            8 + n,
            labels.len()
        )));
    }
    let pixels: Vec<f32> = images[16..need].iter().map(|&b| byte_to_unit(b)).collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        ImageShape::new(1, rows, cols),
        Tensor::new([n, 1, rows, cols], pixels)?,
        labels,
        classes,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Encodes a single-channel dataset.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.image.channels != 1 {
        return Err(Error::Config(format!(
            "idx stores single-channel images, dataset has {} channels",
            ds.image.channels
        )));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    for v in [
        IMAGES_MAGIC,
        n as u32,
        ds.image.height as u32,
        ds.image.width as u32,
    ] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| unit_to_byte(v)));
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lab.push(
            u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit a byte")))?,
        );
    }
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2×3 images, labels 7 and 2, assembled byte by byte.
    pub(crate) fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x02, // count
            0x00, 0x00, 0x00, 0x02, // rows
            0x00, 0x00, 0x00, 0x03, // cols
            0, 255, 51, 102, 153, 204, //
            255, 0, 0, 255, 255, 0,
        ];
        let labels = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 2];
        (images, labels)
    }

    #[test]
    fn fixture_parses_to_known_pixels() {
        let (img, lab) = fixture();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels, vec![7, 2]);
        let expect = [
            -1.0, 1.0, -0.6, -0.2, 0.2, 0.6, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0,
        ];
        for (a, b) in ds.images.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let (img2, lab2) = encode_idx(&ds).unwrap();
        assert_eq!((img2, lab2), (img, lab));
    }

    #[test]
    fn endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
    }

    #[test]
    fn rejects_label_magic_in_image_slot() {
        let (mut img, lab) = fixture();
        img[3] = 0x01;
        let err = parse_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let (img, mut lab) = fixture();
        lab[7] = 3;
        assert!(matches!(
            parse_idx(&img, &lab),
            Err(Error::CountMismatch { .. })
        ));
        let (img, lab) = fixture();
        assert!(matches!(
            parse_idx(&img[..20], &lab),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            parse_idx(&img, &lab[..9]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            parse_idx(&img[..6], &lab),
            Err(Error::Truncated(_))
        ));
    }
}
