//! IDX binary format (the MNIST distribution format).
//!
//! Big-endian throughout. Image files carry magic `0x00000803` and dims
//! `[n, rows, cols]`; label files carry `0x00000801` and `[n]`. Pixels are
//! `u8` and load as `f64` in `[0, 1]` (divided by 255).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

/// Parses an IDX image file: `(count, rows, cols, pixels)` with pixels in
/// row-major image order.
pub fn read_idx_images(mut r: impl Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(&mut r, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32(&mut r, "image header")? as usize;
    let rows = read_u32(&mut r, "image header")? as usize;
    let cols = read_u32(&mut r, "image header")? as usize;
    let pixels = read_payload(&mut r, n * rows * cols, "image payload")?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file into raw class bytes.
pub fn read_idx_labels(mut r: impl Read) -> Result<Vec<u8>> {
    let magic = read_u32(&mut r, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32(&mut r, "label header")? as usize;
    read_payload(&mut r, n, "label payload")
}

/// Loads a paired image/label IDX file into a dataset of flattened images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = BufReader::new(File::open(images_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", images_path.display())))
    })?);
    let labels = BufReader::new(File::open(labels_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", labels_path.display())))
    })?);
    load_idx_readers(images, labels)
}

/// As [`load_idx`], from any readers (useful for in-memory fixtures).
pub fn load_idx_readers(images: impl Read, labels: impl Read) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            raw_labels.len()
        )));
    }
    let d = rows * cols;
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Matrix::from_vec(n, d, data)?;
    let targets = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::new(features, targets)
}

/// Serializes images back to IDX bytes. Test fixtures and the data fetcher
/// both use this; pixels must already be `u8`.
pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Shape(format!(
            "IDX write: {} pixels for {n}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        // Three 2x2 "images" with recognizable pixel values.
        let pixels: Vec<u8> = vec![0, 255, 128, 1, 10, 20, 30, 40, 200, 201, 202, 203];
        let images = write_idx_images(3, 2, 2, &pixels).unwrap();
        let labels = write_idx_labels(&[7, 0, 9]);
        (images, labels)
    }

    #[test]
    fn round_trip_scales_pixels_into_unit_interval() {
        let (images, labels) = fixture();
        let ds = load_idx_readers(&images[..], &labels[..]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.targets(), &[7, 0, 9]);
        let row0 = ds.feature_row(0);
        assert_eq!(row0[0], 0.0);
        assert_eq!(row0[1], 1.0);
        assert_eq!(row0[2], 128.0 / 255.0);
        assert!(ds.feature_row(2).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let (mut images, labels) = fixture();
        images[3] = 0x99;
        assert_eq!(
            load_idx_readers(&images[..], &labels[..]).unwrap_err().kind(),
            "format-error"
        );
        let (images, mut labels) = fixture();
        labels[3] = 0x42;
        assert_eq!(
            load_idx_readers(&images[..], &labels[..]).unwrap_err().kind(),
            "format-error"
        );
    }

    #[test]
    fn truncation_is_a_format_error() {
        let (images, labels) = fixture();
        // Truncated header.
        assert_eq!(read_idx_images(&images[..7]).unwrap_err().kind(), "format-error");
        // Truncated payload.
        let cut = images.len() - 3;
        assert_eq!(read_idx_images(&images[..cut]).unwrap_err().kind(), "format-error");
        let cut = labels.len() - 1;
        assert_eq!(read_idx_labels(&labels[..cut]).unwrap_err().kind(), "format-error");
    }

    #[test]
    fn image_label_count_mismatch_rejected() {
        let (images, _) = fixture();
        let labels = write_idx_labels(&[1, 2]);
        assert_eq!(
            load_idx_readers(&images[..], &labels[..]).unwrap_err().kind(),
            "format-error"
        );
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_idx(Path::new("/nonexistent/images"), Path::new("/nonexistent/labels"))
            .unwrap_err();
        assert_eq!(err.kind(), "io-error");
    }
}
