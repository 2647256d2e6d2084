//! Big-endian IDX files as used by MNIST, optionally gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn header(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "expected IDX magic {magic:#010x}, found {found:#010x}"
        )));
    }
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload = &bytes[4 + 4 * ndims..];
    let expected: usize = dims.iter().product();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Parses an image file into `n x (rows*cols)` features scaled by 1/255.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, payload) = header(bytes, IMAGES_MAGIC, 3)?;
    let (n, pixels) = (dims[0], dims[1] * dims[2]);
    if n == 0 || pixels == 0 {
        return Err(Error::Format("IDX image file is empty".into()));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::matrix(n, pixels, data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = header(bytes, LABELS_MAGIC, 1)?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair. Gzip input is detected by its magic bytes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let features = parse_images(&read_bytes(images_path.as_ref())?)?;
    let labels = parse_labels(&read_bytes(labels_path.as_ref())?)?;
    if features.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

/// Serializes `n` images of `rows x cols` bytes in IDX layout.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lbl"));
        std::fs::write(&i, images).unwrap();
        std::fs::write(&l, labels).unwrap();
        (i, l)
    }

    #[test]
    fn hand_built_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let images = encode_images(2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        let (i, l) = write_pair(dir.path(), &images, &encode_labels(&[1, 0]));
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.features().shape(), &[2, 4]);
        assert_eq!(ds.features().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let images = encode_images(1, 3, &[10, 20, 30, 40, 50, 60]);
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&images).unwrap();
        let (i, l) = write_pair(dir.path(), &gz.finish().unwrap(), &encode_labels(&[0, 1]));
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.features().get(1, 2), 60.0 / 255.0);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_images(1, 1, &[0]);
        bytes[3] = 0x02;
        assert!(matches!(parse_images(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let bytes = encode_images(2, 2, &[0; 8]);
        assert!(matches!(parse_images(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_images(&bytes[..6]), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), &encode_images(1, 1, &[0, 1]), &encode_labels(&[0, 1, 1]));
        assert!(matches!(load_idx(&i, &l), Err(Error::Consistency(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            load_idx("/nonexistent/img", "/nonexistent/lbl"),
            Err(Error::FileNotFound(_))
        ));
    }
}
