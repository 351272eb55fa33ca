//! IDX containers (MNIST, Fashion-MNIST).

use std::borrow::Cow;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw rank-3 u8 image block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

/// Gzip streams (prefix `1f 8b`) are inflated first; byte offsets in errors
/// then refer to the inflated stream.
fn inflate(bytes: &[u8]) -> Result<Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        if let Err(e) = GzDecoder::new(bytes).read_to_end(&mut out) {
            return format_err(out.len(), format!("gzip stream: {e}"));
        }
        Ok(Cow::Owned(out))
    } else {
        Ok(Cow::Borrowed(bytes))
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err(
            bytes.len(),
            format!("header ends before {what} at offset {offset}"),
        ),
    }
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return format_err(0, format!("magic 0x{magic:08x}, expected 0x{expected:08x}"));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: Option<usize>, what: &str) -> Result<&'a [u8]> {
    let Some(end) = len.and_then(|l| l.checked_add(start)) else {
        return format_err(4, format!("declared {what} size overflows"));
    };
    if bytes.len() < end {
        return format_err(
            bytes.len(),
            format!(
                "{what} truncated: declared {} bytes from offset {start}, file has {}",
                end - start,
                bytes.len()
            ),
        );
    }
    Ok(&bytes[start..end])
}

/// Parses an image file (magic `0x00000803`). Bytes past the declared count
/// are ignored.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let bytes = inflate(bytes)?;
    check_magic(&bytes, IMAGES_MAGIC)?;
    let count = read_u32(&bytes, 4, "image count")? as usize;
    let rows = read_u32(&bytes, 8, "row count")? as usize;
    let cols = read_u32(&bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return format_err(
            if rows == 0 { 8 } else { 12 },
            format!("empty image shape {rows}x{cols}"),
        );
    }
    let len = count.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let pixels = payload(&bytes, 16, len, "image data")?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Parses a label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = inflate(bytes)?;
    check_magic(&bytes, LABELS_MAGIC)?;
    let count = read_u32(&bytes, 4, "label count")? as usize;
    Ok(payload(&bytes, 8, Some(count), "label data")?.to_vec())
}

fn tag_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    }
}

/// Loads an IDX image/label pair with 10 classes, scaling pixels to `[0, 1]`
/// before `norm`.
pub fn load_idx<S: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    norm: &Normalization,
    split: &str,
) -> Result<Dataset<S>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&std::fs::read(ip)?).map_err(|e| tag_path(ip, e))?;
    let labels = parse_idx_labels(&std::fs::read(lp)?).map_err(|e| tag_path(lp, e))?;
    if labels.len() != images.count {
        return Err(tag_path(
            lp,
            Error::Format {
                offset: 4,
                message: format!("{} labels for {} images", labels.len(), images.count),
            },
        ));
    }
    if let Some(i) = labels.iter().position(|&y| y >= 10) {
        return Err(tag_path(
            lp,
            Error::Format {
                offset: 8 + i as u64,
                message: format!("label {} outside [0, 10)", labels[i]),
            },
        ));
    }
    let plane = images.rows * images.cols;
    let mut data: Vec<S> = images
        .pixels
        .iter()
        .map(|&p| S::c(p as f64 / 255.0))
        .collect();
    norm.normalize(&mut data, 1, plane)?;
    let x = Tensor::new(data, &[images.count, 1, images.rows, images.cols])?;
    Dataset::new(x, labels.into_iter().map(usize::from).collect(), 10, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    fn images_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn two_image_fixture() {
        let px: Vec<u8> = vec![0, 255, 128, 1, 2, 3, 4, 5];
        let img = parse_idx_images(&images_file(2, 2, 2, &px)).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 2, 2));
        assert_eq!(img.pixels, px);
    }

    #[test]
    fn gzip_is_sniffed() {
        let raw = images_file(1, 1, 3, &[7, 8, 9]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(
            parse_idx_images(&gz).unwrap(),
            parse_idx_images(&raw).unwrap()
        );
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let bytes = images_file(0, 1, 1, &[]);
        match parse_idx_labels(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_not_read() {
        let img = parse_idx_images(&images_file(1, 1, 2, &[1, 2, 3, 4])).unwrap();
        assert_eq!(img.pixels, vec![1, 2]);
    }
}
