use std::path::Path;

use crate::data::{labels_class_count, quantise, Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::tensor::{Image, Shape};

const UBYTE: u8 = 0x08;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an idx header; returns the dimensions and the data offset.
fn header(bytes: &[u8], what: &str, ndims: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::format(what, bytes.len() as u64, "truncated idx magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(what, 0, "idx magic must start with two zero bytes"));
    }
    if bytes[2] != UBYTE {
        return Err(Error::format(what, 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    if bytes[3] != ndims {
        return Err(Error::format(what, 3, format!("expected {ndims} dimensions, found {}", bytes[3])));
    }
    let data = 4 + 4 * ndims as usize;
    if bytes.len() < data {
        return Err(Error::format(what, bytes.len() as u64, "truncated idx dimensions"));
    }
    let dims = (0..ndims as usize)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect::<Vec<_>>();
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - data;
    if actual != expected {
        return Err(Error::format(
            what,
            bytes.len() as u64,
            format!("expected {expected} data bytes after the header, found {actual}"),
        ));
    }
    Ok((dims, data))
}

/// Reads an idx3 image file as single-channel images in `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    let (dims, offset) = header(&bytes, &what, 3)?;
    let shape = Shape::new(dims[1], dims[2], 1);
    Ok(bytes[offset..]
        .chunks_exact(shape.len().max(1))
        .take(dims[0])
        .map(|px| {
            Image::from_vec(shape, px.iter().map(|b| *b as f64 / 255.0).collect()).expect("chunk matches shape")
        })
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let (_, offset) = header(&bytes, &path.display().to_string(), 1)?;
    Ok(bytes[offset..].iter().map(|b| *b as usize).collect())
}

/// Writes single-channel images as idx3, quantised to 8 bits.
pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<()> {
    let shape = images.first().map_or(Shape::new(0, 0, 1), |x| x.shape());
    if shape.channels != 1 {
        return Err(Error::Unsupported("idx images must be single-channel".into()));
    }
    let mut out = vec![0, 0, UBYTE, 3];
    for d in [images.len(), shape.height, shape.width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for x in images {
        x.ensure_shape(shape)?;
        out.extend(x.as_slice().iter().map(|v| quantise(*v)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = vec![0, 0, UBYTE, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for y in labels {
        out.push(u8::try_from(*y).map_err(|_| Error::Domain(format!("label {y} does not fit a byte")))?);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pair(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if images.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", images.len()), labels.len()));
    }
    let shape = images.first().map_or(Shape::new(0, 0, 1), |x| x.shape());
    Dataset::new(shape, labels_class_count(&labels), images, labels)
}

pub(crate) fn read_idx_splits(dir: &Path) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: read_pair(dir, "train")?,
        test: read_pair(dir, "t10k")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape::new(3, 2, 1);
        let images: Vec<Image> = (0..4)
            .map(|k| Image::from_fn(shape, |y, x, _| ((k * 6 + y * 2 + x) * 10) as f64 / 255.0))
            .collect();
        let p = dir.path().join("imgs");
        write_idx_images(&p, &images).unwrap();
        assert_eq!(read_idx_images(&p).unwrap(), images);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&p, &bytes).unwrap();
        let err = read_idx_images(&p).unwrap_err().to_string();
        assert!(err.contains("expected 24 data bytes"), "{err}");
        assert!(err.contains("found 19"), "{err}");
    }

    #[test]
    fn bad_magic_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels");
        std::fs::write(&p, [0u8, 0, 0x0d, 1, 0, 0, 0, 0]).unwrap();
        assert!(matches!(read_idx_labels(&p), Err(Error::Format { offset: 2, .. })));
    }
}
