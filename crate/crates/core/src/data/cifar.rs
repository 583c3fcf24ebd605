use std::path::{Path, PathBuf};

use crate::data::{labels_class_count, quantise, Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::tensor::{Image, Shape};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;

/// Reads one CIFAR binary batch: records of a label byte followed by the
/// red, green and blue planes.
pub fn read_cifar_binary(path: &Path) -> Result<(Vec<Image>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % RECORD != 0 {
        let complete = bytes.len() / RECORD;
        return Err(Error::format(
            path.display().to_string(),
            (complete * RECORD) as u64,
            format!(
                "trailing partial record: expected {RECORD} bytes, found {}",
                bytes.len() - complete * RECORD
            ),
        ));
    }
    let shape = Shape::new(SIDE, SIDE, 3);
    let mut images = Vec::with_capacity(bytes.len() / RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        images.push(Image::from_fn(shape, |y, x, c| planes[c * PLANE + y * SIDE + x] as f64 / 255.0));
    }
    Ok((images, labels))
}

pub fn write_cifar_binary(path: &Path, images: &[Image], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", images.len()), labels.len()));
    }
    let mut out = Vec::with_capacity(images.len() * RECORD);
    for (x, y) in images.iter().zip(labels) {
        x.ensure_shape(Shape::new(SIDE, SIDE, 3))?;
        out.push(u8::try_from(*y).map_err(|_| Error::Domain(format!("label {y} does not fit a byte")))?);
        for c in 0..3 {
            for y in 0..SIDE {
                for xx in 0..SIDE {
                    out.push(quantise(x.get(y, xx, c)));
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_many(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, y) = read_cifar_binary(p)?;
        images.extend(x);
        labels.extend(y);
    }
    Dataset::new(Shape::new(SIDE, SIDE, 3), labels_class_count(&labels), images, labels)
}

pub(crate) fn read_cifar_splits(dir: &Path) -> Result<DatasetSplits> {
    let mut train: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train.sort();
    if train.is_empty() {
        return Err(Error::Empty(format!("no data_batch_*.bin in {}", dir.display())));
    }
    Ok(DatasetSplits {
        train: read_many(&train)?,
        test: read_many(&[dir.join("test_batch.bin")])?,
    })
}
